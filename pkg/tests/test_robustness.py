import numpy as np
import pytest

from dpadapter.autodiff import ModelParams, init_mlp
from dpadapter.data import Dataset
from dpadapter.errors import InputError
from dpadapter.robustness import (
    accuracy,
    estimate_rho,
    rho_curve,
    robust_accuracy,
    robustness_report,
)


def _dataset(x, y):
    x = np.asarray(x, dtype=np.float64)
    return Dataset(x, np.asarray(y), "probe", np.zeros(x.shape[1]), np.ones(x.shape[1]))


@pytest.fixture(scope="module")
def trained():
    from dpadapter.data import make_synthetic_transfer
    from dpadapter.pretrain import PretrainConfig, train_standard

    task = make_synthetic_transfer(0, n_up=400, n_down=80, d_in=8, k=4)
    cfg = PretrainConfig(K=200, warmup_epochs=2)
    return task, train_standard(task.upstream, cfg, 0, init_mlp([8, 16, 4], seed=0))


def test_zero_noise_equals_clean(trained):
    task, model = trained
    rep = robust_accuracy(model, task.upstream_test, noise_std=0.0, trials=3)
    assert rep.robust_accuracy == rep.clean_accuracy == accuracy(model, task.upstream_test)
    assert rep.clean_accuracy > 0.8


def test_huge_noise_is_chance(trained):
    task, model = trained
    test = task.upstream_test
    per_class = np.bincount(test.labels).min()
    idx = np.concatenate([np.flatnonzero(test.labels == c)[:per_class] for c in range(4)])
    balanced = test.subset(idx)
    rep = robust_accuracy(model, balanced, noise_std=100.0, trials=40, seed=1)
    n = len(balanced) * rep.trials
    assert abs(rep.robust_accuracy - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / n)


def test_same_seed_same_report(trained):
    task, model = trained
    a = robust_accuracy(model, task.upstream_test, 0.3, 5, seed=7)
    b = robust_accuracy(model, task.upstream_test, 0.3, 5, seed=7)
    assert a == b


def test_input_errors(trained):
    _, model = trained
    empty = _dataset(np.zeros((0, 8)), np.zeros(0, dtype=int))
    with pytest.raises(InputError):
        robust_accuracy(model, empty)
    ds = _dataset(np.zeros((2, 8)), [0, 1])
    with pytest.raises(InputError):
        robust_accuracy(model, ds, noise_std=-1)
    with pytest.raises(InputError):
        robust_accuracy(model, ds, trials=0)


def test_linear_model_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 1))
    model = ModelParams([(w, np.zeros(1))])
    x = rng.normal(size=(12, 5))
    probe = _dataset(x, np.zeros(12, dtype=int))
    exact = float(np.sqrt((x**2).sum(axis=1) + 1.0).max())
    est = estimate_rho(model, probe, n_directions=8)
    assert est <= exact * (1 + 1e-9)
    assert est >= 0.95 * exact
    assert est >= float(np.linalg.norm(x, axis=1).max())


def test_zero_model_and_zero_direction():
    model = ModelParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    probe = _dataset(np.ones((4, 3)), [0, 1, 0, 1])
    rho = estimate_rho(model, probe, n_directions=16)
    assert 0 <= rho <= 10
    with pytest.raises(InputError):
        rho_curve(model, probe.features, probe.labels, 0, [0.1], directions=np.zeros((1, model.dim)),
                  include_gradient=False)
    with pytest.raises(InputError):
        rho_curve(model, probe.features, probe.labels, 4, [0.0])


def test_rho_nondecreasing_in_directions(trained):
    task, model = trained
    probe = task.upstream_test.subset(np.arange(16))
    curve = rho_curve(model, probe.features, probe.labels, 32, (1e-2, 1e-1), seed=3,
                      include_gradient=False)
    assert np.all(np.diff(curve) >= 0)
    small = estimate_rho(model, probe, 8, seed=3, include_gradient=False)
    large = estimate_rho(model, probe, 16, seed=3, include_gradient=False)
    assert large >= small


def test_report_row(trained):
    task, model = trained
    rep = robustness_report(model, task.upstream_test, trials=2, n_directions=4, n_probe=8)
    row = rep.as_row()
    assert row["rho_estimate"] > 0 and row["rho_l2"] > 0
    assert set(row) == {"clean_accuracy", "robust_accuracy", "noise_std", "trials", "seed",
                        "rho_estimate", "rho_l2"}
