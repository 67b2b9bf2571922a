import math

import numpy as np
import pytest

from dpadapter.errors import ConfigError, InputError
from dpadapter.harness.runner import read_csv
from dpadapter.theory import (
    SyntheticObjective,
    TheoryParams,
    audit_variance,
    decoupled_sam_bound,
    decoupled_sam_trajectory,
    measure_pl_constant,
    measure_sample_smoothness,
    paired_fraction,
    random_round_config,
    random_round_suboptimality,
    rescaled_linear_family,
    run_decoupled_sam_sweep,
    run_rho_utility_sweep,
    write_sweep_csv,
)


@pytest.fixture(scope="module")
def quad():
    return SyntheticObjective.quadratic(n=64, d=8, seed=0)


def test_params_validation():
    p = TheoryParams(beta=0.5, beta1=2.0, beta2=3.0, sigma_hat_sq=0.0, mu=1.0, rho=2.0)
    assert p.beta_hat == 2.0**2 * 3.0 + 0.5 * 2.0
    for bad in (dict(mu=0.0), dict(rho=-1.0), dict(beta=-0.1), dict(sigma_hat_sq=-1.0)):
        kw = dict(beta=0.5, beta1=2.0, beta2=3.0, sigma_hat_sq=0.0, mu=1.0, rho=2.0)
        kw.update(bad)
        with pytest.raises(ConfigError):
            TheoryParams(**kw)
    with pytest.raises(InputError):
        SyntheticObjective("cubic", p)


def test_quadratic_closed_forms(quad):
    g = quad.sample_grads(quad.minimizer).mean(axis=0)
    assert np.abs(g).max() < 1e-12
    theta = np.random.default_rng(1).normal(size=8)
    assert quad.suboptimality(theta) == pytest.approx(quad.loss(theta) - quad.inf_loss, rel=1e-9)
    np.testing.assert_allclose(quad.grad(theta), quad.sample_grads(theta).mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(quad.sample_grad(theta, 3), quad.sample_grads(theta, [3])[0], atol=1e-14)
    assert quad.params.mu == pytest.approx(quad.analytic_mu(), rel=1e-12)


@pytest.mark.parametrize("make", [
    lambda: SyntheticObjective.quadratic(n=64, d=8, seed=0),
    lambda: SyntheticObjective.quadratic(n=16, d=5, seed=3, eig_range=(0.05, 2.0)),
    lambda: SyntheticObjective.rescaled_linear(1.0, n=32),
    lambda: SyntheticObjective.rescaled_linear(0.5, n=100, seed=2),
])
def test_measured_pl_matches_analytic(make):
    obj = make()
    assert measure_pl_constant(obj) == pytest.approx(obj.analytic_mu(), rel=0.01)


@pytest.mark.parametrize("make", [
    lambda: SyntheticObjective.quadratic(n=64, d=8, seed=0),
    lambda: SyntheticObjective.rescaled_linear(2.0, n=32),
    lambda: SyntheticObjective.rescaled_linear(0.5, n=100),
])
def test_variance_audit(make):
    obj = make()
    assert audit_variance(obj) <= obj.params.sigma_hat_sq * (1 + 1e-12)


@pytest.mark.parametrize("rho", [0.5, 1.0, 2.0])
def test_rescaled_smoothness_within_bound(rho):
    obj = SyntheticObjective.rescaled_linear(rho, n=32)
    measured = measure_sample_smoothness(obj)
    assert measured <= 1.05 * obj.params.beta_hat
    assert measured == pytest.approx(rho**2 + obj.lam, rel=1e-6)


def test_bound_arithmetic(quad):
    p = quad.params
    expected = p.mu * p.sigma_hat_sq / (16 * p.beta_hat) * (1 / 4 + 1 / 8)
    assert decoupled_sam_bound(p, 8, 4) == pytest.approx(expected, rel=1e-15)


def test_noise_free_case_converges():
    obj = SyntheticObjective.quadratic(n=16, d=6, seed=1, spread=0.0)
    assert obj.params.sigma_hat_sq == 0
    traj = decoupled_sam_trajectory(obj, 1, 1, 2000, seed=0)
    assert traj[-1] < 1e-8


def test_trajectory_is_deterministic_and_validated(quad):
    a = decoupled_sam_trajectory(quad, 8, 4, 50, seed=5)
    assert np.array_equal(a, decoupled_sam_trajectory(quad, 8, 4, 50, seed=5))
    with pytest.raises(ConfigError):
        decoupled_sam_trajectory(quad, 0, 4, 10, seed=0)


def test_full_batch_beats_single_sample(quad):
    rows = run_decoupled_sam_sweep(quad, [1, len(quad)], 4, 600, range(6), burn_in=0.5)
    assert rows[1].mean < rows[0].mean
    assert paired_fraction(rows[1].per_seed, rows[0].per_seed) >= 0.8
    assert all(r.n_seeds == 6 and r.ci95 > 0 for r in rows)


def test_small_rho_approaches_noise_free_level():
    obj = SyntheticObjective.rescaled_linear(0.01, n=100)
    lr = random_round_config(obj, 4.0).lr
    noisy = np.mean([random_round_suboptimality(obj, 4.0, s, lr=lr) for s in range(20)])
    clean = np.mean([random_round_suboptimality(obj, 4.0, s, noise=False, lr=lr) for s in range(20)])
    assert noisy == pytest.approx(clean, rel=0.10)


def test_rho_sweep_rows_and_csv(tmp_path):
    fam = rescaled_linear_family([0.5, 1.0], n=40)
    assert fam[0.5].params.beta1 == fam[1.0].params.beta1
    rows = run_rho_utility_sweep(fam, 4.0, range(3))
    assert [r.value for r in rows] == [0.5, 1.0]
    p = fam[1.0].params
    assert rows[1].bound == pytest.approx(math.sqrt(p.beta_hat) / (40 * 4.0), rel=1e-15)
    back = read_csv(write_sweep_csv(rows, tmp_path / "s.csv"))
    assert [r["mean"] for r in back] == [r.mean for r in rows]
    assert back[0]["sweep_variable"] == "rho" and back[0]["n_seeds"] == 3


def test_paired_fraction():
    assert paired_fraction([1, 2, 3, 4], [2, 1, 4, 5]) == 0.75
