"""Parameter-robustness measurement: robust accuracy and a sampled rho lower bound."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ModelParams, per_sample_output_gradients, predict
from .data import Dataset
from .errors import InputError

DEFAULT_NOISE_STD = 0.1
DEFAULT_TRIALS = 10


@dataclass
class RobustnessReport:
    clean_accuracy: float
    robust_accuracy: float
    noise_std: float
    trials: int
    seed: int
    rho_estimate: float | None = None
    rho_l2: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


def _correct(model: ModelParams, x, y) -> int:
    return int(np.count_nonzero(np.argmax(predict(model, x), axis=1) == y))


def accuracy(model: ModelParams, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise InputError("empty evaluation set")
    return _correct(model, dataset.features, dataset.labels) / len(dataset)


def robust_accuracy(model: ModelParams, test_set: Dataset, noise_std: float = DEFAULT_NOISE_STD,
                    trials: int = DEFAULT_TRIALS, seed: int = 0) -> RobustnessReport:
    """Mean accuracy of ``theta + N(0, noise_std^2 I)`` over ``trials`` draws.

    Trial ``t`` draws from its own generator seeded ``(seed, t)``, so trials
    are independent of evaluation order.  Accuracies are accumulated as
    integer counts, which makes ``noise_std=0`` reproduce the clean accuracy
    exactly.
    """
    if noise_std < 0:
        raise InputError("noise_std must be >= 0")
    if trials < 1:
        raise InputError("trials must be >= 1")
    n = len(test_set)
    if n == 0:
        raise InputError("empty test set")
    x, y = test_set.features, test_set.labels
    theta = model.flatten()
    clean = _correct(model, x, y)
    total = 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        noisy = theta + noise_std * rng.standard_normal(theta.shape)
        total += _correct(model.unflatten(noisy), x, y)
    return RobustnessReport(clean / n, total / (trials * n), noise_std, trials, seed)


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    d = rng.standard_normal((count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def rho_curve(model: ModelParams, probe_x, probe_y, n_directions: int, radius_grid,
              seed: int = 0, directions=None, include_gradient: bool = True,
              output: str = "logit") -> np.ndarray:
    """Running-max estimate of rho after each candidate direction.

    Candidates are ``n_directions`` random unit directions (drawn
    sequentially, so a larger count extends the same sequence) followed by
    any explicit ``directions``, followed, when ``include_gradient`` is set,
    by the normalized gradient of the scalar output at each probe point.
    The scalar output is the true-class logit (``output="logit"``); with
    ``output="l2"`` the full logit-vector change is measured.
    """
    if n_directions < 0 or (n_directions == 0 and directions is None and not include_gradient):
        raise InputError("need at least one direction")
    radii = np.asarray(radius_grid, dtype=np.float64)
    if radii.size == 0 or np.any(radii <= 0):
        raise InputError("radii must be positive")
    if output not in ("logit", "l2"):
        raise InputError(f"unknown output variant {output!r}")
    x = np.asarray(probe_x, dtype=np.float64)
    y = np.asarray(probe_y, dtype=np.int64)
    if x.shape[0] == 0:
        raise InputError("empty probe set")
    theta = model.flatten()
    rng = np.random.default_rng(seed)
    cands = [_unit_directions(rng, n_directions, theta.size)] if n_directions else []
    if directions is not None:
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InputError("zero-norm perturbation direction")
        cands.append(d / norms)
    base = predict(model, x)
    rows = np.arange(x.shape[0])
    if include_gradient:
        weights = np.zeros_like(base)
        if output == "logit":
            weights[rows, y] = 1.0
            g = per_sample_output_gradients(model, x, weights)
        else:
            # every logit's gradient at every probe point
            g = np.concatenate(
                [per_sample_output_gradients(model, x, np.eye(base.shape[1])[np.full(len(x), j)])
                 for j in range(base.shape[1])]
            )
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        keep = norms[:, 0] > 0
        cands.append(g[keep] / norms[keep])
    dirs = np.concatenate(cands) if cands else np.zeros((0, theta.size))
    curve = np.empty(len(dirs))
    best = 0.0
    for i, d in enumerate(dirs):
        for r in radii:
            out = predict(model.unflatten(theta + r * d), x)
            if output == "logit":
                change = np.abs(out[rows, y] - base[rows, y])
            else:
                change = np.linalg.norm(out - base, axis=1)
            best = max(best, float(change.max()) / r)
        curve[i] = best
    return curve


def estimate_rho(model: ModelParams, probe_set: Dataset, n_directions: int = 32,
                 radius_grid=(1e-3, 1e-2, 1e-1), seed: int = 0, **kwargs) -> float:
    """Lower-bound estimate of rho: max output change per unit parameter shift."""
    curve = rho_curve(model, probe_set.features, probe_set.labels, n_directions, radius_grid,
                      seed, **kwargs)
    return float(curve[-1]) if curve.size else 0.0


def robustness_report(model: ModelParams, test_set: Dataset, noise_std: float = DEFAULT_NOISE_STD,
                      trials: int = DEFAULT_TRIALS, seed: int = 0, n_directions: int = 32,
                      radius_grid=(1e-3, 1e-2, 1e-1), n_probe: int = 64) -> RobustnessReport:
    report = robust_accuracy(model, test_set, noise_std, trials, seed)
    probe = test_set.subset(np.arange(min(n_probe, len(test_set))))
    report.rho_estimate = estimate_rho(model, probe, n_directions, radius_grid, seed)
    report.rho_l2 = estimate_rho(model, probe, n_directions, radius_grid, seed, output="l2")
    return report
