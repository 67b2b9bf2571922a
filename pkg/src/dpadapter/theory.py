"""Empirical checks of the decoupled-batch convergence and the utility-vs-rho
scaling on synthetic objectives with known constants.

Both synthetic families are quadratic in theta, so the minimizer, the
infimum and the PL constant are available in closed form.  The PL condition
is used in the form ``L(theta) - inf L <= mu * ||grad L(theta)||^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .finetune import RandomRoundConfig, random_round_dpsgd, random_round_step_size, utility_sigma

QUADRATIC = "quadratic"
RESCALED_LINEAR = "rescaled-linear-model"


@dataclass
class TheoryParams:
    """Constants of the smoothness / Lipschitz / PL assumptions.

    ``beta`` may be 0 when the model output is linear in theta, and
    ``sigma_hat_sq`` may be 0 when all per-sample losses coincide; every
    other constant must be positive.
    """

    beta: float
    beta1: float
    beta2: float
    sigma_hat_sq: float
    mu: float
    rho: float

    def __post_init__(self):
        for name in ("beta1", "beta2", "mu", "rho"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta < 0 or self.sigma_hat_sq < 0:
            raise ConfigError("beta and sigma_hat_sq must be >= 0")

    @property
    def beta_hat(self) -> float:
        return self.rho**2 * self.beta2 + self.beta * self.beta1


@dataclass
class SyntheticObjective:
    """Finite-sum objective ``L_D = mean_i L_i`` with closed-form gradients.

    ``quadratic``: ``L_i = 1/2 (theta - c_i)^T A (theta - c_i)``.
    ``rescaled-linear-model``: ``L_i = 1/2 (rho theta^T xhat_i - y_i)^2 + lam/2 ||theta||^2``
    with unit-norm ``xhat_i``, so the output map has robustness exactly rho.
    """

    kind: str
    params: TheoryParams
    A: np.ndarray | None = None
    centers: np.ndarray | None = None
    xhat: np.ndarray | None = None
    y: np.ndarray | None = None
    lam: float = 0.0
    theta0: np.ndarray | None = None
    hessian: np.ndarray = field(init=False)
    minimizer: np.ndarray = field(init=False)
    inf_loss: float = field(init=False)

    def __post_init__(self):
        if self.kind == QUADRATIC:
            self.hessian = self.A
            self.minimizer = self.centers.mean(axis=0)
        elif self.kind == RESCALED_LINEAR:
            rho = self.params.rho
            n, d = self.xhat.shape
            self.hessian = rho**2 * self.xhat.T @ self.xhat / n + self.lam * np.eye(d)
            self.minimizer = np.linalg.solve(self.hessian, rho * self.xhat.T @ self.y / n)
        else:
            raise InputError(f"unknown objective kind {self.kind!r}")
        self.inf_loss = self.loss(self.minimizer)

    def __len__(self):
        return (self.centers if self.kind == QUADRATIC else self.xhat).shape[0]

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    # -- construction

    @classmethod
    def quadratic(cls, n: int = 64, d: int = 8, seed: int = 0, eig_range=(0.1, 1.0),
                  spread: float = 1.0) -> SyntheticObjective:
        rng = np.random.default_rng(seed)
        lo, hi = eig_range
        if not 0 < lo <= hi:
            raise ConfigError("eig_range must satisfy 0 < lo <= hi")
        eig = np.linspace(lo, hi, d)
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        A = (Q * eig) @ Q.T
        A = (A + A.T) / 2
        centers = spread * rng.normal(size=(n, d))
        dev = (centers - centers.mean(axis=0)) @ A
        sigma_hat_sq = float(np.mean(np.sum(dev**2, axis=1)))
        params = TheoryParams(beta=0.0, beta1=1.0, beta2=1.0, sigma_hat_sq=sigma_hat_sq,
                              mu=1.0 / (2.0 * lo), rho=math.sqrt(hi))
        theta0 = centers.mean(axis=0) + 3.0 * Q[:, 0]
        return cls(QUADRATIC, params, A=A, centers=centers, theta0=theta0)

    @classmethod
    def rescaled_linear(cls, rho: float, n: int = 32, d: int = 8, seed: int = 0,
                        lam: float = 0.1, radius: float = 2.0,
                        beta1: float | None = None) -> SyntheticObjective:
        """Linear model with output scale ``rho`` on normalized probes.

        ``radius`` bounds the region of theta the constants are stated for;
        ``beta1`` bounds ``|rho theta^T xhat - y|`` there and defaults to
        ``rho * radius + max|y|``.  The ridge term is charged to ``beta`` as
        ``beta = lam / beta1`` so that ``beta_hat`` bounds the per-sample
        curvature ``rho^2 + lam``.
        """
        if not rho > 0:
            raise ConfigError("rho must be positive")
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, d))
        xhat = x / np.linalg.norm(x, axis=1, keepdims=True)
        w = rng.normal(size=d)
        y = np.tanh(xhat @ w) + 0.1 * rng.normal(size=n)
        beta1 = rho * radius + float(np.max(np.abs(y))) if beta1 is None else beta1
        theta0 = rng.normal(size=d)
        theta0 /= np.linalg.norm(theta0)
        hess = rho**2 * xhat.T @ xhat / n + lam * np.eye(d)
        mu = 1.0 / (2.0 * float(np.linalg.eigvalsh(hess)[0]))
        params = TheoryParams(beta=lam / beta1, beta1=beta1, beta2=1.0,
                              sigma_hat_sq=(rho * beta1) ** 2, mu=mu, rho=rho)
        return cls(RESCALED_LINEAR, params, xhat=xhat, y=y, lam=lam, theta0=theta0)

    # -- evaluation

    def sample_losses(self, theta) -> np.ndarray:
        if self.kind == QUADRATIC:
            e = theta - self.centers
            return 0.5 * np.einsum("ij,jk,ik->i", e, self.A, e)
        r = self.params.rho * self.xhat @ theta - self.y
        return 0.5 * r**2 + 0.5 * self.lam * float(theta @ theta)

    def loss(self, theta) -> float:
        return float(np.mean(self.sample_losses(theta)))

    def suboptimality(self, theta) -> float:
        # exact for a quadratic L_D; avoids cancellation in L - inf L
        e = np.asarray(theta) - self.minimizer
        return 0.5 * float(e @ self.hessian @ e)

    def sample_grads(self, theta, idx=None) -> np.ndarray:
        if self.kind == QUADRATIC:
            c = self.centers if idx is None else self.centers[idx]
            return (theta - c) @ self.A
        xh = self.xhat if idx is None else self.xhat[idx]
        y = self.y if idx is None else self.y[idx]
        rho = self.params.rho
        return (rho * (rho * xh @ theta - y))[:, None] * xh + self.lam * theta

    def sample_grad(self, theta, i: int) -> np.ndarray:
        if self.kind == QUADRATIC:
            return self.A @ (theta - self.centers[i])
        x = self.xhat[i]
        rho = self.params.rho
        return (rho * (rho * float(x @ theta) - self.y[i])) * x + self.lam * theta

    def batch_grad(self, theta, idx) -> np.ndarray:
        if self.kind == QUADRATIC:
            return (theta - self.centers[idx].mean(axis=0)) @ self.A
        return self.sample_grads(theta, idx).mean(axis=0)

    def grad(self, theta) -> np.ndarray:
        return self.hessian @ (theta - self.minimizer)

    def analytic_mu(self) -> float:
        return 1.0 / (2.0 * float(np.linalg.eigvalsh(self.hessian)[0]))


# ---------------------------------------------------------------- measured constants


def measure_pl_constant(obj: SyntheticObjective, steps: int = 2000, seed: int = 0) -> float:
    """Largest ``(L - inf L) / ||grad L||^2`` seen along a gradient-descent path.

    Descent from a random start aligns with the flattest direction, where
    the ratio is largest, so the measured value approaches the true mu.
    """
    rng = np.random.default_rng(seed)
    theta = obj.minimizer + rng.normal(size=obj.dim)
    lr = 1.0 / float(np.linalg.eigvalsh(obj.hessian)[-1])
    best = 0.0
    for _ in range(steps):
        g = obj.grad(theta)
        gap = obj.suboptimality(theta)
        if gap < 1e-200:
            break
        best = max(best, gap / float(g @ g))
        theta = theta - 0.5 * lr * g
    return best


def audit_variance(obj: SyntheticObjective, n_probes: int = 32, radius: float = 2.0,
                   seed: int = 0) -> float:
    """Largest empirical ``mean_i ||grad L_i - grad L_D||^2`` over probe points."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        u = rng.normal(size=obj.dim)
        theta = radius * rng.uniform() * u / np.linalg.norm(u)
        G = obj.sample_grads(theta)
        worst = max(worst, float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1))))
    return worst


def measure_sample_smoothness(obj: SyntheticObjective, n_probes: int = 64, h: float = 1e-4,
                              seed: int = 0) -> float:
    """Finite-difference estimate of the per-sample gradient Lipschitz constant."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = len(obj)
    for k in range(n_probes):
        i = k % n
        theta = rng.normal(size=obj.dim)
        if obj.kind == RESCALED_LINEAR and k % 2 == 0:
            v = obj.xhat[i]
        else:
            v = rng.normal(size=obj.dim)
            v /= np.linalg.norm(v)
        diff = obj.sample_grad(theta + h * v, i) - obj.sample_grad(theta - h * v, i)
        worst = max(worst, float(np.linalg.norm(diff)) / (2.0 * h))
    return worst


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    variable: str
    value: float
    mean: float
    std: float
    n_seeds: int
    bound: float = math.nan
    per_seed: np.ndarray = field(default=None, repr=False)

    @property
    def ci95(self) -> float:
        return 1.96 * self.std / math.sqrt(self.n_seeds) if self.n_seeds > 1 else math.nan


def _row(variable, value, values, bound=math.nan) -> SweepRow:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return SweepRow(variable, float(value), float(values.mean()), std, len(values), bound, values)


def decoupled_sam_bound(params: TheoryParams, b1: int, b2: int) -> float:
    """Variance floor ``mu sigma^2 / (16 beta_hat) (1/|B2| + 1/|B1|)``."""
    return params.mu * params.sigma_hat_sq / (16.0 * params.beta_hat) * (1.0 / b2 + 1.0 / b1)


def _draw(rng, n, m):
    return np.arange(n) if m >= n else rng.choice(n, size=m, replace=False)


def decoupled_sam_trajectory(obj: SyntheticObjective, b1: int, b2: int, T: int, seed: int,
                             eta: float | None = None) -> np.ndarray:
    """Suboptimality after each of ``T`` unnormalized decoupled-SAM steps.

    ``theta <- theta - eta grad L_B2(theta + eta grad L_B1(theta))`` with
    both batches drawn without replacement from separate generators, so two
    runs that differ only in ``b1`` share their B2 sequence.
    """
    if min(b1, b2) < 1 or T < 1:
        raise ConfigError("batch sizes and T must be >= 1")
    eta = 1.0 / (4.0 * obj.params.beta_hat) if eta is None else eta
    rng1 = np.random.default_rng([seed, 1])
    rng2 = np.random.default_rng([seed, 2])
    n = len(obj)
    theta = obj.theta0.copy()
    out = np.empty(T)
    for t in range(T):
        delta = eta * obj.batch_grad(theta, _draw(rng1, n, b1))
        theta = theta - eta * obj.batch_grad(theta + delta, _draw(rng2, n, b2))
        out[t] = obj.suboptimality(theta)
    return out


def run_decoupled_sam_sweep(obj: SyntheticObjective, B1_sizes, B2_size: int, T: int, seeds,
                            burn_in: float = 0.0) -> list[SweepRow]:
    """Mean over seeds of ``(1/T') sum_t (L_D(theta_t) - inf L_D)`` for each |B1|.

    ``burn_in`` drops that leading fraction of iterates from the time
    average, which isolates the stationary floor for long runs.
    """
    seeds = list(seeds)
    start = int(burn_in * T)
    rows = []
    for b1 in B1_sizes:
        vals = [decoupled_sam_trajectory(obj, b1, B2_size, T, s)[start:].mean() for s in seeds]
        rows.append(_row("B1", b1, vals, decoupled_sam_bound(obj.params, min(b1, len(obj)),
                                                             B2_size)))
    return rows


def random_round_config(obj: SyntheticObjective, epsilon: float, delta: float = 1e-5,
                        noise: bool = True) -> RandomRoundConfig:
    """Noise level and step size for ``obj`` following the utility analysis."""
    p = obj.params
    n = len(obj)
    sigma = utility_sigma(p.beta1, p.rho, obj.dim, n, delta, epsilon) if noise else 0.0
    D_f = obj.suboptimality(obj.theta0)
    lr = random_round_step_size(p.beta_hat, D_f, sigma, n)
    return RandomRoundConfig(n, p.rho, p.beta1, delta, epsilon, lr,
                             noise_scale=1.0 if noise else 0.0)


def random_round_suboptimality(obj: SyntheticObjective, epsilon: float, seed: int,
                               delta: float = 1e-5, noise: bool = True,
                               lr: float | None = None) -> float:
    cfg = random_round_config(obj, epsilon, delta, noise)
    if lr is not None:
        cfg.lr = lr
    theta = random_round_dpsgd(obj.theta0.copy(), obj, cfg, np.random.default_rng(seed))
    return obj.suboptimality(theta)


def run_rho_utility_sweep(family, epsilon: float, seeds, delta: float = 1e-5,
                          noise: bool = True) -> list[SweepRow]:
    """Mean suboptimality of random-round DP-SGD for each objective in ``family``.

    ``family`` maps rho to a :class:`SyntheticObjective`.  Seeds are reused
    across family members so comparisons are paired.
    """
    seeds = list(seeds)
    rows = []
    for rho, obj in sorted(family.items()):
        p = obj.params
        vals = [random_round_suboptimality(obj, epsilon, s, delta, noise) for s in seeds]
        bound = rho * math.sqrt(p.beta_hat) / (len(obj) * epsilon)
        rows.append(_row("rho", rho, vals, bound))
    return rows


def rescaled_linear_family(rhos, **kwargs) -> dict[float, SyntheticObjective]:
    """Objectives sharing data and ``beta1`` that differ only in rho."""
    rhos = sorted(rhos)
    if "beta1" not in kwargs:
        ref = SyntheticObjective.rescaled_linear(rhos[-1], **kwargs)
        kwargs["beta1"] = ref.params.beta1
    return {r: SyntheticObjective.rescaled_linear(r, **kwargs) for r in rhos}


def paired_fraction(a, b) -> float:
    """Fraction of paired seeds with ``a < b``."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.mean(a < b))


SWEEP_COLUMNS = ["sweep_variable", "value", "mean", "std", "n_seeds", "ci95", "bound"]


def write_sweep_csv(rows: list[SweepRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.variable, repr(r.value), repr(r.mean), repr(r.std), r.n_seeds,
                        repr(r.ci95), repr(r.bound)])
    return path
