"""Differentially private fine-tuning: DP-SGD, AdpClip, AdpAlloc, GEP and random-round DP-SGD."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .accounting import (
    DEFAULT_ORDERS,
    SIGMA_BRACKET,
    AccountantState,
    PrivacySpec,
    bisect_parameter,
    compose_and_convert,
    format_report,
    rdp_subsampled_gaussian,
)
from .autodiff import ModelParams, loss_and_gradient, per_sample_gradients
from .data import Dataset
from .errors import (
    BudgetExceededError,
    ConfigError,
    DegenerateInputError,
    InputError,
    PreconditionError,
)
from .pretrain import mean_loss, sgd_update
from .robustness import accuracy

log = logging.getLogger(__name__)

ALGORITHMS = ("dpsgd", "adpclip", "adpalloc", "gep")
ORTHONORMAL_TOL = 1e-8


@dataclass
class DpSgdConfig:
    """Shared DP fine-tuning settings.

    ``sigma=None`` means calibrate the noise multiplier to the privacy
    target.  ``sigma=0`` is the non-private ablation and is flagged as such
    in every report.
    """

    clip_norm: float = 4.0
    sigma: float | None = None
    lot_size: int = 32
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.lot_size < 1 or self.epochs < 0:
            raise ConfigError("lot_size must be >= 1 and epochs >= 0")

    @property
    def non_private(self) -> bool:
        return self.sigma == 0


def clip_gradient(g, C: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, C/||g||)``."""
    if not C > 0:
        raise ConfigError(f"clip norm must be positive, got {C}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= C:
        return g
    return g * (C / norm)


def clip_rows(G: np.ndarray, C) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise clipping; returns (clipped rows, original row norms)."""
    norms = np.linalg.norm(G, axis=1)
    scale = np.minimum(1.0, C / np.where(norms > 0, norms, 1.0))
    return G * scale[:, None], norms


def _privatized_sum(G, clip, sigma, rng):
    clipped, norms = clip_rows(G, clip) if len(G) else (G, np.zeros(0))
    total = clipped.sum(axis=0)
    if sigma > 0:
        total = total + sigma * clip * rng.standard_normal(total.shape)
    return total, norms


def dpsgd_step(model: ModelParams, lot, config: DpSgdConfig, rng: np.random.Generator,
               velocity: np.ndarray | None = None, sigma: float | None = None):
    """One DP-SGD update on ``lot = (x, y)``.

    Per-sample gradients are clipped to ``clip_norm``, summed, noised with
    ``N(0, sigma^2 C^2 I)``, divided by ``lot_size`` and fed to heavy-ball
    momentum.  Returns ``(model, velocity)``.
    """
    x, y = lot
    if len(y) == 0:
        raise InputError("lot must be nonempty")
    sigma = config.sigma if sigma is None else sigma
    if sigma is None:
        raise ConfigError("dpsgd_step needs a concrete sigma")
    theta = model.flatten()
    velocity = np.zeros_like(theta) if velocity is None else velocity
    total, _ = _privatized_sum(per_sample_gradients(model, x, y), config.clip_norm, sigma, rng)
    theta, velocity = sgd_update(theta, velocity, total / config.lot_size, config.lr,
                                 config.momentum, 0.0)
    return model.unflatten(theta), velocity


# ---------------------------------------------------------------- AdpClip


@dataclass
class AdpClipState:
    C_t: float = 4.0
    eta_C: float = 0.2
    target_quantile: float = 0.5
    sigma_b: float = 0.0

    def __post_init__(self):
        if not self.C_t > 0:
            raise ConfigError("C_t must be positive")
        if not 0 <= self.target_quantile <= 1:
            raise ConfigError("target_quantile must lie in [0, 1]")
        if self.sigma_b < 0:
            raise ConfigError("sigma_b must be >= 0")


def adpclip_update(state: AdpClipState, per_sample_norms, rng: np.random.Generator | None = None,
                   m: int | None = None) -> float:
    """Next clipping threshold from a privatized below-threshold fraction.

    ``m`` is the normalizer of the count (the expected lot size under
    Poisson sampling); it defaults to the number of norms given.
    """
    norms = np.asarray(per_sample_norms, dtype=np.float64)
    m = len(norms) if m is None else m
    if m < 1:
        raise InputError("adaptive clipping needs at least one norm")
    count = float(np.count_nonzero(norms <= state.C_t))
    if state.sigma_b > 0:
        if rng is None:
            raise InputError("an rng is required when sigma_b > 0")
        count += state.sigma_b * rng.standard_normal()
    b_tilde = count / m
    return state.C_t * math.exp(-state.eta_C * (b_tilde - state.target_quantile))


def adpclip_split_sigma(sigma_eff: float, sigma_b: float) -> float:
    """Gradient noise multiplier so that the gradient and count queries jointly
    act as one Gaussian mechanism with multiplier ``sigma_eff``.

    The per-step release is (sum of clipped grads, below-threshold count),
    with sensitivities C_t and 1.  After whitening, the joint multiplier is
    ``(sigma^-2 + sigma_b^-2)^(-1/2)``.
    """
    if sigma_b <= sigma_eff:
        raise ConfigError(f"sigma_b={sigma_b} must exceed the joint multiplier {sigma_eff}")
    return 1.0 / math.sqrt(sigma_eff**-2 - sigma_b**-2)


# ---------------------------------------------------------------- AdpAlloc


@dataclass
class AdpAllocSchedule:
    sigma0: float
    k: float

    def __post_init__(self):
        if not self.k > 0:
            raise ConfigError(f"decay rate k must be > 0, got {self.k}")
        if self.sigma0 < 0:
            raise ConfigError("sigma0 must be >= 0")


def adpalloc_sigma(schedule: AdpAllocSchedule, t) -> float:
    if t < 0:
        raise InputError("t must be >= 0")
    if not schedule.k > 0:
        raise ConfigError(f"decay rate k must be > 0, got {schedule.k}")
    return schedule.sigma0 * math.exp(-schedule.k * t)


# ---------------------------------------------------------------- GEP


@dataclass
class GepConfig:
    subspace_dim: int = 8
    power_iters: int = 2
    public_batch: int = 128

    def __post_init__(self):
        if self.subspace_dim < 1:
            raise ConfigError("subspace_dim must be >= 1")
        if self.power_iters < 1:
            raise ConfigError("power_iters must be >= 1; the basis would be unconverged")
        if self.public_batch < 1:
            raise ConfigError("public_batch must be >= 1")


def orthonormalize(V: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass per column.

    A column that collapses (rank deficiency) is replaced by a random vector
    orthogonalized against the previous ones, so the result is always
    orthonormal.
    """
    V = np.array(V, dtype=np.float64, copy=True)
    d, r = V.shape
    if r > d:
        raise PreconditionError(f"cannot fit {r} orthonormal columns in dimension {d}")
    rng = np.random.default_rng(0) if rng is None else rng
    for j in range(r):
        v = V[:, j]
        scale = np.linalg.norm(v)
        for _ in range(3):
            for _ in range(2):
                for i in range(j):
                    v = v - (V[:, i] @ v) * V[:, i]
            norm = np.linalg.norm(v)
            if norm > 1e-10 * max(scale, 1e-300):
                break
            v = rng.standard_normal(d)
            scale = np.linalg.norm(v)
        V[:, j] = v / norm
    return V


def check_orthonormal(basis: np.ndarray) -> None:
    r = basis.shape[1]
    err = float(np.max(np.abs(basis.T @ basis - np.eye(r)))) if r else 0.0
    if err > ORTHONORMAL_TOL:
        raise PreconditionError(f"basis is not orthonormal: max |B^T B - I| = {err:.3e}")


def power_method_basis(public_grads, config: GepConfig,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Top ``subspace_dim`` right singular directions of the public gradient
    matrix by block power iteration, as a ``[d, r]`` orthonormal basis."""
    G = np.asarray(public_grads, dtype=np.float64)
    if config.power_iters < 1:
        raise ConfigError("power_iters must be >= 1")
    r = config.subspace_dim
    if r > G.shape[0]:
        raise PreconditionError(f"subspace_dim={r} exceeds the {G.shape[0]} public gradients")
    if not np.any(G):
        raise DegenerateInputError("all public gradients are zero")
    rng = np.random.default_rng(0) if rng is None else rng
    B = orthonormalize(rng.standard_normal((G.shape[1], r)), rng)
    for _ in range(config.power_iters):
        B = orthonormalize(G.T @ (G @ B), rng)
    return B


def gep_project(private_grads, basis) -> tuple[np.ndarray, np.ndarray]:
    """Split gradients into anchor-subspace coordinates and the residual."""
    basis = np.asarray(basis, dtype=np.float64)
    check_orthonormal(basis)
    G = np.atleast_2d(np.asarray(private_grads, dtype=np.float64))
    emb = G @ basis
    return emb, G - emb @ basis.T


# ---------------------------------------------------------------- fine-tuning loop


@dataclass
class FinetuneResult:
    model: ModelParams
    algorithm: str
    target_epsilon: float
    epsilon: float
    order: int | None
    sigma: float
    non_private: bool
    accountant: AccountantState | None
    delta: float
    history: list[dict] = field(default_factory=list)

    def report(self) -> str:
        head = f"[finetune]\nalgorithm = {self.algorithm}\nsigma = {self.sigma:.6g}\n"
        if self.non_private:
            return head + "non_private = true\nepsilon = inf\n"
        return head + "non_private = false\n" + format_report(self.accountant, self.delta)


def _steps_per_epoch(n: int, lot_size: int) -> int:
    return max(1, round(n / lot_size))


def _rdp_vector(q, sigma, orders):
    return np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])


def _replay_epsilon(q, epoch_sigmas, steps_per_epoch, delta, orders=DEFAULT_ORDERS) -> float:
    """Epsilon of a schedule, accumulated exactly as the training loop does."""
    state = AccountantState(orders)
    cache: dict[float, np.ndarray] = {}
    for s in epoch_sigmas:
        if s not in cache:
            cache[s] = _rdp_vector(q, s, orders)
        state.rdp_ledger = state.rdp_ledger + steps_per_epoch * cache[s]
    return compose_and_convert(state, delta)[0]


@dataclass
class _Plan:
    epoch_sigmas: list[float]
    sigma: float
    sigma_b: float = 0.0
    gradient_sigma: list[float] | None = None


def _plan(algorithm, spec, config, q, spe, *, sigma_b=None, sigma_b_ratio=4.0,
          sigma0_factor=1.5) -> _Plan:
    E = config.epochs
    private = math.isfinite(spec.epsilon) and config.sigma != 0
    if not private:
        return _Plan([0.0] * E, 0.0, 0.0, [0.0] * E)
    if config.sigma is not None:
        eff = float(config.sigma)
    else:
        eff = bisect_parameter(lambda s: _replay_epsilon(q, [s] * E, spe, spec.delta),
                               spec.epsilon, *SIGMA_BRACKET)
    if algorithm == "dpsgd":
        return _Plan([eff] * E, eff, 0.0, [eff] * E)
    if algorithm == "adpclip":
        sb = sigma_b_ratio * eff if sigma_b is None else sigma_b
        g = adpclip_split_sigma(eff, sb)
        return _Plan([eff] * E, eff, sb, [g] * E)
    if algorithm == "gep":
        # two released parts share the clip norm, so the sensitivity is sqrt(2) C
        g = math.sqrt(2.0) * eff
        return _Plan([eff] * E, eff, 0.0, [g] * E)
    if algorithm == "adpalloc":
        sigma0 = sigma0_factor * eff
        if E <= 1:
            k = 1.0
        else:
            k = bisect_parameter(
                lambda k: _replay_epsilon(q, [sigma0 * math.exp(-k * t) for t in range(E)], spe,
                                          spec.delta),
                spec.epsilon, 1e-9, 10.0, decreasing=False)
        sched = AdpAllocSchedule(sigma0, k)
        sig = [adpalloc_sigma(sched, t) for t in range(E)]
        return _Plan(sig, sigma0, 0.0, sig)
    raise ConfigError(f"unknown DPML algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def finetune(algorithm: str, pretrained: ModelParams, train: Dataset, spec: PrivacySpec,
             config: DpSgdConfig, seed: int = 0, test_set: Dataset | None = None,
             public: Dataset | None = None, gep: GepConfig | None = None,
             clip_state: AdpClipState | None = None, sigma_b: float | None = None,
             sigma_b_ratio: float = 4.0, sigma0_factor: float = 1.5,
             callback: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Private fine-tuning of ``pretrained`` on ``train`` with one DPML algorithm.

    Lots are Poisson-sampled with rate ``lot_size / n``.  The noise level is
    calibrated so the RDP accountant meets ``spec``; ``spec.epsilon = inf``
    (or ``config.sigma = 0``) runs the flagged non-private variant.  The
    accountant is audited at the end and a budget overrun raises.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown DPML algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    n = len(train)
    if n == 0:
        raise InputError("empty fine-tuning set")
    if config.lot_size > n:
        raise ConfigError(f"lot_size={config.lot_size} exceeds dataset size {n}")
    if algorithm == "gep" and (public is None or len(public) == 0):
        raise ConfigError("GEP needs a public dataset for its anchor subspace")
    q = config.lot_size / n
    spe = _steps_per_epoch(n, config.lot_size)
    plan = _plan(algorithm, spec, config, q, spe, sigma_b=sigma_b, sigma_b_ratio=sigma_b_ratio,
                 sigma0_factor=sigma0_factor)
    non_private = plan.sigma == 0
    if non_private:
        log.warning("non-private fine-tuning run (sigma = 0)")
    gep = gep or GepConfig()
    clip = AdpClipState(**(vars(clip_state) if clip_state else {"C_t": config.clip_norm}))
    clip.sigma_b = plan.sigma_b

    rng = np.random.default_rng([seed, 10])
    pub_rng = np.random.default_rng([seed, 11])
    accountant = AccountantState(DEFAULT_ORDERS)
    model = pretrained.copy()
    theta = model.flatten()
    velocity = np.zeros_like(theta)
    history = []
    for epoch in range(config.epochs):
        gsig = plan.gradient_sigma[epoch]
        for _ in range(spe):
            idx = np.flatnonzero(rng.random(n) < q)
            x, y = train.features[idx], train.labels[idx]
            G = per_sample_gradients(model, x, y) if len(idx) else np.zeros((0, theta.size))
            if algorithm == "gep":
                pidx = pub_rng.choice(len(public), size=min(gep.public_batch, len(public)),
                                      replace=False)
                P = per_sample_gradients(model, public.features[pidx], public.labels[pidx])
                basis = power_method_basis(P, gep, pub_rng)
                emb, res = gep_project(G, basis) if len(G) else (np.zeros((0, gep.subspace_dim)), G)
                e_sum, _ = _privatized_sum(emb, config.clip_norm, gsig, rng)
                r_sum, _ = _privatized_sum(res, config.clip_norm, gsig, rng)
                total = basis @ e_sum + r_sum
            elif algorithm == "adpclip":
                total, norms = _privatized_sum(G, clip.C_t, gsig, rng)
                clip.C_t = adpclip_update(clip, norms, rng, m=config.lot_size)
            else:
                total, _ = _privatized_sum(G, config.clip_norm, gsig, rng)
            theta, velocity = sgd_update(theta, velocity, total / config.lot_size, config.lr,
                                         config.momentum, 0.0)
            model = model.unflatten(theta)
        if not non_private:
            per = _rdp_vector(q, plan.epoch_sigmas[epoch], accountant.orders)
            accountant.rdp_ledger = accountant.rdp_ledger + spe * per
            accountant.steps += spe
            accountant.sampling_rate = q
        eps = compose_and_convert(accountant, spec.delta)[0] if not non_private else math.inf
        row = {
            "epoch": epoch + 1,
            "train_loss": mean_loss(model, train),
            "test_accuracy": accuracy(model, test_set) if test_set is not None else math.nan,
            "clip_norm": clip.C_t if algorithm == "adpclip" else config.clip_norm,
            "sigma": plan.epoch_sigmas[epoch],
            "epsilon": eps,
        }
        history.append(row)
        if callback is not None:
            callback(row)

    if non_private:
        eps, order = math.inf, None
    else:
        eps, order = compose_and_convert(accountant, spec.delta)
        if eps > spec.epsilon:
            raise BudgetExceededError(f"accountant epsilon {eps:.6f} exceeds target {spec.epsilon}")
    return FinetuneResult(model, algorithm, spec.epsilon, eps, order, plan.sigma, non_private,
                          None if non_private else accountant, spec.delta, history)


def finetune_dpsgd(pretrained, train, spec, config, seed=0, test_set=None, **kw) -> FinetuneResult:
    return finetune("dpsgd", pretrained, train, spec, config, seed, test_set, **kw)


def finetune_adpclip(pretrained, train, spec, config, seed=0, test_set=None, **kw) -> FinetuneResult:
    return finetune("adpclip", pretrained, train, spec, config, seed, test_set, **kw)


def finetune_adpalloc(pretrained, train, spec, config, seed=0, test_set=None, **kw) -> FinetuneResult:
    return finetune("adpalloc", pretrained, train, spec, config, seed, test_set, **kw)


def finetune_gep(pretrained, train, spec, config, public, seed=0, test_set=None,
                 **kw) -> FinetuneResult:
    return finetune("gep", pretrained, train, spec, config, seed, test_set, public=public, **kw)


# ---------------------------------------------------------------- random-round DP-SGD


@dataclass
class RandomRoundConfig:
    """Settings of the random-round single-sample DP-SGD variant.

    ``eps_scaled_noise`` divides the noise variance by ``epsilon^2``, which
    is what ties the noise level to the privacy budget; turning it off gives
    the variance without the budget factor.  ``rounds`` pins R and
    ``noise_scale=0`` switches the noise off (both for testing).
    """

    dataset_size: int
    rho_bound: float
    beta1: float
    delta: float = 1e-5
    epsilon: float = 1.0
    lr: float = 0.01
    eps_scaled_noise: bool = True
    rounds: int | None = None
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be >= 1")
        if self.rho_bound < 0 or self.beta1 < 0:
            raise ConfigError("rho_bound and beta1 must be >= 0")
        if not 0 < self.delta < 1 or not self.epsilon > 0:
            raise ConfigError("need 0 < delta < 1 and epsilon > 0")
        if self.rounds is not None and self.rounds < 0:
            raise ConfigError("rounds must be >= 0")

    @property
    def noise_variance(self) -> float:
        n, d = self.dataset_size, self.delta
        var = 4.0 * self.beta1**2 * self.rho_bound**2 * math.log(3 * n / d) * math.log(2 / d)
        if self.eps_scaled_noise:
            var /= self.epsilon**2
        return var * self.noise_scale**2


def utility_sigma(beta1, rho, dim, n, delta, epsilon) -> float:
    """Noise scale entering the step-size rule of the random-round analysis."""
    return 2.0 * beta1 * rho * math.sqrt(
        1.0 + dim * math.log(3 * n / delta) * math.log(2 / delta) / epsilon**2)


def random_round_step_size(beta_hat: float, D_f: float, sigma: float, n: int) -> float:
    """``min(1/beta_hat, D_f / (sigma n))``; a zero sigma leaves ``1/beta_hat``."""
    if not beta_hat > 0:
        raise ConfigError("beta_hat must be positive")
    if sigma <= 0:
        return 1.0 / beta_hat
    return min(1.0 / beta_hat, D_f / (sigma * n))


def draw_rounds(rng: np.random.Generator, n: int) -> int:
    """R uniform on {1, ..., n^2}."""
    return int(rng.integers(1, n * n + 1))


def _sample_grad_fn(model, dataset):
    if hasattr(dataset, "sample_grad"):
        return dataset.sample_grad
    if isinstance(dataset, Dataset) and isinstance(model, ModelParams):
        sizes = model.sizes

        def grad(theta, i):
            m = ModelParams.from_flat(sizes, theta)
            return loss_and_gradient(m, dataset.features[i : i + 1], dataset.labels[i : i + 1])[1]

        return grad
    raise InputError("dataset must provide sample_grad(theta, i) or be a Dataset")


def random_round_dpsgd(model, dataset, config: RandomRoundConfig, rng: np.random.Generator):
    """Run R single-sample noisy steps ``theta <- theta - lr (grad L_i + z)``.

    R is drawn uniformly from {1, ..., n^2} unless ``config.rounds`` pins
    it.  Returns ``theta_R`` in the type of ``model``.
    """
    grad = _sample_grad_fn(model, dataset)
    n = config.dataset_size
    theta = model.flatten() if isinstance(model, ModelParams) else np.array(model, dtype=np.float64)
    R = draw_rounds(rng, n) if config.rounds is None else config.rounds
    std = math.sqrt(config.noise_variance)
    for _ in range(R):
        i = int(rng.integers(n))
        g = grad(theta, i)
        if std > 0:
            g = g + std * rng.standard_normal(theta.shape)
        theta = theta - config.lr * g
    return model.unflatten(theta) if isinstance(model, ModelParams) else theta
