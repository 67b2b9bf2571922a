"""Gaussian mechanism calibration and RDP accounting for subsampled Gaussians."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import CalibrationError, ConfigError, DomainError

DEFAULT_DELTA = 1e-5
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
SIGMA_BRACKET = (1e-2, 1e3)


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")


def gaussian_sigma(epsilon: float, delta: float = DEFAULT_DELTA) -> float:
    """Noise multiplier of the classical Gaussian mechanism, sqrt(2 ln(1.25/delta))/epsilon."""
    if isinstance(epsilon, PrivacySpec):
        epsilon, delta = epsilon.epsilon, epsilon.delta
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1.25:
        raise DomainError(f"delta={delta} outside (0, 1.25): ln(1.25/delta) must be positive")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP at integer order ``alpha`` of the Poisson-subsampled Gaussian mechanism.

    Uses the binomial expansion
    ``A = sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 sigma^2))``
    summed in log space; the result is ``log(A) / (alpha - 1)``.
    """
    if isinstance(alpha, float) and not alpha.is_integer():
        raise DomainError(f"only integer orders are supported, got {alpha}")
    alpha = int(alpha)
    if alpha < 2:
        raise DomainError(f"unsupported RDP order {alpha}; need alpha >= 2")
    if not 0 < q <= 1:
        raise DomainError(f"sampling rate must lie in (0, 1], got {q}")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2.0 * sigma**2)
    log_a = float(logsumexp(terms))
    return log_a / (alpha - 1)


@dataclass
class AccountantState:
    """Running RDP ledger over a fixed order grid."""

    orders: tuple[int, ...] = DEFAULT_ORDERS
    rdp_ledger: np.ndarray = field(default=None)
    sampling_rate: float = 0.0
    steps: int = 0

    def __post_init__(self):
        self.orders = tuple(int(a) for a in self.orders)
        if self.rdp_ledger is None:
            self.rdp_ledger = np.zeros(len(self.orders))

    def accumulate(self, q: float, sigma: float, steps: int = 1) -> AccountantState:
        """Add ``steps`` compositions of the subsampled Gaussian (q, sigma)."""
        if steps < 0:
            raise ConfigError("steps must be nonnegative")
        if steps:
            per = np.array([rdp_subsampled_gaussian(q, sigma, a) for a in self.orders])
            self.rdp_ledger = self.rdp_ledger + steps * per
            self.steps += steps
            self.sampling_rate = q
        return self

    def copy(self) -> AccountantState:
        return AccountantState(self.orders, self.rdp_ledger.copy(), self.sampling_rate, self.steps)


def compose_and_convert(state: AccountantState, delta: float = DEFAULT_DELTA) -> tuple[float, int]:
    """Tightest ``(epsilon, order)`` over the grid: min_a rdp(a) + ln(1/delta)/(a-1)."""
    if not state.orders:
        raise ConfigError("accountant has an empty order list")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(state.orders, dtype=np.float64)
    eps = state.rdp_ledger + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), state.orders[best]


def epsilon_for(
    q: float, sigma: float, steps: int, delta: float = DEFAULT_DELTA, orders=DEFAULT_ORDERS
) -> float:
    return compose_and_convert(AccountantState(orders).accumulate(q, sigma, steps), delta)[0]


def bisect_parameter(
    eps_of: Callable[[float], float],
    target: float,
    lo: float,
    hi: float,
    *,
    decreasing: bool = True,
    rel_tol: float = 1e-7,
) -> float:
    """Find the boundary parameter where ``eps_of`` crosses ``target`` on [lo, hi].

    With ``decreasing=True`` (epsilon falls as the parameter grows, as for a
    noise multiplier) the smallest feasible value is returned; otherwise the
    largest feasible value.  The returned value always satisfies the target.
    """
    if decreasing:
        if eps_of(hi) > target:
            raise CalibrationError(f"target epsilon {target} unreachable within [{lo}, {hi}]")
        if eps_of(lo) <= target:
            return lo
    else:
        if eps_of(lo) > target:
            raise CalibrationError(f"target epsilon {target} unreachable within [{lo}, {hi}]")
        if eps_of(hi) <= target:
            return hi
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        feasible = eps_of(mid) <= target
        if feasible == decreasing:
            hi = mid
        else:
            lo = mid
    return hi if decreasing else lo


def calibrate_sigma(
    spec: PrivacySpec,
    q: float,
    steps: int,
    orders: Sequence[int] = DEFAULT_ORDERS,
    bracket: tuple[float, float] = SIGMA_BRACKET,
) -> float:
    """Smallest noise multiplier in ``bracket`` whose accountant epsilon meets ``spec``."""
    if steps == 0:
        return bracket[0]
    return bisect_parameter(
        lambda s: epsilon_for(q, s, steps, spec.delta, orders), spec.epsilon, *bracket
    )


def format_report(state: AccountantState, delta: float = DEFAULT_DELTA) -> str:
    eps, order = compose_and_convert(state, delta)
    lines = [
        "[accountant]",
        f"steps = {state.steps}",
        f"sampling_rate = {state.sampling_rate:.6g}",
        f"delta = {delta:.6g}",
        f"epsilon = {eps:.6f}",
        f"order = {order}",
        "ledger:",
    ]
    lines += [f"  alpha={a:<4d} rdp={r:.6e}" for a, r in zip(state.orders, state.rdp_ledger)]
    return "\n".join(lines) + "\n"
