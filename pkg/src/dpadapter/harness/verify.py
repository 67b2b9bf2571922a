"""Theory checks run by ``verify-theory``: convergence and utility trends plus
statistical checks of the random-round sampler."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from ..finetune import RandomRoundConfig, draw_rounds, random_round_dpsgd
from ..theory import (
    SyntheticObjective,
    paired_fraction,
    rescaled_linear_family,
    run_decoupled_sam_sweep,
    run_rho_utility_sweep,
    write_sweep_csv,
)

PAIRED_THRESHOLD = 0.8
BOUND_SLACK = 1.10


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def check_decoupled_sam(n_seeds: int = 20, T: int = 2000, out_dir=None) -> list[Check]:
    obj = SyntheticObjective.quadratic(n=64, d=8, seed=0)
    b1_sizes = [1, 8, len(obj)]
    rows = run_decoupled_sam_sweep(obj, b1_sizes, 4, T, range(n_seeds), burn_in=0.5)
    if out_dir is not None:
        write_sweep_csv(rows, Path(out_dir) / "theory_decoupled_sam.csv")
    means = [r.mean for r in rows]
    frac = min(paired_fraction(b.per_seed, a.per_seed) for a, b in zip(rows, rows[1:]))
    trend = all(b < a for a, b in zip(means, means[1:])) and frac >= PAIRED_THRESHOLD
    within = [r.mean <= BOUND_SLACK * r.bound for r in rows]
    return [
        Check("decoupled-SAM: larger B1 lowers suboptimality", trend,
              f"means {[f'{m:.5f}' for m in means]} for B1={b1_sizes}, paired fraction {frac:.2f}"),
        Check("decoupled-SAM: floor under the analytic bound", all(within),
              "; ".join(f"B1={int(r.value)}: {r.mean:.5f} <= {BOUND_SLACK:.2f}*{r.bound:.5f}"
                        for r in rows)),
    ]


def check_rho_utility(n_seeds: int = 20, epsilon: float = 4.0, out_dir=None) -> list[Check]:
    family = rescaled_linear_family([0.5, 1.0, 2.0], n=100)
    lo = run_rho_utility_sweep(family, epsilon, range(n_seeds))
    hi = run_rho_utility_sweep(family, 2 * epsilon, range(n_seeds))
    if out_dir is not None:
        write_sweep_csv(lo + hi, Path(out_dir) / "theory_rho_utility.csv")
    rho_frac = min(paired_fraction(a.per_seed, b.per_seed) for rows in (lo, hi)
                   for a, b in zip(rows, rows[1:]))
    rho_trend = all(a.mean < b.mean for rows in (lo, hi) for a, b in zip(rows, rows[1:]))
    eps_frac = min(paired_fraction(b.per_seed, a.per_seed) for a, b in zip(lo, hi))
    eps_trend = all(b.mean < a.mean for a, b in zip(lo, hi))
    return [
        Check("random-round DP-SGD: suboptimality rises with rho",
              rho_trend and rho_frac >= PAIRED_THRESHOLD,
              f"eps={epsilon:g}: {[f'{r.mean:.4f}' for r in lo]}, eps={2 * epsilon:g}: "
              f"{[f'{r.mean:.4f}' for r in hi]} for rho={[r.value for r in lo]}, "
              f"paired fraction {rho_frac:.2f}"),
        Check("random-round DP-SGD: suboptimality falls as epsilon doubles",
              eps_trend and eps_frac >= PAIRED_THRESHOLD, f"paired fraction {eps_frac:.2f}"),
    ]


def check_round_distribution(n: int = 4, draws: int = 100_000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    counts = np.bincount([draw_rounds(rng, n) for _ in range(draws)], minlength=n * n + 1)[1:]
    p = float(chisquare(counts).pvalue)
    return Check("round count uniform on {1..n^2}", p > 0.01 and counts.size == n * n,
                 f"chi-square p={p:.3f} over {draws} draws, n={n}")


class _ZeroGrad:
    def __init__(self, d):
        self.d = d

    def sample_grad(self, theta, i):
        return np.zeros(self.d)


def check_noise_variance(dim: int = 100_000, seed: int = 0) -> Check:
    """One pinned round from zero with a zero gradient: theta_1 = -lr * z."""
    cfg = RandomRoundConfig(dataset_size=50, rho_bound=0.7, beta1=1.3, delta=1e-5, epsilon=2.0,
                            lr=1.0, eps_scaled_noise=False, rounds=1)
    theta = random_round_dpsgd(np.zeros(dim), _ZeroGrad(dim), cfg, np.random.default_rng(seed))
    emp = float(np.var(theta))
    rel = abs(emp / cfg.noise_variance - 1.0)
    return Check("random-round noise variance matches the formula", rel <= 0.02,
                 f"empirical {emp:.4f} vs {cfg.noise_variance:.4f} (rel {rel:.4f})")


def verify_theory(n_seeds: int = 20, out_dir=None) -> list[Check]:
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    checks = check_decoupled_sam(n_seeds, out_dir=out_dir)
    checks += check_rho_utility(n_seeds, out_dir=out_dir)
    checks += [check_round_distribution(), check_noise_variance()]
    return checks
