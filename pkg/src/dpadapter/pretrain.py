"""Pre-training: standard SGD, vanilla SAM (shared batch) and DPAdapter.

DPAdapter estimates the worst-case weight perturbation on a large batch B1
and takes the descent step on a separate, smaller batch B2 evaluated at the
perturbed weights.  The perturbed weights are only ever a temporary: the
update is applied to a saved copy of the unperturbed weights, so "perturb,
step, revert" is exact in floating point.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ModelParams, loss_and_gradient, predict
from .data import Dataset
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

Batch = tuple[np.ndarray, np.ndarray]
Objective = Callable[[np.ndarray, Batch], tuple[float, np.ndarray]]


@dataclass
class PretrainConfig:
    m1: int = 320
    m2: int = 32
    eta1: float = 1.0
    eta2: float = 0.05
    gamma: float = 2.0
    K: int = 3000
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    inner_steps: int = 1
    shared_batch: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.m1 < 1 or self.m2 < 1:
            raise ConfigError("batch sizes m1 and m2 must be >= 1")
        if self.K < 0 or self.warmup_epochs < 0:
            raise ConfigError("K and warmup_epochs must be nonnegative")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.shared_batch and self.m1 != self.m2:
            raise ConfigError("shared_batch requires m1 == m2")
        if any(not 0 < m < 1 for m in self.lr_milestones):
            raise ConfigError("lr milestones are fractions of K in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


@dataclass
class NormBall:
    center: np.ndarray
    radius: float

    def contains(self, theta) -> bool:
        return float(np.linalg.norm(_flat(theta) - _flat(self.center))) <= self.radius


def _flat(x) -> np.ndarray:
    return x.flatten() if isinstance(x, ModelParams) else np.asarray(x, dtype=np.float64)


def _like(template, vec):
    return template.unflatten(vec) if isinstance(template, ModelParams) else vec


def cross_entropy_objective(sizes) -> Objective:
    sizes = list(sizes)

    def objective(theta, batch):
        return loss_and_gradient(ModelParams.from_flat(sizes, theta), *batch)

    return objective


def _objective_for(model, objective):
    if objective is not None:
        return objective
    if not isinstance(model, ModelParams):
        raise InputError("a flat parameter vector needs an explicit objective")
    return cross_entropy_objective(model.sizes)


def _check_batch(batch: Batch):
    if len(batch[1]) == 0:
        raise InputError("empty batch")


def project_to_ball(delta: np.ndarray, gamma: float) -> np.ndarray:
    """Rescale ``delta`` onto the gamma-ball if it lies outside; zero stays zero."""
    norm = float(np.linalg.norm(delta))
    if norm > gamma:
        return delta * (gamma / norm)
    return delta


def worst_case_perturbation(model, batch_b1: Batch, eta1: float, gamma: float,
                            objective: Objective | None = None, inner_steps: int = 1) -> np.ndarray:
    """Ascent perturbation ``eta1 * grad L_B1(theta)`` projected into the gamma-ball."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    _check_batch(batch_b1)
    objective = _objective_for(model, objective)
    theta = _flat(model)
    delta = np.zeros_like(theta)
    for _ in range(inner_steps):
        _, g = objective(theta + delta, batch_b1)
        delta = project_to_ball(delta + eta1 * g, gamma)
    return delta


def sgd_update(theta, velocity, grad, lr, momentum, weight_decay):
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""
    if weight_decay:
        grad = grad + weight_decay * theta
    velocity = momentum * velocity + grad if momentum else grad
    return theta - lr * velocity, velocity


def _dpadapter_update(theta, velocity, b1, b2, config, lr, objective):
    if config.gamma > 0 and config.eta1 != 0:
        delta = worst_case_perturbation(theta, b1, config.eta1, config.gamma, objective,
                                        config.inner_steps)
    else:
        delta = np.zeros_like(theta)
    _, g = objective(theta + delta, b2)
    return sgd_update(theta, velocity, g, lr, config.momentum, config.weight_decay)


def dpadapter_step(model, batch_b1: Batch, batch_b2: Batch, config: PretrainConfig,
                   velocity: np.ndarray | None = None, objective: Objective | None = None,
                   lr: float | None = None):
    """One perturb / descend / revert iteration.

    Returns the updated parameters (same type as ``model``) and the new
    momentum buffer.
    """
    _check_batch(batch_b1)
    _check_batch(batch_b2)
    objective = _objective_for(model, objective)
    theta = _flat(model)
    velocity = np.zeros_like(theta) if velocity is None else velocity
    lr = config.eta2 if lr is None else lr
    new, velocity = _dpadapter_update(theta, velocity, batch_b1, batch_b2, config, lr, objective)
    return _like(model, new), velocity


def learning_rate(config: PretrainConfig, k: int) -> float:
    lr = config.eta2
    for m in config.lr_milestones:
        if k >= int(m * config.K):
            lr *= config.lr_decay
    return lr


def mean_loss(model: ModelParams, dataset: Dataset) -> float:
    from .autodiff import cross_entropy_loss

    return float(cross_entropy_loss(predict(model, dataset.features), dataset.labels).data)


def warmup(model: ModelParams, dataset: Dataset, config: PretrainConfig, seed: int = 0,
           rng: np.random.Generator | None = None) -> ModelParams:
    """``warmup_epochs`` epochs of shuffled mini-batch SGD (batch m2, lr eta2)."""
    if config.warmup_epochs == 0 or config.eta2 == 0:
        return model
    rng = np.random.default_rng([seed, 1]) if rng is None else rng
    objective = cross_entropy_objective(model.sizes)
    theta = model.flatten()
    velocity = np.zeros_like(theta)
    n = len(dataset)
    for _ in range(config.warmup_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.m2):
            idx = order[start : start + config.m2]
            _, g = objective(theta, (dataset.features[idx], dataset.labels[idx]))
            theta, velocity = sgd_update(theta, velocity, g, config.eta2, config.momentum,
                                         config.weight_decay)
    return model.unflatten(theta)


def draw_batch(rng: np.random.Generator, dataset: Dataset, m: int) -> Batch:
    n = len(dataset)
    idx = rng.choice(n, size=m, replace=m > n)
    return dataset.features[idx], dataset.labels[idx]


def _warn_if_oversized(config: PretrainConfig, n: int):
    for name in ("m1", "m2"):
        if getattr(config, name) > n:
            msg = f"{name}={getattr(config, name)} exceeds dataset size {n}; sampling with replacement"
            log.warning(msg)
            warnings.warn(msg, stacklevel=3)


def _train(dataset: Dataset, config: PretrainConfig, seed: int, init: ModelParams,
           perturb: bool, shared: bool, callback=None) -> ModelParams:
    _warn_if_oversized(config, len(dataset))
    model = warmup(init, dataset, config, seed)
    objective = cross_entropy_objective(model.sizes)
    theta = model.flatten()
    velocity = np.zeros_like(theta)
    # Independent streams keep the B2 sequence identical across methods.
    rng_b2 = np.random.default_rng([seed, 2])
    rng_b1 = np.random.default_rng([seed, 3])
    for k in range(config.K):
        lr = learning_rate(config, k)
        b2 = draw_batch(rng_b2, dataset, config.m2)
        if not perturb:
            _, g = objective(theta, b2)
            theta, velocity = sgd_update(theta, velocity, g, lr, config.momentum,
                                         config.weight_decay)
        else:
            b1 = b2 if shared else draw_batch(rng_b1, dataset, config.m1)
            theta, velocity = _dpadapter_update(theta, velocity, b1, b2, config, lr, objective)
        if callback is not None:
            callback(k, theta)
    return model.unflatten(theta)


def train_standard(dataset: Dataset, config: PretrainConfig, seed: int, init: ModelParams,
                   callback=None) -> ModelParams:
    return _train(dataset, config, seed, init, perturb=False, shared=False, callback=callback)


def train_dpadapter(dataset: Dataset, config: PretrainConfig, seed: int, init: ModelParams,
                    callback=None) -> ModelParams:
    """Warmup, then K iterations with fresh B1 (size m1) and B2 (size m2).

    With ``config.shared_batch`` the perturbation reuses B2, which is
    vanilla SAM/AMP.
    """
    return _train(dataset, config, seed, init, perturb=True, shared=config.shared_batch,
                  callback=callback)


def train_vanilla_sam(dataset: Dataset, config: PretrainConfig, seed: int, init: ModelParams,
                      callback=None) -> ModelParams:
    """Same loop as DPAdapter with B1 = B2 every iteration (m1 forced to m2)."""
    from dataclasses import replace

    cfg = replace(config, m1=config.m2, shared_batch=True)
    return _train(dataset, cfg, seed, init, perturb=True, shared=True, callback=callback)
