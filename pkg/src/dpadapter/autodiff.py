"""Minimal reverse-mode autodiff for small feed-forward classifiers.

A :class:`GradTape` records every operation applied to :class:`Tensor`
values in execution order, so a single reverse sweep over the record list
visits each node exactly once.  The module also owns the MLP parameter
container (:class:`ModelParams`) and the per-sample gradient routines that
DP-SGD style optimizers need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, ShapeError, StateError

__all__ = [
    "GradTape",
    "Tensor",
    "ModelParams",
    "init_mlp",
    "forward",
    "predict",
    "cross_entropy_loss",
    "per_sample_cross_entropy",
    "backward",
    "per_sample_gradients",
    "per_sample_output_gradients",
    "loss_and_gradient",
    "relu",
    "matmul",
    "tensor_sum",
    "tensor_mean",
    "square",
]


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


class GradTape:
    """Ordered record of operations.

    ``nodes[i].parents`` only ever holds indices ``< i``; this is guaranteed by
    construction because a node can only reference tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.param_nodes: list[int] = []
        self.layer_io: list[tuple[Tensor, Tensor]] = []
        self.grads: list[np.ndarray | None] | None = None
        self.root: int | None = None

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def watch(self, model: ModelParams) -> list[Tensor]:
        """Register model parameters as leaves, in flatten order."""
        out = []
        for w, b in model.layers:
            tw, tb = self.leaf(w), self.leaf(b)
            self.param_nodes.extend([tw.index, tb.index])
            out.append((tw, tb))
        return out

    def _push(self, value, parents, vjp) -> Tensor:
        idx = len(self.nodes)
        self.nodes.append(_Node(parents, vjp))
        self.values.append(value)
        self.root = idx
        return Tensor(value, tape=self, index=idx)

    def backward(self, root: int | None = None) -> list[np.ndarray | None]:
        """Propagate adjoints from ``root`` (default: last node) to every node."""
        if not self.nodes:
            raise StateError("backward called on an empty tape; run forward first")
        root = self.root if root is None else root
        if self.values[root].size != 1:
            raise StateError(
                f"backward root must be scalar, got shape {self.values[root].shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root] = np.ones_like(self.values[root])
        for i in range(root, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        self.grads = grads
        return grads

    def grad_of(self, t: Tensor) -> np.ndarray:
        if self.grads is None:
            raise StateError("no gradients recorded; call backward first")
        g = self.grads[t.index]
        return np.zeros_like(t.data) if g is None else g


class Tensor:
    """Dense float64 array optionally attached to a tape."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: GradTape | None = None, index: int | None = None):
        self.data = np.require(data, dtype=np.float64, requirements="C")
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> list[int]:
        return list(self.data.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.tape is not None


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _common_tape(*xs) -> GradTape | None:
    tapes = {id(x.tape): x.tape for x in xs if _tracked(x)}
    if len(tapes) > 1:
        raise StateError("operands recorded on different tapes")
    return next(iter(tapes.values()), None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _apply(value, inputs, partials: Callable[[np.ndarray], tuple]) -> Tensor:
    """Record ``value`` with vjp ``partials`` on the inputs' tape, if any."""
    tape = _common_tape(*inputs)
    if tape is None:
        return Tensor(value)
    tracked = [i for i, x in enumerate(inputs) if _tracked(x)]
    parents = tuple(inputs[i].index for i in tracked)

    def vjp(g):
        full = partials(g)
        return tuple(full[i] for i in tracked)

    return tape._push(value, parents, vjp)


def add(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    return _apply(
        av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def mul(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    return _apply(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not chain")
    return _apply(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a) -> Tensor:
    av = _raw(a)
    mask = av > 0
    return _apply(np.maximum(av, 0.0), (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    av = _raw(a)
    return _apply(av * av, (a,), lambda g: (2.0 * g * av,))


def tensor_sum(a) -> Tensor:
    av = _raw(a)
    return _apply(np.sum(av), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def tensor_mean(a) -> Tensor:
    av = _raw(a)
    n = av.size
    return _apply(
        np.sum(av) / n, (a,), lambda g: (np.broadcast_to(g / n, av.shape).copy(),)
    )


def _check_labels(labels, n, k) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integer class indices")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    return y


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))


def per_sample_cross_entropy(logits, labels) -> Tensor:
    """Vector of ``-log softmax(logits)[i, y_i]`` with log-sum-exp stabilization."""
    z = _raw(logits)
    if z.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {z.shape}")
    n, k = z.shape
    y = _check_labels(labels, n, k)
    logp = _log_softmax(z)
    rows = np.arange(n)
    losses = -logp[rows, y]

    def partials(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * g[:, None],)

    return _apply(losses, (logits,), partials)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits`` [n, k]."""
    return tensor_mean(per_sample_cross_entropy(logits, labels))


def backward(target) -> np.ndarray:
    """Gradient of a recorded scalar w.r.t. the watched model parameters.

    ``target`` is either the scalar :class:`Tensor` or its :class:`GradTape`
    (in which case the most recent node is the root).
    """
    if isinstance(target, Tensor):
        if target.tape is None:
            raise StateError("tensor is not attached to a tape")
        tape, root = target.tape, target.index
    elif isinstance(target, GradTape):
        tape, root = target, None
    else:
        raise StateError(f"cannot run backward on {type(target).__name__}")
    tape.backward(root)
    parts = []
    for idx in tape.param_nodes:
        g = tape.grads[idx]
        parts.append(np.zeros(tape.values[idx].size) if g is None else g.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


@dataclass
class ModelParams:
    """Affine layers ``(W [in, out], b [out])`` of an MLP with ReLU between them."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        layers = []
        for i, (w, b) in enumerate(self.layers):
            w = np.ascontiguousarray(w, dtype=np.float64)
            b = np.ascontiguousarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"weight {w.shape} / bias {b.shape} mismatch", layer=i)
            if i and w.shape[0] != layers[-1][0].shape[1]:
                raise ShapeError(
                    f"input width {w.shape[0]} != previous output {layers[-1][0].shape[1]}",
                    layer=i,
                )
            layers.append((w, b))
        self.layers = layers

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def dim(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for w, b in self.layers for p in (w, b)])

    def unflatten(self, vec) -> ModelParams:
        return ModelParams.from_flat(self.sizes, vec)

    @classmethod
    def from_flat(cls, sizes: Sequence[int], vec) -> ModelParams:
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        if vec.shape != (expected,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({expected},)")
        layers, pos = [], 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            w = vec[pos : pos + a * b].reshape(a, b).copy()
            pos += a * b
            layers.append((w, vec[pos : pos + b].copy()))
            pos += b
        return cls(layers)

    def copy(self) -> ModelParams:
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])


def init_mlp(sizes: Sequence[int], seed: int) -> ModelParams:
    """He-normal weights, zero biases."""
    if len(sizes) < 2:
        raise ShapeError("an MLP needs at least an input and an output width")
    rng = np.random.default_rng(seed)
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append((rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)), np.zeros(b)))
    return ModelParams(layers)


def _check_batch(model: ModelParams, x: np.ndarray):
    if x.ndim != 2:
        raise ShapeError(f"batch must be [n, input_dim], got shape {x.shape}", layer=0)
    if x.shape[1] != model.layers[0][0].shape[0]:
        raise ShapeError(
            f"batch width {x.shape[1]} != input width {model.layers[0][0].shape[0]}",
            layer=0,
        )


def forward(model: ModelParams, batch) -> Tensor:
    """Logits ``[n, num_classes]`` recorded on a fresh tape (``logits.tape``)."""
    x = _raw(batch)
    _check_batch(model, x)
    tape = GradTape()
    params = tape.watch(model)
    h = Tensor(x)
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        z = add(matmul(h, w), b)
        tape.layer_io.append((h, z))
        h = z if i == last else relu(z)
    return h


def predict(model: ModelParams, x) -> np.ndarray:
    """Untaped forward pass; bit-identical to :func:`forward`."""
    h = np.asarray(x, dtype=np.float64)
    _check_batch(model, h)
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def loss_and_gradient(model: ModelParams, x, labels) -> tuple[float, np.ndarray]:
    loss = cross_entropy_loss(forward(model, x), labels)
    return float(loss.data), backward(loss)


def per_sample_gradients(model: ModelParams, batch, labels, method: str = "vectorized") -> np.ndarray:
    """Per-example loss gradients as an ``[n, model.dim]`` array.

    ``method="replay"`` re-runs forward/backward for each example on its own
    tape.  ``method="vectorized"`` runs one tape over the summed loss and
    rebuilds each example's weight gradient from the layer inputs and the
    per-row adjoints of the pre-activations (rows are independent in an MLP).
    """
    x = _raw(batch)
    n = x.shape[0] if x.ndim == 2 else 0
    if n == 0:
        raise InputError("per-sample gradients need a nonempty batch")
    labels = np.asarray(labels)
    if method == "replay":
        out = np.empty((n, model.dim))
        for i in range(n):
            out[i] = loss_and_gradient(model, x[i : i + 1], labels[i : i + 1])[1]
        return out
    if method != "vectorized":
        raise InputError(f"unknown per-sample method {method!r}")
    logits = forward(model, x)
    return _row_param_grads(logits, tensor_sum(per_sample_cross_entropy(logits, labels)))


def per_sample_output_gradients(model: ModelParams, batch, weights) -> np.ndarray:
    """Gradient of ``sum_j weights[i, j] * logits[i, j]`` w.r.t. parameters, per row ``i``."""
    x = _raw(batch)
    weights = np.asarray(weights, dtype=np.float64)
    logits = forward(model, x)
    if weights.shape != logits.data.shape:
        raise ShapeError(f"weights {weights.shape} do not match logits {logits.data.shape}")
    return _row_param_grads(logits, tensor_sum(mul(logits, weights)))


def _row_param_grads(logits: Tensor, root: Tensor) -> np.ndarray:
    tape = logits.tape
    n = logits.data.shape[0]
    backward(root)
    parts = []
    for h, z in tape.layer_io:
        gz = tape.grad_of(z)
        parts.append((h.data[:, :, None] * gz[:, None, :]).reshape(n, -1))
        parts.append(gz)
    return np.concatenate(parts, axis=1)
