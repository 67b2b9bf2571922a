"""Desk-scale datasets and the public/private transfer split."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

IID_SPLIT = "iid-split"
SHIFTED = "shifted-distribution"
RELATIONS = (IID_SPLIT, SHIFTED)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.name}: features {self.features.shape} do not match labels {self.labels.shape}"
            )

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name=None) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.mean, self.std)


@dataclass
class TransferTask:
    upstream: Dataset
    upstream_test: Dataset
    downstream_train: Dataset
    downstream_test: Dataset
    relation: str
    num_classes: int


def normalization_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _make(raw, labels, name, stats) -> Dataset:
    mean, std = stats
    return Dataset((raw - mean) / std, labels, name, mean, std)


def make_synthetic_transfer(
    seed: int,
    mode: str = IID_SPLIT,
    n_up: int = 1800,
    n_down: int = 200,
    d_in: int = 16,
    k: int = 4,
    *,
    separation: float = 3.0,
    shift: float = 0.0,
    cov_scale: float = 0.1,
    n_up_test: int | None = None,
    n_down_test: int | None = None,
) -> TransferTask:
    """Gaussian-mixture transfer task.

    Class means sit ``separation`` noise-stds from the origin along mutually
    orthogonal random directions.  All samples come from one pool of noise
    draws; in shifted mode the downstream portion uses means offset by
    ``shift`` along fixed random unit directions and noise scaled by
    ``1 + cov_scale * shift``, so ``shift=0`` reproduces the iid split exactly.

    Every split is normalized with statistics of the upstream (public)
    training split only.
    """
    if k < 2:
        raise InputError(f"need at least 2 classes, got k={k}")
    if mode not in RELATIONS:
        raise InputError(f"unknown relation {mode!r}; expected one of {RELATIONS}")
    if n_up < 10 * k or n_down < 10 * k:
        raise InputError(f"n_up and n_down must be >= 10*k = {10 * k}")
    if d_in < k:
        raise InputError(f"d_in={d_in} must be >= k={k} for orthogonal class means")
    if shift < 0:
        raise InputError("shift magnitude must be nonnegative")
    n_up_test = n_up // 4 if n_up_test is None else n_up_test
    n_down_test = max(n_down, 10 * k) if n_down_test is None else n_down_test

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(d_in, d_in)))
    means = separation * basis[:, :k].T
    offsets = rng.normal(size=(k, d_in))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)

    sizes = [n_up, n_up_test, n_down, n_down_test]
    total = sum(sizes)
    labels = rng.permutation(np.arange(total) % k)
    noise = rng.normal(size=(total, d_in))

    bounds = np.cumsum([0] + sizes)
    up = slice(bounds[0], bounds[2])
    down = slice(bounds[2], bounds[4])
    raw = np.empty((total, d_in))
    raw[up] = means[labels[up]] + noise[up]
    if mode == SHIFTED:
        shifted = means + shift * offsets
        raw[down] = shifted[labels[down]] + (1.0 + cov_scale * shift) * noise[down]
    else:
        raw[down] = means[labels[down]] + noise[down]

    parts = [slice(bounds[i], bounds[i + 1]) for i in range(4)]
    stats = normalization_stats(raw[parts[0]])
    names = ["upstream", "upstream_test", "downstream_train", "downstream_test"]
    ds = [_make(raw[p], labels[p], f"synthetic-{seed}-{nm}", stats) for p, nm in zip(parts, names)]
    return TransferTask(*ds, relation=mode, num_classes=k)


def _read_idx(blob: bytes, magic: int, ndims: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(blob) < 4:
        raise FormatError(f"{what}: file too short for IDX magic number", offset=len(blob))
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(
            f"{what}: bad magic number 0x{got:08x}, expected magic 0x{magic:08x}", offset=0
        )
    header = 4 + 4 * ndims
    if len(blob) < header:
        raise FormatError(f"{what}: truncated dimension header", offset=len(blob))
    dims = struct.unpack(">" + "I" * ndims, blob[4:header])
    count = int(np.prod(dims))
    if len(blob) < header + count:
        raise FormatError(
            f"{what}: truncated payload, expected {count} bytes after header", offset=len(blob)
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header)
    return dims, data


def _sibling_labels(path: Path) -> Path:
    name = path.name.replace("images", "labels").replace("idx3", "idx1")
    if name == path.name:
        raise InputError(f"cannot infer labels file for {path}; pass labels_path")
    return path.with_name(name)


def load_idx_dataset(path, labels_path=None, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair (MNIST layout).

    Pixels are scaled to [0, 1], flattened and normalized with this file's
    own per-feature mean and std.
    """
    path = Path(path)
    labels_path = Path(labels_path) if labels_path is not None else _sibling_labels(path)
    dims, pixels = _read_idx(path.read_bytes(), IDX_IMAGES_MAGIC, 3, str(path))
    (n_labels,), labels = _read_idx(labels_path.read_bytes(), IDX_LABELS_MAGIC, 1, str(labels_path))
    n = dims[0]
    if n_labels != n:
        raise FormatError(f"{n} images but {n_labels} labels", offset=4)
    x = pixels.reshape(n, dims[1] * dims[2]).astype(np.float64) / 255.0
    return _make(x, labels.astype(np.int64), name or path.stem, normalization_stats(x))


def write_idx(path, images: np.ndarray | None = None, labels: np.ndarray | None = None) -> None:
    """Write a uint8 image stack [n, rows, cols] or label vector as IDX."""
    if (images is None) == (labels is None):
        raise InputError("pass exactly one of images or labels")
    arr = np.asarray(images if images is not None else labels, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if images is not None else IDX_LABELS_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())
