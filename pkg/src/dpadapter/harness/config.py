"""Experiment configuration: a versioned YAML mapping validated against a fixed schema.

Every key is optional except ``format_version``; missing keys take the
defaults below.  Unknown keys and ill-typed values are rejected with the
dotted path of the offending entry.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import yaml

from ..errors import SchemaError

FORMAT_VERSION = 1

PRETRAIN_METHODS = ("scratch", "standard", "vanilla_sam", "dpadapter")
DPML_ALGORITHMS = ("dpsgd", "adpclip", "adpalloc", "gep")

# section -> key -> (type, default); type is a python type, a tuple of
# allowed string values, or ("list", item_type).
SCHEMA: dict = {
    "name": (str, "experiment"),
    "output_dir": (str, "runs/experiment"),
    "seeds": (("list", int), [0, 1, 2, 3, 4]),
    "workers": (int, 1),
    "task": {
        "kind": (("synthetic", "idx"), "synthetic"),
        "relation": (("iid-split", "shifted-distribution"), "iid-split"),
        "n_up": (int, 1800),
        "n_down": (int, 200),
        "d_in": (int, 16),
        "k": (int, 4),
        "separation": (float, 3.0),
        "shift": (float, 0.0),
        "cov_scale": (float, 0.1),
        "upstream": ((str, None), None),
        "upstream_test": ((str, None), None),
        "downstream": ((str, None), None),
        "downstream_test": ((str, None), None),
    },
    "model": {"hidden": (("list", int), [64])},
    "pretrain": {
        "m1": (int, 320),
        "m2": (int, 32),
        "eta1": (float, 1000.0),
        "eta2": (float, 0.05),
        "gamma": (float, 5.0),
        "K": (int, 2800),
        "warmup_epochs": (int, 5),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "lr_milestones": (("list", float), [0.5, 0.75]),
        "lr_decay": (float, 0.1),
    },
    "finetune": {
        "clip_norm": (float, 4.0),
        "lot_size": (int, 32),
        "epochs": (int, 20),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "sigma_b_ratio": (float, 4.0),
        "sigma0_factor": (float, 1.5),
    },
    "adpclip": {"eta_C": (float, 0.2), "target_quantile": (float, 0.5)},
    "gep": {"subspace_dim": (int, 8), "power_iters": (int, 2), "public_batch": (int, 128)},
    "privacy": {"epsilons": (("list", float), [1.0, 4.0]), "delta": (float, 1e-5)},
    "robustness": {"noise_std": (float, 0.3), "trials": (int, 10)},
    "grid": {
        "pretrain_methods": (("list", PRETRAIN_METHODS), list(PRETRAIN_METHODS)),
        "algorithms": (("list", DPML_ALGORITHMS), list(DPML_ALGORITHMS)),
    },
    "gamma_sweep": {
        "gammas": (("list", float), [0.0, 2.0, 5.0, 10.0, 20.0]),
        "algorithm": (DPML_ALGORITHMS, "dpsgd"),
        "epsilon": (float, 1.0),
    },
}

# keys that do not change any produced number
NON_SEMANTIC = ("output_dir", "workers")


def _type_name(t) -> str:
    if isinstance(t, tuple) and t and t[0] == "list":
        return f"list of {_type_name(t[1])}"
    if isinstance(t, tuple):
        return " or ".join("null" if x is None else (x.__name__ if isinstance(x, type) else repr(x))
                           for x in t)
    return t.__name__


def _check_value(value, t, path):
    if isinstance(t, tuple) and t and t[0] == "list":
        if not isinstance(value, list):
            raise SchemaError(f"{path}: expected a list, got {type(value).__name__}")
        return [_check_value(v, t[1], f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(t, tuple):
        for option in t:
            if option is None and value is None:
                return None
            if isinstance(option, type):
                try:
                    return _check_value(value, option, path)
                except SchemaError:
                    continue
            elif value == option:
                return value
        raise SchemaError(f"{path}: {value!r} is not one of {_type_name(t)}")
    if t is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{path}: expected a number, got {value!r}")
        value = float(value)
        if math.isnan(value):
            raise SchemaError(f"{path}: NaN is not allowed")
        return value
    if t is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{path}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, t):
        raise SchemaError(f"{path}: expected {t.__name__}, got {type(value).__name__}")
    return value


def _validate(raw, schema, prefix="") -> dict:
    if not isinstance(raw, dict):
        raise SchemaError(f"{prefix or '<root>'}: expected a mapping, got {type(raw).__name__}")
    out = {}
    for key in raw:
        if key not in schema:
            path = f"{prefix}{key}"
            raise SchemaError(f"{path}: unknown key (allowed: {', '.join(sorted(schema))})")
    for key, spec in schema.items():
        path = f"{prefix}{key}"
        if isinstance(spec, dict):
            out[key] = _validate(raw.get(key, {}) or {}, spec, path + ".")
        elif key in raw:
            out[key] = _check_value(raw[key], spec[0], path)
        else:
            out[key] = copy.deepcopy(spec[1])
    return out


def _semantic_checks(cfg):
    if not cfg["seeds"]:
        raise SchemaError("seeds: need at least one seed")
    if cfg["workers"] < 1:
        raise SchemaError("workers: must be >= 1")
    for path, v in (("privacy.delta", cfg["privacy"]["delta"]),):
        if not 0 < v < 1:
            raise SchemaError(f"{path}: must lie in (0, 1)")
    for i, e in enumerate(cfg["privacy"]["epsilons"]):
        if not e > 0:
            raise SchemaError(f"privacy.epsilons[{i}]: must be positive (use .inf for non-private)")
    if cfg["task"]["kind"] == "idx":
        for key in ("upstream", "upstream_test", "downstream", "downstream_test"):
            if not cfg["task"][key]:
                raise SchemaError(f"task.{key}: required when task.kind is idx")
    if not cfg["model"]["hidden"] or any(h < 1 for h in cfg["model"]["hidden"]):
        raise SchemaError("model.hidden: need one or more positive layer widths")


def validate_config(raw: dict) -> dict:
    """Validate a parsed config mapping and fill defaults."""
    if not isinstance(raw, dict):
        raise SchemaError("<root>: expected a mapping")
    raw = dict(raw)
    if "format_version" not in raw:
        raise SchemaError("format_version: required")
    version = raw.pop("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"format_version: unsupported version {version!r}, expected {FORMAT_VERSION}")
    cfg = _validate(raw, SCHEMA)
    _semantic_checks(cfg)
    cfg["format_version"] = FORMAT_VERSION
    return cfg


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: not valid YAML ({exc})") from exc
    return validate_config(raw if raw is not None else {})


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def config_hash(cfg: dict, sections=None) -> str:
    """Short sha256 of the canonical JSON of ``cfg``, ignoring output-only keys.

    ``sections`` restricts the hash to those top-level keys (used to key
    checkpoints on the parts that determine pre-training).
    """
    body = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    if sections is not None:
        body = {k: body[k] for k in sections}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_config(**overrides) -> dict:
    raw = {"format_version": FORMAT_VERSION}
    raw.update(overrides)
    return validate_config(raw)
