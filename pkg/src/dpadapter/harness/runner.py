"""Experiment pipelines: pre-train, DP fine-tune and evaluate over a grid of settings."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..accounting import PrivacySpec
from ..autodiff import ModelParams, init_mlp
from ..data import Dataset, TransferTask, load_idx_dataset, make_synthetic_transfer, normalization_stats
from ..errors import ConfigError
from ..finetune import AdpClipState, DpSgdConfig, FinetuneResult, GepConfig, finetune
from ..pretrain import PretrainConfig, mean_loss, train_dpadapter, train_standard, train_vanilla_sam
from ..robustness import accuracy, robust_accuracy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DPML_ALGORITHMS, PRETRAIN_METHODS, config_hash

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "config_hash", "run_id", "seed", "pretrain_method", "algorithm", "epsilon_target", "phase",
    "epoch", "loss", "accuracy", "robust_accuracy", "epsilon_spent", "sigma", "clip_norm",
]
RESULT_COLUMNS = [
    "config_hash", "seed", "pretrain_method", "algorithm", "epsilon_target", "status",
    "epsilon_spent", "sigma", "upstream_accuracy", "upstream_robust_accuracy",
    "downstream_accuracy", "downstream_robust_accuracy",
]
SWEEP_COLUMNS = [
    "config_hash", "seed", "gamma", "upstream_accuracy", "upstream_robust_accuracy",
    "downstream_accuracy", "downstream_robust_accuracy", "epsilon_spent",
]
TIMING_COLUMNS = ["run_id", "wall_time_s"]
PRETRAIN_SECTIONS = ("task", "model", "pretrain")


# ---------------------------------------------------------------- csv helpers


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
    return path


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- building blocks


def _renormalize(ds: Dataset, stats, name) -> Dataset:
    raw = ds.features * ds.std + ds.mean
    mean, std = stats
    return Dataset((raw - mean) / std, ds.labels, name, mean, std)


def build_task(cfg: dict, seed: int) -> TransferTask:
    t = cfg["task"]
    if t["kind"] == "synthetic":
        return make_synthetic_transfer(seed, t["relation"], t["n_up"], t["n_down"], t["d_in"], t["k"],
                                       separation=t["separation"], shift=t["shift"],
                                       cov_scale=t["cov_scale"])
    parts = [load_idx_dataset(t[k]) for k in ("upstream", "upstream_test", "downstream",
                                              "downstream_test")]
    up_raw = parts[0].features * parts[0].std + parts[0].mean
    stats = normalization_stats(up_raw)
    names = ("upstream", "upstream_test", "downstream_train", "downstream_test")
    parts = [_renormalize(p, stats, n) for p, n in zip(parts, names)]
    k = int(max(p.num_classes for p in parts))
    return TransferTask(*parts, relation=t["relation"], num_classes=k)


def model_sizes(cfg: dict, task: TransferTask) -> list[int]:
    return [task.upstream.input_dim, *cfg["model"]["hidden"], task.num_classes]


def pretrain_config(cfg: dict, gamma: float | None = None) -> PretrainConfig:
    p = dict(cfg["pretrain"])
    if gamma is not None:
        p["gamma"] = gamma
    return PretrainConfig(**p)


def pretrain_model(method: str, task: TransferTask, cfg: dict, seed: int,
                   gamma: float | None = None) -> ModelParams:
    init = init_mlp(model_sizes(cfg, task), seed)
    if method == "scratch":
        return init
    pc = pretrain_config(cfg, gamma)
    train = {"standard": train_standard, "vanilla_sam": train_vanilla_sam,
             "dpadapter": train_dpadapter}[method]
    return train(task.upstream, pc, seed, init)


def finetune_config(cfg: dict) -> DpSgdConfig:
    f = cfg["finetune"]
    return DpSgdConfig(clip_norm=f["clip_norm"], lot_size=f["lot_size"], epochs=f["epochs"],
                       lr=f["lr"], momentum=f["momentum"])


def run_finetune(algorithm: str, model: ModelParams, task: TransferTask, cfg: dict, epsilon: float,
                 seed: int) -> FinetuneResult:
    _assert_test_isolated(task)
    f = cfg["finetune"]
    clip = AdpClipState(C_t=f["clip_norm"], eta_C=cfg["adpclip"]["eta_C"],
                        target_quantile=cfg["adpclip"]["target_quantile"])
    return finetune(algorithm, model, task.downstream_train,
                    PrivacySpec(epsilon, cfg["privacy"]["delta"]), finetune_config(cfg), seed,
                    test_set=task.downstream_test, public=task.upstream,
                    gep=GepConfig(**cfg["gep"]), clip_state=clip,
                    sigma_b_ratio=f["sigma_b_ratio"], sigma0_factor=f["sigma0_factor"])


def _assert_test_isolated(task: TransferTask):
    train, test = task.downstream_train, task.downstream_test
    if train is test or np.shares_memory(train.features, test.features):
        raise AssertionError("downstream test split aliases the training split")


def robust(model, ds: Dataset, cfg: dict, seed: int) -> float:
    r = cfg["robustness"]
    return robust_accuracy(model, ds, r["noise_std"], r["trials"], seed).robust_accuracy


# ---------------------------------------------------------------- grid cells


@dataclass
class CellOutput:
    method: str
    seed: int
    metrics: list[dict] = field(default_factory=list)
    results: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)


def _load_or_pretrain(method, task, cfg, seed, ckpt_dir: Path | None):
    key = config_hash(cfg, PRETRAIN_SECTIONS)
    path = ckpt_dir / f"{method}-s{seed}.ckpt" if ckpt_dir is not None else None
    if path is not None and path.exists():
        try:
            model, meta = load_checkpoint(path)
            if meta.get("key") == key and meta.get("method") == method and meta.get("seed") == seed:
                return model
        except Exception as exc:  # unreadable checkpoints are retrained
            log.warning("ignoring checkpoint %s: %s", path, exc)
    model = pretrain_model(method, task, cfg, seed)
    if path is not None:
        save_checkpoint(path, model, {"key": key, "method": method, "seed": seed})
    return model


def run_cell(cfg: dict, method: str, seed: int, out_dir: str | None = None) -> CellOutput:
    """Pre-train once for (method, seed) and fine-tune every (algorithm, epsilon) from it."""
    h = config_hash(cfg)
    out = CellOutput(method, seed)
    base = {"config_hash": h, "seed": seed, "pretrain_method": method}
    root = Path(out_dir) if out_dir is not None else None
    task = build_task(cfg, seed)
    t0 = time.perf_counter()
    try:
        model = _load_or_pretrain(method, task, cfg, seed, root / "checkpoints" if root else None)
        up_acc = accuracy(model, task.upstream_test)
        up_rob = robust(model, task.upstream_test, cfg, seed)
        out.metrics.append({**base, "run_id": f"{method}/seed={seed}", "algorithm": "",
                            "epsilon_target": "", "phase": "pretrain", "epoch": "",
                            "loss": mean_loss(model, task.upstream), "accuracy": up_acc,
                            "robust_accuracy": up_rob})
        error = None
    except Exception as exc:
        log.exception("pre-training failed for %s seed %d", method, seed)
        model, up_acc, up_rob, error = None, math.nan, math.nan, f"failed: {type(exc).__name__}: {exc}"
    out.timings.append({"run_id": f"{method}/seed={seed}", "wall_time_s": time.perf_counter() - t0})

    for algo in cfg["grid"]["algorithms"]:
        for eps in cfg["privacy"]["epsilons"]:
            run_id = f"{method}/{algo}/eps={eps:g}/seed={seed}"
            row = {**base, "algorithm": algo, "epsilon_target": eps,
                   "upstream_accuracy": up_acc, "upstream_robust_accuracy": up_rob}
            t0 = time.perf_counter()
            if error is not None:
                out.results.append({**row, "status": error, "epsilon_spent": math.nan,
                                    "sigma": math.nan, "downstream_accuracy": math.nan,
                                    "downstream_robust_accuracy": math.nan})
                continue
            try:
                res = run_finetune(algo, model, task, cfg, eps, seed)
                for hrow in res.history:
                    out.metrics.append({**base, "run_id": run_id, "algorithm": algo,
                                        "epsilon_target": eps, "phase": "finetune",
                                        "epoch": hrow["epoch"], "loss": hrow["train_loss"],
                                        "accuracy": hrow["test_accuracy"],
                                        "epsilon_spent": hrow["epsilon"], "sigma": hrow["sigma"],
                                        "clip_norm": hrow["clip_norm"]})
                down_acc = accuracy(res.model, task.downstream_test)
                down_rob = robust(res.model, task.downstream_test, cfg, seed)
                out.metrics.append({**base, "run_id": run_id, "algorithm": algo,
                                    "epsilon_target": eps, "phase": "final",
                                    "epoch": cfg["finetune"]["epochs"],
                                    "loss": mean_loss(res.model, task.downstream_train),
                                    "accuracy": down_acc, "robust_accuracy": down_rob,
                                    "epsilon_spent": res.epsilon, "sigma": res.sigma})
                out.results.append({**row, "status": "ok", "epsilon_spent": res.epsilon,
                                    "sigma": res.sigma, "downstream_accuracy": down_acc,
                                    "downstream_robust_accuracy": down_rob})
            except Exception as exc:
                log.exception("fine-tuning failed: %s", run_id)
                out.results.append({**row, "status": f"failed: {type(exc).__name__}: {exc}",
                                    "epsilon_spent": math.nan, "sigma": math.nan,
                                    "downstream_accuracy": math.nan,
                                    "downstream_robust_accuracy": math.nan})
            out.timings.append({"run_id": run_id, "wall_time_s": time.perf_counter() - t0})

    if root is not None:
        cell_dir = root / "cells" / f"{method}-s{seed}"
        write_csv(cell_dir / "metrics.csv", METRIC_COLUMNS, out.metrics)
        write_csv(cell_dir / "results.csv", RESULT_COLUMNS, out.results)
    return out


def _run_cell_args(args):
    return run_cell(*args)


# ---------------------------------------------------------------- summary


def _cell_key(algo, eps) -> str:
    return f"{algo}@eps={eps:g}"


def summarize(results: list[dict], cfg: dict) -> list[dict]:
    """Table layout: one row per pre-training method, one mean/std pair per (algorithm, epsilon)."""
    table = []
    for method in cfg["grid"]["pretrain_methods"]:
        row = {"pretrain_method": method, "n_failed": 0}
        for algo in cfg["grid"]["algorithms"]:
            for eps in cfg["privacy"]["epsilons"]:
                sel = [r for r in results if r["pretrain_method"] == method
                       and r["algorithm"] == algo and r["epsilon_target"] == eps]
                ok = [r["downstream_accuracy"] for r in sel if r["status"] == "ok"]
                row["n_failed"] += len(sel) - len(ok)
                key = _cell_key(algo, eps)
                row[key + ":mean"] = float(np.mean(ok)) if ok else math.nan
                row[key + ":std"] = float(np.std(ok, ddof=1)) if len(ok) > 1 else math.nan
                row[key + ":n"] = len(ok)
        table.append(row)
    return table


def summary_columns(cfg: dict) -> list[str]:
    cols = ["pretrain_method"]
    for algo in cfg["grid"]["algorithms"]:
        for eps in cfg["privacy"]["epsilons"]:
            k = _cell_key(algo, eps)
            cols += [k + ":mean", k + ":std", k + ":n"]
    return cols + ["n_failed"]


def budget_audit(results: list[dict]) -> list[str]:
    """Rows whose reported epsilon exceeds the target (should always be empty)."""
    bad = []
    for r in results:
        if r["status"] == "ok" and not r["epsilon_spent"] <= r["epsilon_target"]:
            bad.append(f"{r['pretrain_method']}/{r['algorithm']}/eps={r['epsilon_target']}"
                       f"/seed={r['seed']}: spent {r['epsilon_spent']}")
    return bad


def format_summary(table: list[dict], cfg: dict, audit: list[str], h: str) -> str:
    heads = [_cell_key(a, e) for a in cfg["grid"]["algorithms"] for e in cfg["privacy"]["epsilons"]]
    lines = [f"# {cfg['name']} (config {h})", "",
             "| pretrain | " + " | ".join(heads) + " | failed |",
             "|---" * (len(heads) + 2) + "|"]
    for row in table:
        cells = []
        for k in heads:
            m, s = row[k + ":mean"], row[k + ":std"]
            cells.append("n/a" if math.isnan(m) else f"{m:.4f} ± {0.0 if math.isnan(s) else s:.4f}")
        lines.append(f"| {row['pretrain_method']} | " + " | ".join(cells) + f" | {row['n_failed']} |")
    lines += ["", "budget audit: " + ("ok" if not audit else "VIOLATED")]
    lines += [f"  {a}" for a in audit]
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    config_hash: str
    output_dir: Path | None
    results: list[dict]
    summary: list[dict]
    audit_violations: list[str]
    metrics: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.results if r["status"] != "ok"]

    @property
    def ok(self) -> bool:
        return not self.audit_violations and not self.failed


def write_report(out: Path, cfg: dict, results: list[dict]) -> tuple[list[dict], list[str]]:
    h = config_hash(cfg)
    table = summarize(results, cfg)
    audit = budget_audit(results)
    write_csv(out / "summary.csv", summary_columns(cfg), table)
    (out / "summary.md").write_text(format_summary(table, cfg, audit, h))
    return table, audit


def run_experiment(cfg: dict, output_dir=None, workers: int | None = None) -> ExperimentResult:
    """Run every (pre-training method, seed) cell and fine-tune each with every
    (algorithm, epsilon).  Writes metrics.csv, results.csv, timings.csv,
    summary.csv/summary.md and per-method checkpoints under ``output_dir``."""
    out = Path(output_dir if output_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    workers = workers if workers is not None else cfg["workers"]
    h = config_hash(cfg)
    (out / "config.yaml").write_text(f"# config_hash: {h}\n" + _dump(cfg))
    cells = [(cfg, m, s, str(out)) for m in cfg["grid"]["pretrain_methods"] for s in cfg["seeds"]]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell_args, cells))
    else:
        outputs = [run_cell(*c) for c in cells]
    metrics = [r for o in outputs for r in o.metrics]
    results = [r for o in outputs for r in o.results]
    timings = [r for o in outputs for r in o.timings]
    write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics)
    write_csv(out / "results.csv", RESULT_COLUMNS, results)
    write_csv(out / "timings.csv", TIMING_COLUMNS, timings)
    table, audit = write_report(out, cfg, results)
    return ExperimentResult(h, out, results, table, audit, metrics)


def _dump(cfg):
    from .config import dump_config

    return dump_config(cfg)


# ---------------------------------------------------------------- gamma sweep


def sweep_point(cfg: dict, seed: int, gamma: float, task: TransferTask | None = None) -> dict:
    task = build_task(cfg, seed) if task is None else task
    gs = cfg["gamma_sweep"]
    model = pretrain_model("dpadapter", task, cfg, seed, gamma=gamma)
    res = run_finetune(gs["algorithm"], model, task, cfg, gs["epsilon"], seed)
    return {
        "config_hash": config_hash(cfg), "seed": seed, "gamma": gamma,
        "upstream_accuracy": accuracy(model, task.upstream_test),
        "upstream_robust_accuracy": robust(model, task.upstream_test, cfg, seed),
        "downstream_accuracy": accuracy(res.model, task.downstream_test),
        "downstream_robust_accuracy": robust(res.model, task.downstream_test, cfg, seed),
        "epsilon_spent": res.epsilon,
    }


def _sweep_args(args):
    return sweep_point(*args)


def run_gamma_sweep(cfg: dict, gammas=None, output_dir=None, workers: int | None = None) -> list[dict]:
    """DPAdapter pre-training at each gamma, then private fine-tuning; one row per (seed, gamma)."""
    gammas = list(cfg["gamma_sweep"]["gammas"] if gammas is None else gammas)
    if len(gammas) < 3:
        raise ConfigError("a gamma sweep needs at least 3 values")
    workers = workers if workers is not None else cfg["workers"]
    jobs = [(cfg, s, float(g)) for s in cfg["seeds"] for g in gammas]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_args, jobs))
    else:
        rows = []
        for s in cfg["seeds"]:
            task = build_task(cfg, s)
            rows += [sweep_point(cfg, s, float(g), task) for g in gammas]
    if output_dir is not None:
        write_csv(Path(output_dir) / "gamma_sweep.csv", SWEEP_COLUMNS, rows)
    return rows


def is_unimodal(values) -> bool:
    """True when the sequence rises to an interior peak and then falls."""
    v = list(values)
    p = int(np.argmax(v))
    if p == 0 or p == len(v) - 1:
        return False
    return all(a <= b for a, b in zip(v[:p], v[1 : p + 1])) and all(
        a >= b for a, b in zip(v[p:], v[p + 1 :]))


def sweep_means(rows: list[dict], column: str) -> tuple[list[float], list[float]]:
    gammas = sorted({r["gamma"] for r in rows})
    return gammas, [float(np.mean([r[column] for r in rows if r["gamma"] == g])) for g in gammas]


def analyze_gamma_sweep(rows: list[dict]) -> dict:
    """Shape statistics of a gamma sweep (mean curves and per-seed checks)."""
    gammas, up_rob = sweep_means(rows, "upstream_robust_accuracy")
    _, down = sweep_means(rows, "downstream_accuracy")
    _, up_acc = sweep_means(rows, "upstream_accuracy")
    _, down_rob = sweep_means(rows, "downstream_robust_accuracy")
    seeds = sorted({r["seed"] for r in rows})
    per_seed = []
    for s in seeds:
        sel = sorted((r for r in rows if r["seed"] == s), key=lambda r: r["gamma"])
        per_seed.append(is_unimodal([r["upstream_robust_accuracy"] for r in sel]))
    peak = int(np.argmax(up_rob))
    return {
        "gammas": gammas,
        "upstream_robust_accuracy": up_rob,
        "downstream_accuracy": down,
        "upstream_accuracy": up_acc,
        "downstream_robust_accuracy": down_rob,
        "robust_unimodal": is_unimodal(up_rob),
        "downstream_unimodal": is_unimodal(down),
        "robust_unimodal_seeds": sum(per_seed),
        "n_seeds": len(seeds),
        "spearman_robust_downstream": float(spearmanr(up_rob, down)[0]),
        "spearman_robust_transfer": float(spearmanr(up_rob, down_rob)[0]),
        "clean_nonincreasing_after_peak": all(a >= b for a, b in zip(up_acc[peak:], up_acc[peak + 1 :])),
    }
