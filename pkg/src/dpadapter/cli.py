"""Command-line entry point: ``dpadapter {run,sweep-gamma,verify-theory,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import DPAdapterError
from .harness.config import config_hash, load_config, validate_config
from .harness.plotdata import GRID_FIGURES, SWEEP_FIGURES, emit_plotdata
from .harness.runner import analyze_gamma_sweep, read_csv, run_experiment, run_gamma_sweep, write_report
from .harness.verify import verify_theory

log = logging.getLogger("dpadapter")


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _float_list(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _load(args) -> dict:
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        cfg["seeds"] = args.seeds
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = str(args.output_dir)
    if getattr(args, "workers", None):
        cfg["workers"] = args.workers
    return validate_config(cfg)


def cmd_run(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg)
    emit_plotdata(res.results, res.output_dir / "plotdata", GRID_FIGURES)
    print((res.output_dir / "summary.md").read_text(), end="")
    for r in res.failed:
        print(f"failed: {r['pretrain_method']}/{r['algorithm']}/eps={r['epsilon_target']:g}"
              f"/seed={r['seed']}: {r['status']}")
    return 0 if res.ok else 1


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = Path(cfg["output_dir"])
    rows = run_gamma_sweep(cfg, args.gammas, out)
    emit_plotdata(rows, out / "plotdata", SWEEP_FIGURES)
    stats = analyze_gamma_sweep(rows)
    print(f"gamma sweep (config {config_hash(cfg)}) -> {out / 'gamma_sweep.csv'}")
    for key in ("gammas", "upstream_accuracy", "upstream_robust_accuracy", "downstream_accuracy",
                "downstream_robust_accuracy"):
        print(f"  {key:28s} " + " ".join(f"{v:.4f}" for v in stats[key]))
    for key in ("robust_unimodal", "downstream_unimodal", "robust_unimodal_seeds",
                "spearman_robust_downstream", "spearman_robust_transfer",
                "clean_nonincreasing_after_peak"):
        print(f"  {key}: {stats[key]}")
    over = [r for r in rows if not r["epsilon_spent"] <= cfg["gamma_sweep"]["epsilon"]]
    if over:
        print(f"budget audit VIOLATED in {len(over)} rows")
        return 1
    if args.check:
        ok = (stats["robust_unimodal"] and stats["downstream_unimodal"]
              and stats["spearman_robust_downstream"] >= 0.5
              and stats["spearman_robust_transfer"] >= 0.5)
        print("shape check: " + ("PASS" if ok else "FAIL"))
        return 0 if ok else 1
    return 0


def cmd_verify(args) -> int:
    checks = verify_theory(args.seeds, args.output_dir)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.yaml")
    code = 0
    if (run_dir / "results.csv").exists():
        results = read_csv(run_dir / "results.csv")
        _, audit = write_report(run_dir, cfg, results)
        emit_plotdata(results, run_dir / "plotdata", GRID_FIGURES)
        print((run_dir / "summary.md").read_text(), end="")
        code = 1 if audit else 0
    if (run_dir / "gamma_sweep.csv").exists():
        emit_plotdata(run_dir / "gamma_sweep.csv", run_dir / "plotdata", SWEEP_FIGURES)
        print(f"plot data written to {run_dir / 'plotdata'}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpadapter", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", type=Path, help="YAML experiment config")
        sp.add_argument("--seeds", type=_int_list, help="comma-separated seed list")
        sp.add_argument("--output-dir", type=Path)
        sp.add_argument("--workers", type=int)

    sp = sub.add_parser("run", help="pre-train, fine-tune and evaluate the configured grid")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep-gamma", help="DPAdapter perturbation-radius sweep")
    common(sp)
    sp.add_argument("--gammas", type=_float_list, help="comma-separated radii")
    sp.add_argument("--check", action="store_true", help="exit nonzero unless the sweep has the expected shape")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify-theory", help="trend checks on synthetic objectives")
    sp.add_argument("--seeds", type=int, default=20, help="number of seeds per sweep point")
    sp.add_argument("--output-dir", type=Path)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="regenerate summary and plot data from a run directory")
    sp.add_argument("run_dir", type=Path)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DPAdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
