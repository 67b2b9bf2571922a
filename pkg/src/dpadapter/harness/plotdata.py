"""Plot-ready CSV files, one per figure analogue.

Each figure is a projection of metric rows onto a fixed column list, so a
file can be parsed back and compared with the rows it came from.
"""

from __future__ import annotations

from pathlib import Path

from ..errors import SchemaError
from .runner import read_csv, write_csv

FIGURES: dict[str, dict] = {
    # upstream robustness and downstream DP accuracy against gamma
    "fig1": {"columns": ["seed", "gamma", "upstream_robust_accuracy", "downstream_accuracy"]},
    # robustness transfer scatter
    "fig2": {"columns": ["upstream_robust_accuracy", "downstream_robust_accuracy"],
             "sort": "upstream_robust_accuracy"},
    # upstream accuracy, upstream robustness and downstream accuracy against gamma
    "fig4": {"columns": ["seed", "gamma", "upstream_accuracy", "upstream_robust_accuracy",
                         "downstream_accuracy"]},
    # robustness / accuracy trade-off per pre-training method and budget
    "fig5_6": {"columns": ["seed", "pretrain_method", "algorithm", "epsilon_target",
                           "upstream_robust_accuracy", "downstream_accuracy"]},
}
SWEEP_FIGURES = ("fig1", "fig2", "fig4")
GRID_FIGURES = ("fig5_6",)


def figure_rows(metrics: list[dict], figure: str) -> list[dict]:
    if figure not in FIGURES:
        raise SchemaError(f"unknown figure {figure!r}")
    spec = FIGURES[figure]
    cols = spec["columns"]
    if metrics:
        present = set(metrics[0])
        missing = [c for c in cols if c not in present]
        if missing:
            raise SchemaError(f"{figure}: metrics lack column(s) {', '.join(missing)}")
    rows = [{c: r[c] for c in cols} for r in metrics]
    if "sort" in spec:
        rows.sort(key=lambda r: r[spec["sort"]])
    return rows


def emit_plotdata(metrics, out_dir, figures=None) -> list[Path]:
    """Write ``<figure>.csv`` for each requested figure.

    ``metrics`` is a list of row dicts or a path to a metrics CSV.  Empty
    input produces header-only files; a missing column raises SchemaError.
    """
    if not isinstance(metrics, list):
        metrics = read_csv(metrics)
    figures = list(FIGURES) if figures is None else list(figures)
    out = Path(out_dir)
    paths = []
    for fig in figures:
        rows = figure_rows(metrics, fig)
        paths.append(write_csv(out / f"{fig}.csv", FIGURES[fig]["columns"], rows))
    return paths
