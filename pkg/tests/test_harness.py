import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from dpadapter.autodiff import init_mlp
from dpadapter.cli import main
from dpadapter.errors import ConfigError, FormatError, SchemaError
from dpadapter.harness.checkpoint import load_checkpoint, save_checkpoint
from dpadapter.harness.config import (
    FORMAT_VERSION,
    config_hash,
    default_config,
    dump_config,
    load_config,
    validate_config,
)
from dpadapter.harness.plotdata import FIGURES, emit_plotdata, figure_rows
from dpadapter.harness.runner import (
    METRIC_COLUMNS,
    analyze_gamma_sweep,
    build_task,
    budget_audit,
    is_unimodal,
    pretrain_model,
    read_csv,
    run_experiment,
    run_gamma_sweep,
    sweep_point,
)
from dpadapter.harness.verify import check_noise_variance, check_round_distribution

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def smoke_config(**over):
    raw = yaml.safe_load((CONFIGS / "smoke.yaml").read_text())
    raw.update(over)
    return validate_config(raw)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    return run_experiment(smoke_config(), out / "a"), out


# ------------------------------------------------------------ config


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfg = load_config(path)
        assert cfg["format_version"] == FORMAT_VERSION


def test_defaults_and_round_trip():
    cfg = default_config()
    assert cfg["privacy"]["delta"] == 1e-5 and cfg["seeds"] == [0, 1, 2, 3, 4]
    again = validate_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg and config_hash(again) == config_hash(cfg)


def test_unknown_key_error_names_path():
    with pytest.raises(SchemaError, match=r"pretrain\.gama: unknown key"):
        default_config(pretrain={"gama": 2.0})
    with pytest.raises(SchemaError, match="bogus"):
        default_config(bogus=1)


@pytest.mark.parametrize("raw,match", [
    ({}, "format_version: required"),
    ({"format_version": 2}, "unsupported version"),
    ({"format_version": 1, "seeds": []}, "seeds"),
    ({"format_version": 1, "pretrain": {"K": 1.5}}, r"pretrain\.K: expected an integer"),
    ({"format_version": 1, "privacy": {"epsilons": [0.0]}}, r"privacy\.epsilons\[0\]"),
    ({"format_version": 1, "grid": {"algorithms": ["sgd"]}}, r"grid\.algorithms\[0\]"),
    ({"format_version": 1, "task": {"kind": "idx"}}, r"task\.upstream"),
])
def test_schema_errors(raw, match):
    with pytest.raises(SchemaError, match=match):
        validate_config(raw)


def test_hash_ignores_output_only_keys():
    a = default_config(output_dir="x", workers=1)
    b = default_config(output_dir="y", workers=4)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(default_config(seeds=[1]))
    assert config_hash(a, ("task",)) == config_hash(default_config(seeds=[1]), ("task",))


def test_bad_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("format_version: [1\n")
    with pytest.raises(SchemaError, match="not valid YAML"):
        load_config(p)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = init_mlp([5, 7, 3], seed=2)
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"key": "abc", "seed": 2})
    back, meta = load_checkpoint(path)
    assert back.sizes == [5, 7, 3] and np.array_equal(back.flatten(), model.flatten())
    assert meta == {"key": "abc", "seed": 2}
    blob = path.read_bytes()
    assert blob[:8] == b"DPACKPT\0"
    np.testing.assert_array_equal(np.frombuffer(blob[-8 * model.dim :], "<f8"), model.flatten())


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b[:5], 5),
    (lambda b: b"XXXXXXXX" + b[8:], 0),
    (lambda b: b[:8] + b"\x02" + b[9:], 8),
    (lambda b: b[:-8], None),
])
def test_checkpoint_corruption(tmp_path, mutate, offset):
    path = save_checkpoint(tmp_path / "m.ckpt", init_mlp([3, 2], seed=0))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as exc:
        load_checkpoint(path)
    if offset is not None:
        assert exc.value.offset == offset


# ------------------------------------------------------------ runner


def test_smoke_run_emits_all_files(smoke_run):
    res, _ = smoke_run
    assert res.ok
    for name in ("config.yaml", "metrics.csv", "results.csv", "timings.csv", "summary.csv",
                 "summary.md"):
        assert (res.output_dir / name).exists(), name
    assert sorted(p.name for p in (res.output_dir / "checkpoints").iterdir()) == [
        "dpadapter-s0.ckpt", "scratch-s0.ckpt"]
    metrics = read_csv(res.output_dir / "metrics.csv")
    assert list(metrics[0]) == METRIC_COLUMNS
    assert {m["phase"] for m in metrics} == {"pretrain", "finetune", "final"}
    assert len({m["config_hash"] for m in metrics}) == 1
    assert "wall_time_s" not in metrics[0]
    assert len(res.results) == 4 and not budget_audit(res.results)
    assert "budget audit: ok" in (res.output_dir / "summary.md").read_text()


def test_rerun_is_bit_identical(smoke_run):
    res, root = smoke_run
    again = run_experiment(smoke_config(), root / "b")
    for name in ("metrics.csv", "results.csv", "summary.csv", "summary.md"):
        assert (res.output_dir / name).read_bytes() == (again.output_dir / name).read_bytes(), name


def test_checkpoints_reused(smoke_run, monkeypatch):
    res, _ = smoke_run
    import dpadapter.harness.runner as runner

    def boom(*a, **k):
        raise AssertionError("pre-training should have been skipped")

    monkeypatch.setattr(runner, "pretrain_model", boom)
    again = run_experiment(smoke_config(), res.output_dir)
    assert again.results == res.results


def test_parallel_workers_match_serial(smoke_run, tmp_path):
    res, _ = smoke_run
    par = run_experiment(smoke_config(), tmp_path, workers=2)
    assert (par.output_dir / "metrics.csv").read_bytes() == (res.output_dir / "metrics.csv").read_bytes()


def test_failures_are_recorded_and_others_continue(tmp_path):
    cfg = smoke_config()
    cfg["finetune"]["lot_size"] = 10_000
    res = run_experiment(cfg, tmp_path)
    assert not res.ok and len(res.failed) == len(res.results)
    assert all(r["status"].startswith("failed: ConfigError") for r in res.failed)
    assert "| 2 |" in (tmp_path / "summary.md").read_text()


def test_gamma_zero_matches_standard():
    cfg = smoke_config()
    task = build_task(cfg, 0)
    std = pretrain_model("standard", task, cfg, 0)
    dpa = pretrain_model("dpadapter", task, cfg, 0, gamma=0.0)
    assert np.array_equal(std.flatten(), dpa.flatten())
    row = sweep_point(cfg, 0, 0.0, task)
    assert set(row) >= {"gamma", "upstream_robust_accuracy", "downstream_accuracy"}


def test_gamma_sweep_needs_three_values():
    with pytest.raises(ConfigError):
        run_gamma_sweep(smoke_config(), [0.0, 1.0])


def test_unimodal_definition():
    assert is_unimodal([0.1, 0.5, 0.3])
    assert is_unimodal([0.1, 0.5, 0.5, 0.2])
    assert not is_unimodal([0.1, 0.2, 0.3])
    assert not is_unimodal([0.3, 0.2, 0.1])
    assert not is_unimodal([0.1, 0.5, 0.2, 0.4, 0.1])


def test_analyze_gamma_sweep_on_synthetic_rows():
    rows = []
    for s in range(3):
        for g, rob, down, up in [(0, 0.7, 0.6, 0.9), (1, 0.8, 0.7, 0.9), (2, 0.6, 0.65, 0.8)]:
            rows.append({"seed": s, "gamma": g, "upstream_robust_accuracy": rob + 0.01 * s,
                         "downstream_accuracy": down, "upstream_accuracy": up,
                         "downstream_robust_accuracy": down - 0.05})
    stats = analyze_gamma_sweep(rows)
    assert stats["robust_unimodal"] and stats["robust_unimodal_seeds"] == 3
    assert stats["spearman_robust_downstream"] == pytest.approx(0.5)
    assert stats["clean_nonincreasing_after_peak"]


# ------------------------------------------------------------ plot data


def test_plotdata_empty_gives_header_only(tmp_path):
    paths = emit_plotdata([], tmp_path)
    assert [p.name for p in paths] == [f"{f}.csv" for f in FIGURES]
    for p, fig in zip(paths, FIGURES):
        assert p.read_text() == ",".join(FIGURES[fig]["columns"]) + "\n"


def test_plotdata_round_trip_and_sort(tmp_path):
    rng = np.random.default_rng(0)
    rows = [{"seed": s, "gamma": g, "upstream_accuracy": float(rng.uniform()),
             "upstream_robust_accuracy": float(rng.uniform()),
             "downstream_accuracy": float(rng.uniform()),
             "downstream_robust_accuracy": float(rng.uniform()), "extra": "x"}
            for s in range(2) for g in (0.0, 1.0, 2.0)]
    emit_plotdata(rows, tmp_path, ["fig1", "fig2", "fig4"])
    fig1 = read_csv(tmp_path / "fig1.csv")
    assert fig1 == [{c: r[c] for c in FIGURES["fig1"]["columns"]} for r in rows]
    fig2 = read_csv(tmp_path / "fig2.csv")
    assert list(fig2[0]) == ["upstream_robust_accuracy", "downstream_robust_accuracy"]
    xs = [r["upstream_robust_accuracy"] for r in fig2]
    assert xs == sorted(xs)


def test_plotdata_missing_column():
    with pytest.raises(SchemaError, match="downstream_accuracy"):
        figure_rows([{"seed": 0, "gamma": 1.0, "upstream_robust_accuracy": 0.5}], "fig1")
    with pytest.raises(SchemaError):
        figure_rows([], "fig9")


# ------------------------------------------------------------ CLI


def _write_smoke(tmp_path, **over) -> Path:
    raw = yaml.safe_load((CONFIGS / "smoke.yaml").read_text())
    raw.update(over)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


def test_cli_run_and_report(tmp_path, capsys):
    cfg = _write_smoke(tmp_path)
    out = tmp_path / "run"
    assert main(["run", str(cfg), "--output-dir", str(out)]) == 0
    assert "budget audit: ok" in capsys.readouterr().out
    assert (out / "plotdata" / "fig5_6.csv").exists()
    assert main(["report", str(out)]) == 0


def test_cli_sweep(tmp_path, capsys):
    cfg = _write_smoke(tmp_path)
    out = tmp_path / "sweep"
    code = main(["sweep-gamma", str(cfg), "--output-dir", str(out), "--gammas", "0,1,2"])
    assert code == 0
    assert "spearman_robust_downstream" in capsys.readouterr().out
    for fig in ("fig1", "fig2", "fig4"):
        assert (out / "plotdata" / f"{fig}.csv").exists()


def test_cli_schema_error_exit_code(tmp_path, capsys):
    cfg = _write_smoke(tmp_path, pretrain={"gama": 1.0})
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "x")]) == 2
    assert "pretrain.gama" in capsys.readouterr().err


def test_cli_failed_cells_exit_nonzero(tmp_path):
    cfg = _write_smoke(tmp_path, finetune={"lot_size": 10_000})
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "x")]) == 1


def test_cli_verify_theory_uses_checks(monkeypatch, capsys):
    import dpadapter.cli as cli
    from dpadapter.harness.verify import Check

    monkeypatch.setattr(cli, "verify_theory", lambda n, out: [Check("a", True, "ok"), Check("b", False, "no")])
    assert main(["verify-theory", "--seeds", "2"]) == 1
    text = capsys.readouterr().out
    assert "[PASS] a: ok" in text and "[FAIL] b: no" in text


def test_statistical_checks():
    assert check_round_distribution(draws=20_000).passed
    assert check_noise_variance(dim=50_000).passed


def test_idx_task_uses_upstream_statistics(tmp_path):
    from dpadapter.data import write_idx

    rng = np.random.default_rng(0)
    paths = {}
    for key, n in (("upstream", 60), ("upstream_test", 20), ("downstream", 30), ("downstream_test", 20)):
        write_idx(tmp_path / f"{key}-images-idx3-ubyte", images=rng.integers(0, 256, (n, 3, 3)))
        write_idx(tmp_path / f"{key}-labels-idx1-ubyte", labels=rng.integers(0, 3, n))
        paths[key] = str(tmp_path / f"{key}-images-idx3-ubyte")
    cfg = default_config(task={"kind": "idx", **paths})
    task = build_task(cfg, 0)
    np.testing.assert_allclose(task.upstream.features.mean(axis=0), 0, atol=1e-12)
    assert np.array_equal(task.downstream_test.mean, task.upstream.mean)
    assert task.num_classes == 3 and task.downstream_train.features.shape == (30, 9)
