import csv
import json
import os

import pytest

from tplab import cli, metrics, scenario
from tplab.cli import RESULTS_HEADER

SMALL_FLAGS = ["--drive-length-s", "20", "--waypoint-count", "4", "--speed", "1.5",
               "--n-unlabeled-drives", "2", "--seed", "3"]


def _run_config(tmp_path, data, out, **over):
    cfg = {
        "dataset": str(data), "out": str(out), "strategies": ["random"], "seeds": [1],
        "scenario": {"hidden_dims": [16, 16, 8], "lossmod_mid_dim": 4, "timing": "off"},
        "train": {"lr": 0.03, "patience": 4, "max_epochs": 40},
        "query": {"T": 3},
    }
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path = tmp_path / f"run_{len(list(tmp_path.glob('run_*.json')))}.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    assert cli.main(["gen", "--out", str(d), *SMALL_FLAGS]) == 0
    return d


def _rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.reader(lines[1:]))


def test_gen_default_layout_and_hash(tmp_path, capsys):
    assert cli.main(["gen", "--out", str(tmp_path / "a")]) == 0
    h1 = capsys.readouterr().out.strip()
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len([f for f in files if f.endswith(".jsonl")]) == 7 and "manifest.json" in files
    assert cli.main(["gen", "--out", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out.strip() == h1


def test_gen_invalid_field_exit_2(tmp_path, capsys):
    assert cli.main(["gen", "--out", str(tmp_path), "--n-classes", "1"]) == 2
    assert "n_classes" in capsys.readouterr().err


def test_gen_unknown_config_field(tmp_path, capsys):
    (tmp_path / "g.json").write_text(json.dumps({"colour": "red"}))
    assert cli.main(["gen", "--config", str(tmp_path / "g.json"), "--out", str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err


def test_gen_unwritable_out_exit_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen", "--out", str(blocker / "sub"), *SMALL_FLAGS]) == 1


def test_run_rows_and_determinism(tmp_path, data):
    out = tmp_path / "out"
    cfg = _run_config(tmp_path, data, out)
    assert cli.main(["run", "--config", str(cfg)]) == 0
    rows = _rows(out / "results.csv")
    assert rows[0] == RESULTS_HEADER
    assert len(rows) - 1 == 3  # cycle 0 plus two drives
    first = (out / "results.csv").read_bytes()
    out2 = tmp_path / "out2"
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, out2))]) == 0
    assert (out2 / "results.csv").read_bytes() == first
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest) >= {"config", "config_hash", "bundle_hash", "reference_accuracy", "environment"}


def test_run_flags_override(tmp_path, data):
    out = tmp_path / "o"
    cfg = _run_config(tmp_path, data, out)
    assert cli.main(["run", "--config", str(cfg), "--strategies", "random,losslearn", "--seeds", "2"]) == 0
    rows = _rows(out / "results.csv")[1:]
    assert {(r[0], r[1]) for r in rows} == {("random", "2"), ("losslearn", "2")}


@pytest.mark.parametrize("over,needle", [
    ({"strategies": ["nope"]}, "nope"),
    ({"strategies": ["coreset"]}, "coreset"),
    ({"scenario": {"colour": 1}}, "colour"),
    ({"train": {"batch_size": 3}}, "batch_size"),
    ({"seeds": []}, "seeds"),
])
def test_run_config_errors_exit_2(tmp_path, data, capsys, monkeypatch, over, needle):
    monkeypatch.setattr(scenario, "run", lambda *a, **k: pytest.fail("ran despite bad config"))
    cfg = _run_config(tmp_path, data, tmp_path / "o", **over)
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert needle in capsys.readouterr().err


def test_run_missing_bundle_exit_1(tmp_path):
    cfg = _run_config(tmp_path, tmp_path / "missing", tmp_path / "o")
    assert cli.main(["run", "--config", str(cfg)]) == 1


def test_run_abort_exit_3_keeps_finished_cells(tmp_path, data, capsys, monkeypatch):
    out = tmp_path / "o"
    cfg = _run_config(tmp_path, data, out, strategies=["random", "tpl"])
    real = scenario.run

    def flaky(bundle, c, keep_models=False):
        if c.strategy == "tpl":
            from tplab.trainer import TrainingAborted
            raise TrainingAborted("epoch 3, batch 1: non-finite loss", 3, 1)
        return real(bundle, c, keep_models)

    monkeypatch.setattr(scenario, "run", flaky)
    assert cli.main(["run", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "strategy=tpl" in err and "seed=1" in err
    assert (out / "cells" / "random_seed1.csv").exists()


def test_run_resumes_completed_cells(tmp_path, data, monkeypatch):
    out = tmp_path / "o"
    cfg = _run_config(tmp_path, data, out)
    assert cli.main(["run", "--config", str(cfg)]) == 0
    before = (out / "results.csv").read_bytes()
    monkeypatch.setattr(scenario, "run", lambda *a, **k: pytest.fail("completed cell re-ran"))
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert (out / "results.csv").read_bytes() == before


def test_parallel_workers_same_bytes(tmp_path, data, monkeypatch):
    serial, par = tmp_path / "s", tmp_path / "p"
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, serial, seeds=[1, 2]))]) == 0
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, par, seeds=[1, 2]))]) == 0
    assert (serial / "results.csv").read_bytes() == (par / "results.csv").read_bytes()


def test_bad_worker_env_exit_2(tmp_path, data, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "many")
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, tmp_path / "o"))]) == 2


def test_report_single_seed_curve_is_raw(tmp_path, data):
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, out))]) == 0
    assert cli.main(["report", str(out)]) == 0
    raw = _rows(out / "results.csv")[1:]
    curve = _rows(out / "report" / "curves.csv")[1:]
    assert [float(r[7]) for r in raw] == [float(c[2]) for c in curve]
    assert all(float(c[3]) == 0.0 for c in curve)
    for name in ("summary.json", "timing.csv", "accuracy.svg", "accuracy.png", "diversity_summary.csv"):
        assert (out / "report" / name).exists()


def test_report_is_reproducible_and_matches_library(tmp_path, data):
    out = tmp_path / "o"
    cfg = _run_config(tmp_path, data, out, strategies=["random", "tpl"], seeds=[1, 2])
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert cli.main(["report", str(out), "--out", str(tmp_path / "r1")]) == 0
    assert cli.main(["report", str(out), "--out", str(tmp_path / "r2")]) == 0
    for f in (tmp_path / "r1").iterdir():
        assert f.read_bytes() == (tmp_path / "r2" / f.name).read_bytes(), f.name
    summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    ref = sum(manifest["reference_accuracy"].values()) / 2
    assert summary["reference_accuracy"] == pytest.approx(ref)
    for st, info in summary["strategies"].items():
        c = metrics.Curve(*zip(*[(p["labeled_fraction"], p["mean_accuracy"], p["stderr"]) for p in info["curve"]]))
        assert info["intersection_fraction"] == metrics.intersection_fraction(c, ref)


def test_report_empty_dir_exit_2(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == 2


def test_report_refuses_mixed_bundles(tmp_path, data):
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, out))]) == 0
    text = (out / "results.csv").read_text()
    other = text.replace("bundle_hash=", "bundle_hash=ff", 1)
    (out / "results_other.csv").write_text(other.replace("random,", "tpl,"))
    assert cli.main(["report", str(out)]) == 2


def test_every_output_embeds_hash(tmp_path, data):
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(_run_config(tmp_path, data, out))]) == 0
    assert cli.main(["report", str(out)]) == 0
    for p in list(out.glob("*.csv")) + list((out / "report").glob("*.csv")) + list((out / "cells").glob("*.csv")):
        assert "bundle_hash=" in p.read_text().splitlines()[0], p
    assert "config_hashes" in json.loads((out / "report" / "summary.json").read_text())
