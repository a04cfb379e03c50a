import csv
import json

import numpy as np
import pytest

from atdt import metrics
from atdt.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main

TINY = {
    "name": "tiny",
    "seeds": [0],
    "data": {"n_train": 8, "n_val": 4, "n_test": 4, "resolution": 32},
    "train_task": {"steps": 2, "batch_size": 4, "eval_every": 2, "eval_batch": 4},
    "train_transfer": {"steps": 2, "batch_size": 4, "eval_every": 2, "eval_batch": 4},
    "qualitative_samples": 2,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == EXIT_OK
    assert main([]) == EXIT_CONFIG
    assert main(["run", "--split-level", "7"]) == EXIT_CONFIG
    assert main(["run", "--direction", "sideways"]) == EXIT_CONFIG


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"nope": 1}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "runs")]) == EXIT_CONFIG
    assert "unknown keys" in capsys.readouterr().err


def test_unknown_method_and_bad_seed_env(config, tmp_path, monkeypatch):
    out = str(tmp_path / "runs")
    assert main(["run", "--config", str(config), "--out", out, "--methods", "atdt,psychic"]) == EXIT_CONFIG
    assert main(["run", "--config", str(config), "--out", out, "--ablations", "everything"]) == EXIT_CONFIG
    monkeypatch.setenv("ATDT_SEED", "x")
    assert main(["run", "--config", str(config), "--out", out]) == EXIT_CONFIG


def test_baseline_only_trains_no_transfer_or_oracle(config, tmp_path):
    out = tmp_path / "runs"
    assert main(["run", "--config", str(config), "--out", str(out), "--methods", "baseline"]) == EXIT_OK
    ckpts = {p.stem.split("_step")[0] for p in (out / "tiny" / "0" / "checkpoints").glob("*.ckpt")}
    assert ckpts == {"seg_A"}
    recs = json.loads((out / "tiny" / "0" / "metrics.json").read_text())
    assert {r["method"] for r in recs} == {"baseline"}


def test_seeds_flag_and_env_master_seed(config, tmp_path, monkeypatch):
    out = tmp_path / "runs"
    monkeypatch.setenv("ATDT_SEED", "10")
    assert main(["run", "--config", str(config), "--out", str(out), "--methods", "baseline", "--seeds", "5"]) == EXIT_OK
    assert sorted(p.name for p in (out / "tiny").iterdir()) == [str(s) for s in range(10, 15)]


def test_sem2dep_writes_depth_bundle(config, tmp_path):
    out = tmp_path / "runs"
    assert main(["run", "--config", str(config), "--out", str(out), "--direction", "sem2dep",
                 "--methods", "atdt,baseline"]) == EXIT_OK
    recs = json.loads((out / "tiny" / "0" / "metrics.json").read_text())
    atdt = [r for r in recs if r["method"] == "atdt" and r["domain"] == "B"][0]
    assert set(atdt["metrics"]) == {"abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"}


def test_flags_override_config_and_reach_the_manifest(config, tmp_path):
    out = tmp_path / "runs"
    assert main(["run", "--config", str(config), "--out", str(out), "--methods", "baseline",
                 "--split-level", "2", "--no-batchnorm", "--no-shared-encoder", "--proxy-labels",
                 "--paired", "--name", "flags"]) == EXIT_OK
    cfg = json.loads((out / "flags" / "0" / "manifest.json").read_text())["config"]
    assert cfg["split_level"] == 2 and cfg["use_batchnorm"] is False
    assert cfg["shared_encoder"] is False and cfg["proxy_labels_on_b"] is True
    assert cfg["data"]["paired"] is True


def test_rerun_from_manifest_reproduces_metrics(config, tmp_path):
    first = tmp_path / "first"
    assert main(["run", "--config", str(config), "--out", str(first), "--methods", "atdt,baseline"]) == EXIT_OK
    manifest = first / "tiny" / "0" / "manifest.json"
    second = tmp_path / "second"
    assert main(["run", "--config", str(manifest), "--out", str(second)]) == EXIT_OK
    assert (first / "tiny" / "0" / "metrics.json").read_bytes() == (second / "tiny" / "0" / "metrics.json").read_bytes()


def test_failed_arm_exits_one_and_keeps_results(config, tmp_path, monkeypatch):
    from atdt import pipeline
    from atdt.training import TrainingAborted
    real = pipeline.train_task_network

    def flaky(net, sources, task, cfg, **kw):
        if kw.get("tag") == "seg_B":
            raise TrainingAborted("non-finite loss")
        return real(net, sources, task, cfg, **kw)

    monkeypatch.setattr(pipeline, "train_task_network", flaky)
    out = tmp_path / "runs"
    assert main(["run", "--config", str(config), "--out", str(out), "--methods", "baseline,oracle"]) == EXIT_FAIL
    recs = json.loads((out / "tiny" / "0" / "metrics.json").read_text())
    assert {r["method"]: r["status"] for r in recs if r["domain"] == "B"} == {"baseline": "ok", "oracle": "failed"}


# ------------------------------------------------------------------ report
@pytest.fixture
def two_seed_runs(config, tmp_path):
    out = tmp_path / "runs"
    assert main(["run", "--config", str(config), "--out", str(out), "--seeds", "2"]) == EXIT_OK
    assert main(["run", "--config", str(config), "--out", str(out), "--name", "s2d", "--seeds", "2",
                 "--direction", "sem2dep"]) == EXIT_OK
    return out


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_report_tables(two_seed_runs, tmp_path, capsys):
    rep = tmp_path / "report"
    assert main(["report", "--runs", str(two_seed_runs), "--out", str(rep)]) == EXIT_OK
    seg = _read_csv(rep / "dep2sem_B.csv")
    assert seg[0][:2] == ["method", "seed"] and len(seg[0]) == 2 + 8
    assert seg[0][2:4] == ["miou", "acc"]
    dep = _read_csv(rep / "sem2dep_B.csv")
    assert len(dep[0]) == 2 + 7
    # seed-mean rows are the arithmetic mean of the seed rows
    for table in (seg, dep):
        header, body = table[0], table[1:]
        for method in {r[0] for r in body}:
            seeds = [r for r in body if r[0] == method and r[1] != "mean"]
            (mean,) = [r for r in body if r[0] == method and r[1] == "mean"]
            assert len(seeds) == 2
            for j in range(2, len(header)):
                vals = [float(r[j]) for r in seeds if r[j] != "-"]
                if vals:
                    assert float(mean[j]) == pytest.approx(np.mean(vals), abs=6e-5)
    text = (rep / "report.txt").read_text()
    assert "== dep2sem_B" in text and "== sem2dep_A" in text
    trip = sorted((rep / "triptychs").glob("*.ppm"))
    assert trip and any("_atdt" in p.name for p in trip)


def test_report_output_is_stable(two_seed_runs, tmp_path):
    a, b = tmp_path / "r1", tmp_path / "r2"
    assert main(["report", "--runs", str(two_seed_runs), "--out", str(a)]) == EXIT_OK
    assert main(["report", "--runs", str(two_seed_runs), "--out", str(b)]) == EXIT_OK
    assert (a / "report.txt").read_bytes() == (b / "report.txt").read_bytes()


def test_report_skips_missing_runs(tmp_path, capsys):
    assert main(["report", "--runs", str(tmp_path / "nowhere"), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert "warning" in capsys.readouterr().err


# ---------------------------------------------------------------- gen-data
def test_gen_data_is_idempotent(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(config), "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--config", str(config), "--out", str(b)]) == EXIT_OK
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    assert len([p for p in files_a if p.parts[:2] == ("A", "train") and p.suffix == ".ppm"]) == 8
    assert all((a / p).read_bytes() == (b / p).read_bytes() for p in files_a)


def test_gen_data_paired_shares_scene_seeds(config, tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", str(config), "--out", str(out), "--paired"]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["paired"] is True
    assert manifest["scene_seeds"]["A"] == manifest["scene_seeds"]["B"]


def test_gen_data_unwritable_destination(config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--config", str(config), "--out", str(blocker / "sub")]) == EXIT_FAIL


# ---------------------------------------------------------------- selftest
def test_selftest_passes_and_detects_a_mutated_kernel(monkeypatch, capsys):
    assert main(["selftest"]) == EXIT_OK
    real = metrics.seg_metrics

    def off_by_a_bit(cm):
        m = real(cm)
        return type(m)(m.miou + 1e-6, m.acc, m.per_class_iou)

    monkeypatch.setattr(metrics, "seg_metrics", off_by_a_bit)
    assert main(["selftest"]) == EXIT_FAIL
    assert "FAIL" in capsys.readouterr().out
