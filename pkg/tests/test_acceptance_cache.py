import pytest

from atdt import acceptance, pipeline
from atdt.config import DataConfig, ExperimentPlan
from atdt.training import TrainConfig


def tiny(name="c", steps=2, seeds=(0, 1)):
    return ExperimentPlan(
        name=name, seeds=list(seeds),
        data=DataConfig(n_train=8, n_val=4, n_test=4, resolution=32),
        train_task=TrainConfig(steps=steps, batch_size=4, eval_every=steps, eval_batch=4),
        train_transfer=TrainConfig(steps=steps, batch_size=4, eval_every=steps, eval_batch=4),
        qualitative_samples=0,
    ).validate()


def test_cache_reuses_matching_seeds_and_reruns_stale_ones(tmp_path, monkeypatch):
    first = acceptance.ensure_runs(tiny(), ["atdt", "baseline"], tmp_path)
    assert set(first.timings) == {0, 1} and "arm/atdt" in first.timings[0]

    def boom(*a, **k):
        raise AssertionError("should have been cached")

    monkeypatch.setattr(pipeline, "run_seed", boom)
    again = acceptance.ensure_runs(tiny(), ["atdt", "baseline"], tmp_path)
    assert again.records == first.records
    with pytest.raises(AssertionError, match="cached"):
        acceptance.ensure_runs(tiny(steps=3), ["atdt", "baseline"], tmp_path)
    with pytest.raises(AssertionError, match="cached"):
        acceptance.ensure_runs(tiny(), ["atdt"], tmp_path)


def test_rerun_check_on_a_real_manifest(tmp_path):
    res = acceptance.ensure_runs(tiny(seeds=(3,)), ["atdt", "baseline"], tmp_path)
    again = acceptance.ensure_rerun(res.run_dirs[3], tmp_path)
    assert again == tmp_path / acceptance.RERUN_DIR / "c" / "3"
    assert acceptance.determinism(res.run_dirs[3], again).passed


def _result(rows, seeds=(0, 1)):
    res = pipeline.RunResult(tiny(seeds=seeds))
    for method, variant, domain, metrics in rows:
        for s in seeds:
            res.records.append({"method": method, "variant": variant, "domain": domain, "seed": s,
                                "direction": "dep2sem", "status": "ok", "metrics": dict(metrics)})
    return res


def test_verdicts_on_synthetic_results():
    res = _result([
        ("atdt", "default", "B", {"miou": 0.50}),
        ("baseline", "default", "B", {"miou": 0.47}),
        ("atdt", "non_shared", "B", {"miou": 0.49}),
        ("atdt", "proxy", "B", {"miou": 0.48}),
    ])
    assert acceptance.dep2sem_gain(res, {0: 100.0, 1: 599.0}).passed
    assert not acceptance.dep2sem_gain(res, {0: 100.0, 1: 601.0}).passed
    assert not acceptance.shared_encoder(res).passed
    assert acceptance.proxy_labels(res).passed
    line = acceptance.proxy_labels(res).line()
    assert line.startswith("criterion  9 [PASS]")


def test_missing_seed_counts_as_failure():
    res = _result([("atdt", "default", "B", {"miou": 0.9}), ("baseline", "default", "B", {"miou": 0.1})])
    res.records = [r for r in res.records if not (r["method"] == "atdt" and r["seed"] == 1)]
    assert not acceptance.dep2sem_gain(res, {0: 1.0, 1: 1.0}).passed


def test_level_band_and_trend():
    rows = []
    for lv, (a, b) in {1: (0.80, 0.20), 2: (0.78, 0.30), 3: (0.75, 0.40), 4: (0.71, 0.50)}.items():
        rows += [("atdt", f"L{lv}", "A", {"miou": a, "acc": 0.95}), ("atdt", f"L{lv}", "B", {"miou": b, "acc": 0.9})]
    assert acceptance.level_trend(_result(rows)).passed
    rows[-2] = ("atdt", "L4", "A", {"miou": 0.69, "acc": 0.95})
    verdict = acceptance.level_trend(_result(rows))
    # a flat accuracy curve does not rescue a wide mIoU band
    assert not verdict.passed and "acc band 0.0 pts" in verdict.detail


def test_batchnorm_verdict_uses_mean_abs_only():
    def rows(bn_mean, nobn_mean, bn_rms, nobn_rms):
        out = [("atdt", "default", "B", {"miou": 0.5}), ("atdt", "no_bn", "B", {"miou": 0.4})]
        for d in ("A", "B"):
            out += [("feature_magnitude", "bn", d, {"mean_abs": bn_mean, "rms": bn_rms}),
                    ("feature_magnitude", "no_bn", d, {"mean_abs": nobn_mean, "rms": nobn_rms})]
        return _result(out)

    assert acceptance.batchnorm(rows(0.5, 0.9, 1.0, 0.1)).passed
    # large no-BN tails do not count when the mean absolute value is lower without BN
    assert not acceptance.batchnorm(rows(1.0, 0.2, 1.2, 2.5)).passed
