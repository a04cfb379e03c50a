"""Acceptance experiments: the two direction plans, a resumable per-seed cache,
and the directional checks evaluated on seed means.

A seed's results are reused only when its manifest holds exactly the config and
arm list that would be run now; anything else is recomputed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ExperimentPlan, to_dict

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2, 3, 4)
DEP2SEM_ARMS = ["atdt", "baseline", "oracle", "levels", "non_shared", "no_bn", "proxy"]
SEM2DEP_ARMS = ["atdt", "baseline", "oracle"]
PIPELINE_BUDGET_SECONDS = 600.0
RERUN_DIR = "rerun"


def dep2sem_plan(seeds=SEEDS) -> ExperimentPlan:
    return ExperimentPlan(name="dep2sem", direction="dep2sem", seeds=list(seeds)).validate()


def sem2dep_plan(seeds=SEEDS) -> ExperimentPlan:
    return ExperimentPlan(name="sem2dep", direction="sem2dep", seeds=list(seeds)).validate()


def _seed_config(plan: ExperimentPlan, seed: int) -> dict:
    cfg = to_dict(plan)
    cfg["seeds"] = [seed]
    return cfg


def cached_seed(plan: ExperimentPlan, seed: int, arms: list[str], out: Path) -> tuple[list[dict], dict] | None:
    run_dir = out / plan.name / str(seed)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        records = json.loads((run_dir / "metrics.json").read_text())
        timings = json.loads((run_dir / "timings.json").read_text())
    except (OSError, json.JSONDecodeError):
        return None
    # round-trip through JSON so tuples and lists compare equal
    wanted = json.loads(json.dumps(_seed_config(plan, seed)))
    if manifest.get("config") != wanted or manifest.get("arms") != list(arms):
        return None
    return records, timings


def ensure_runs(plan: ExperimentPlan, arms: list[str], out: str | Path) -> pipeline.RunResult:
    """Load every seed from ``out`` when current, otherwise run it there."""
    out = Path(out)
    result = pipeline.RunResult(plan)
    for seed in plan.seeds:
        got = cached_seed(plan, seed, arms, out)
        if got is None:
            log.info("running %s seed %d", plan.name, seed)
            records, timings, _ = pipeline.run_seed(plan, seed, arms, out)
        else:
            records, timings = got
        result.records.extend(records)
        result.timings[seed] = timings
        result.run_dirs[seed] = out / plan.name / str(seed)
    return result


def ensure_rerun(run_dir: Path, out: str | Path) -> Path:
    """Re-execute ``run_dir`` from its manifest into ``out/rerun`` (cached by manifest bytes)."""
    manifest = run_dir / "manifest.json"
    target = Path(out) / RERUN_DIR
    doc = json.loads(manifest.read_text())
    again = target / doc["config"]["name"] / str(doc["seed"])
    copy = again / "manifest.json"
    if not (copy.exists() and copy.read_bytes() == manifest.read_bytes() and (again / "metrics.json").exists()):
        pipeline.rerun_manifest(manifest, target)
    return again


# ------------------------------------------------------------------ checks
@dataclass
class Verdict:
    number: int
    title: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.title}: {self.detail}"


def _mean(res: pipeline.RunResult, method: str, metric: str, domain: str = "B", variant: str = "default") -> float:
    vals = res.values(method, metric, domain, variant)
    if len(vals) != len(res.plan.seeds):
        return float("nan")
    return float(np.mean(vals))


def dep2sem_gain(res: pipeline.RunResult, times: dict[int, float]) -> Verdict:
    gain = _mean(res, "atdt", "miou") - _mean(res, "baseline", "miou")
    slowest = max(times.values())
    ok = gain >= 0.02 and slowest < PIPELINE_BUDGET_SECONDS
    return Verdict(3, "Dep->Sem gain", ok,
                   f"mIoU(AT/DT,B) - mIoU(baseline,B) = {100 * gain:+.2f} pts (need >= +2); "
                   f"slowest pipeline {slowest:.0f} s (need < {PIPELINE_BUDGET_SECONDS:.0f})")


def sem2dep_gain(res: pipeline.RunResult) -> Verdict:
    a, b = _mean(res, "atdt", "abs_rel"), _mean(res, "baseline", "abs_rel")
    d_a, d_b = _mean(res, "atdt", "delta1"), _mean(res, "baseline", "delta1")
    rel = (b - a) / b
    ok = rel >= 0.10 and d_a > d_b
    return Verdict(4, "Sem->Dep gain", ok,
                   f"AbsRel {a:.4f} vs baseline {b:.4f} ({100 * rel:.1f}% better, need >= 10%); "
                   f"delta1 {d_a:.4f} vs {d_b:.4f}")


def ordering(dep2sem: pipeline.RunResult, sem2dep: pipeline.RunResult) -> Verdict:
    o, a, b = (_mean(dep2sem, m, "miou") for m in ("oracle", "atdt", "baseline"))
    od, ad, bd = (_mean(sem2dep, m, "abs_rel") for m in ("oracle", "atdt", "baseline"))
    ok = o >= a >= b and od <= ad <= bd
    return Verdict(5, "oracle >= AT/DT >= baseline", ok,
                   f"Dep->Sem mIoU {o:.4f} >= {a:.4f} >= {b:.4f}; Sem->Dep AbsRel {od:.4f} <= {ad:.4f} <= {bd:.4f}")


def level_trend(res: pipeline.RunResult) -> Verdict:
    cross = {lv: _mean(res, "atdt", "miou", "B", f"L{lv}") for lv in (1, 2, 3, 4)}
    within = {lv: _mean(res, "atdt", "miou", "A", f"L{lv}") for lv in (1, 2, 3, 4)}
    band = max(within.values()) - min(within.values())
    # accuracy band is reported for context only; the verdict uses the primary metric
    acc = [_mean(res, "atdt", "acc", "A", f"L{lv}") for lv in (1, 2, 3, 4)]
    ok = cross[4] >= cross[1] and band <= 0.10
    fmt = lambda d: " ".join(f"L{k}={v:.3f}" for k, v in d.items())
    return Verdict(6, "split-level trend", ok,
                   f"B mIoU {fmt(cross)} (need L4 >= L1); A mIoU {fmt(within)} band {100 * band:.1f} pts "
                   f"(need <= 10); A acc band {100 * (max(acc) - min(acc)):.1f} pts")


def shared_encoder(res: pipeline.RunResult) -> Verdict:
    s, n = _mean(res, "atdt", "miou"), _mean(res, "atdt", "miou", "B", "non_shared")
    return Verdict(7, "shared encoder", s - n >= 0.02,
                   f"B mIoU shared {s:.4f} vs disjoint {n:.4f} ({100 * (s - n):+.2f} pts, need >= +2)")


def batchnorm(res: pipeline.RunResult) -> Verdict:
    w, wo = _mean(res, "atdt", "miou"), _mean(res, "atdt", "miou", "B", "no_bn")
    def mag(stat, v):
        return float(np.mean([_mean(res, "feature_magnitude", stat, d, v) for d in ("A", "B")]))

    ok = w >= wo and mag("mean_abs", "bn") < mag("mean_abs", "no_bn")
    # rms is context only: it weighs the heavy tails that the mean absolute value hides
    return Verdict(8, "batch norm", ok,
                   f"B mIoU with BN {w:.4f} vs without {wo:.4f}; "
                   f"mean |feature| with BN {mag('mean_abs', 'bn'):.4f} vs without {mag('mean_abs', 'no_bn'):.4f}; "
                   f"rms {mag('rms', 'bn'):.4f} vs {mag('rms', 'no_bn'):.4f}")


def proxy_labels(res: pipeline.RunResult) -> Verdict:
    gain = _mean(res, "atdt", "miou", "B", "proxy") - _mean(res, "baseline", "miou")
    return Verdict(9, "proxy-label robustness", gain >= 0.01,
                   f"mIoU(AT/DT with proxy depth on B) - mIoU(baseline) = {100 * gain:+.2f} pts (need >= +1)")


def determinism(original: Path, rerun: Path) -> Verdict:
    same = (original / "metrics.json").read_bytes() == (rerun / "metrics.json").read_bytes()
    return Verdict(10, "determinism", same,
                   f"{original}/metrics.json {'==' if same else '!='} rerun from manifest")


def pipeline_seconds(res: pipeline.RunResult) -> dict[int, float]:
    """Data build plus the transfer arm, which trains N1, N2 and G and evaluates them."""
    return {s: t["data"] + t["arm/atdt"] for s, t in res.timings.items()}
