"""Fast end-to-end sanity checks: gradients, metric oracles, scene invariants.

Kernels are looked up through their modules at call time so a patched kernel is
what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gradcheck, metrics, scenegen
from .oracles import depth_metrics_bruteforce, seg_metrics_bruteforce

GRAD_TOL = 1e-4
METRIC_TOL = 1e-12


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def check_gradients(cases: int = 5) -> list[Check]:
    out = []
    for name in gradcheck.GRADIENT_CASES:
        worst = gradcheck.check_case(name, cases=cases, samples=30)
        out.append(Check(f"grad {name}", worst < GRAD_TOL, f"max rel err {worst:.2e}"))
    return out


def check_metrics(instances: int = 25) -> list[Check]:
    rng = np.random.default_rng(7)
    seg_err = depth_err = 0.0
    for _ in range(instances):
        k = int(rng.integers(2, 6))
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        gt = rng.integers(0, k, size=shape)
        pred = rng.integers(0, k, size=shape)
        cm = metrics.accumulate(metrics.ConfusionMatrix(k), pred, gt)
        got = metrics.seg_metrics(cm)
        miou, acc, _ = seg_metrics_bruteforce(pred, gt, k)
        seg_err = max(seg_err, abs(got.miou - miou), abs(got.acc - acc))

        g = rng.uniform(1, 100, size=shape)
        p = g * rng.uniform(0.5, 1.6, size=shape)
        dm = metrics.depth_metrics(p, g).to_dict()
        ref = depth_metrics_bruteforce(p, g)
        depth_err = max(depth_err, max(abs(dm[key] - ref[key]) for key in ref))
    hand = metrics.seg_metrics(metrics.ConfusionMatrix(2, np.array([[3, 1], [2, 4]])))
    hand_ok = abs(hand.miou - (0.5 + 4 / 7) / 2) < METRIC_TOL and abs(hand.acc - 0.7) < METRIC_TOL
    return [
        Check("seg metrics vs brute force", seg_err < METRIC_TOL, f"max err {seg_err:.1e}"),
        Check("depth metrics vs brute force", depth_err < METRIC_TOL, f"max err {depth_err:.1e}"),
        Check("hand confusion matrix", hand_ok, f"miou {hand.miou:.4f} acc {hand.acc:.4f}"),
    ]


def check_scenes(count: int = 6) -> list[Check]:
    problems = []
    for seed in range(count):
        scene = scenegen.generate_scene(seed)
        a = scenegen.render(scene, scenegen.STYLE_A)
        b = scenegen.render(scene, scenegen.STYLE_B)
        again = scenegen.render(scenegen.generate_scene(seed), scenegen.STYLE_A)
        if not np.array_equal(a.image, again.image):
            problems.append(f"seed {seed}: render not deterministic")
        if not (np.array_equal(a.depth, b.depth) and np.array_equal(a.labels, b.labels)):
            problems.append(f"seed {seed}: style changed geometry")
        if a.depth.min() < scenegen.D_MIN or a.depth.max() > scenegen.D_MAX:
            problems.append(f"seed {seed}: depth out of range")
        if not np.all(a.depth[a.labels == scenegen.SKY] == scenegen.D_MAX):
            problems.append(f"seed {seed}: sky not at far plane")
        if a.labels.min() < 0 or a.labels.max() >= scenegen.NUM_CLASSES:
            problems.append(f"seed {seed}: label out of range")
        if a.image.min() < 0 or a.image.max() > 1:
            problems.append(f"seed {seed}: image outside [0, 1]")
    return [Check("scene invariants", not problems, "; ".join(problems) or f"{count} scenes")]


def run_selftest(log: Callable[[str], None] = print) -> bool:
    t0 = time.perf_counter()
    checks = check_gradients() + check_metrics() + check_scenes()
    for c in checks:
        log(f"{'PASS' if c.ok else 'FAIL'}  {c.name:32s} {c.detail}")
    ok = all(c.ok for c in checks)
    log(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return ok
