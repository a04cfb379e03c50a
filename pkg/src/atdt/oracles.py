"""Deliberately naive reference implementations used to cross-check the fast
kernels. Pure Python loops, no shared code with ``metrics`` or ``tensor``."""

from __future__ import annotations

import math

import numpy as np


def seg_metrics_bruteforce(pred, gt, num_classes: int, ignore=None) -> tuple[float, float, list]:
    """(mIoU over classes present in gt, pixel accuracy, per-class IoU or None)."""
    pred = [int(v) for v in np.ravel(pred)]
    gt = [int(v) for v in np.ravel(gt)]
    ign = [False] * len(gt) if ignore is None else [bool(v) for v in np.ravel(ignore)]
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    correct = total = 0
    for p, g, skip in zip(pred, gt, ign):
        if skip:
            continue
        total += 1
        if p == g:
            tp[g] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[g] += 1
    ious: list = []
    for c in range(num_classes):
        if tp[c] + fn[c] == 0:
            ious.append(None)
        else:
            ious.append(tp[c] / (tp[c] + fp[c] + fn[c]))
    present = [v for v in ious if v is not None]
    return math.fsum(present) / len(present), correct / total, ious


def seg_metrics_from_counts(counts) -> tuple[float, float]:
    """mIoU and accuracy straight from a confusion matrix (rows = ground truth)."""
    k = len(counts)
    ious = []
    for c in range(k):
        row = sum(counts[c])
        if row == 0:
            continue
        col = sum(counts[r][c] for r in range(k))
        ious.append(counts[c][c] / (row + col - counts[c][c]))
    total = sum(sum(r) for r in counts)
    return math.fsum(ious) / len(ious), sum(counts[c][c] for c in range(k)) / total


def depth_metrics_bruteforce(pred, gt, valid=None, d_min: float = 1.0, d_max: float = 100.0) -> dict:
    pred = [float(v) for v in np.ravel(pred)]
    gt = [float(v) for v in np.ravel(gt)]
    valid = [True] * len(gt) if valid is None else [bool(v) for v in np.ravel(valid)]
    terms = {"abs": [], "sq": [], "se": [], "sle": []}
    hits = [0, 0, 0]
    n = 0
    for p, g, ok in zip(pred, gt, valid):
        if not ok:
            continue
        p = min(max(p, d_min), d_max)
        n += 1
        terms["abs"].append(abs(p - g) / g)
        terms["sq"].append((p - g) ** 2 / g)
        terms["se"].append((p - g) ** 2)
        terms["sle"].append((math.log(p) - math.log(g)) ** 2)
        r = max(p / g, g / p)
        for a in range(3):
            if r < 1.25 ** (a + 1):
                hits[a] += 1
    return {
        "abs_rel": math.fsum(terms["abs"]) / n,
        "sq_rel": math.fsum(terms["sq"]) / n,
        "rmse": math.sqrt(math.fsum(terms["se"]) / n),
        "rmse_log": math.sqrt(math.fsum(terms["sle"]) / n),
        "delta1": hits[0] / n,
        "delta2": hits[1] / n,
        "delta3": hits[2] / n,
    }


def conv2d_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, dilation: int,
                padding: int) -> np.ndarray:
    """Direct cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for u in range(k):
                for v in range(k):
                    patch = xp[:, :, i * stride + u * dilation, j * stride + v * dilation]
                    out[:, :, i, j] += patch @ w[:, :, u, v].T
    if b is not None:
        out += b[None, :, None, None]
    return out
