"""Segmentation and depth evaluation metrics.

mIoU follows the Cityscapes convention of a global confusion matrix with the
mean taken over classes that occur in the ground truth. Depth metrics are the
usual Abs Rel / Sq Rel / RMSE / RMSE log / delta thresholds, computed on valid
pixels after clamping predictions into the evaluation range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ContractError

DELTA_BASE = 1.25


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray,
               ignore_mask: np.ndarray | None = None) -> ConfusionMatrix:
    """Return ``cm`` plus one count per non-ignored pixel. ``ignore_mask`` is True where ignored."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ContractError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
    if ignore_mask is not None:
        keep = ~np.asarray(ignore_mask, dtype=bool).ravel()
        pred, gt = pred[keep], gt[keep]
    k = cm.num_classes
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{name} label outside [0, {k - 1}]")
    counts = np.bincount(gt.astype(np.int64) * k + pred.astype(np.int64), minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, cm.counts + counts)


@dataclass
class SegMetrics:
    miou: float
    acc: float
    per_class_iou: list[float | None]  # None marks a class absent from the ground truth

    def to_dict(self) -> dict:
        return asdict(self)


def seg_metrics(cm: ConfusionMatrix) -> SegMetrics:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    tp = np.diag(c)
    gt_count = c.sum(axis=1)
    pred_count = c.sum(axis=0)
    union = gt_count + pred_count - tp
    per_class: list[float | None] = []
    present = []
    for i in range(cm.num_classes):
        if gt_count[i] > 0:
            iou = float(tp[i] / union[i])
            per_class.append(iou)
            present.append(iou)
        else:
            per_class.append(None)
    return SegMetrics(miou=float(math.fsum(present) / len(present)), acc=float(tp.sum() / total),
                      per_class_iou=per_class)


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> dict:
        return asdict(self)


DEPTH_METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


def _fsum(chunks: list[np.ndarray]) -> float:
    return math.fsum(np.concatenate(chunks).tolist()) if chunks else 0.0


@dataclass
class DepthAccumulator:
    """Streaming depth metrics.

    Per-pixel terms are kept per chunk and reduced once with math.fsum, which is
    correctly rounded, so chunked and single-shot evaluation agree exactly.
    """

    d_min: float = 1.0
    d_max: float = 100.0
    n: int = 0
    parts: dict[str, list[np.ndarray]] = field(default_factory=lambda: {k: [] for k in ("abs", "sq", "se", "sle")})
    hits: list[int] = field(default_factory=lambda: [0, 0, 0])

    def update(self, pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None) -> None:
        pred = np.asarray(pred, dtype=np.float64).ravel()
        gt = np.asarray(gt, dtype=np.float64).ravel()
        if pred.shape != gt.shape:
            raise ContractError("prediction and ground truth sizes differ")
        if valid_mask is not None:
            keep = np.asarray(valid_mask).ravel() > 0
            pred, gt = pred[keep], gt[keep]
        if gt.size == 0:
            return
        if (gt <= 0).any():
            raise ContractError("ground-truth depth must be positive on valid pixels")
        p = np.clip(pred, self.d_min, self.d_max)
        diff = p - gt
        ratio = np.maximum(p / gt, gt / p)
        self.n += gt.size
        self.parts["abs"].append(np.abs(diff) / gt)
        self.parts["sq"].append(diff * diff / gt)
        self.parts["se"].append(diff * diff)
        lg = np.log(p) - np.log(gt)
        self.parts["sle"].append(lg * lg)
        for a in range(3):
            self.hits[a] += int((ratio < DELTA_BASE ** (a + 1)).sum())

    def result(self) -> DepthMetrics:
        if self.n == 0:
            raise ContractError("no valid pixels to evaluate")
        n = self.n
        return DepthMetrics(
            abs_rel=_fsum(self.parts["abs"]) / n,
            sq_rel=_fsum(self.parts["sq"]) / n,
            rmse=math.sqrt(_fsum(self.parts["se"]) / n),
            rmse_log=math.sqrt(_fsum(self.parts["sle"]) / n),
            delta1=self.hits[0] / n,
            delta2=self.hits[1] / n,
            delta3=self.hits[2] / n,
        )


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None,
                  clamp_range: tuple[float, float] = (1.0, 100.0)) -> DepthMetrics:
    acc = DepthAccumulator(*clamp_range)
    acc.update(pred, gt, valid_mask)
    return acc.result()
