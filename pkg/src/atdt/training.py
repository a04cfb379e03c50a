"""Losses and training loops for task networks, the transfer network, and the
multi-task comparator."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .metrics import ConfusionMatrix, DepthAccumulator, accumulate, seg_metrics
from .nets import Module, MultiTaskNetwork, TaskNetwork, TransferNet
from .optim import AdamState, NonFiniteGradient, adam_step, zero_grad
from .scenegen import D_MAX, D_MIN, NUM_CLASSES, Split
from .tensor import (
    ContractError,
    Tensor,
    batch_slice,
    cross_entropy2d,
    masked_l1,
    mean_all,
    no_grad,
    sqrt,
    square,
    sum_all,
)

log = logging.getLogger(__name__)

SEG = "seg"
DEPTH = "depth"
TASKS = (SEG, DEPTH)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: Path | None = None, step: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 500
    eval_batch: int = 25

    def validate(self, uses_batchnorm: bool = True) -> None:
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.batch_size < 1 or (uses_batchnorm and self.batch_size < 2):
            raise ContractError("batch_size must be >= 2 when batch norm runs in train mode")
        if self.eval_every < 1:
            raise ContractError("eval_every must be positive")


@dataclass
class LossRecord:
    step: int
    train_loss: float
    val: dict[str, float] = field(default_factory=dict)


def out_channels(task: str) -> int:
    if task == SEG:
        return NUM_CLASSES
    if task == DEPTH:
        return 1
    raise ContractError(f"unknown task {task!r}")


# ------------------------------------------------------------------ losses
def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy. ``labels`` is N x 1 x H x W (or N x H x W) integer ids."""
    labels = np.asarray(labels)
    if labels.ndim == 4:
        labels = labels[:, 0]
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label ids must lie in [0, {k - 1}]")
    return cross_entropy2d(logits, labels.astype(np.int64))


def depth_loss(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor:
    """Masked L1 in normalized depth units: sum(|pred - target| * mask) / sum(mask)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    mask = np.ones_like(target) if valid_mask is None else np.asarray(valid_mask, dtype=np.float64)
    if mask.sum() <= 0:
        raise ContractError("depth_loss needs at least one valid pixel")
    return masked_l1(pred, target, mask)


def transfer_loss(g_out: Tensor, target_feat: Tensor | np.ndarray, kind: str = "mse") -> Tensor:
    """Feature reconstruction error. The target never receives gradient.

    ``kind="mse"`` is squared L2 divided by the element count; ``kind="l2"`` is
    the plain Euclidean norm of the difference.
    """
    target = target_feat.data if isinstance(target_feat, Tensor) else np.asarray(target_feat)
    if g_out.shape != target.shape:
        raise ContractError(f"transfer output {g_out.shape} and target {target.shape} differ")
    sq = square(g_out - Tensor(target))
    if kind == "mse":
        return mean_all(sq)
    if kind == "l2":
        return sqrt(sum_all(sq))
    raise ContractError(f"unknown transfer loss kind {kind!r}")


# -------------------------------------------------------------- prediction
def predict_batches(fn: Callable[[Tensor], Tensor], images: np.ndarray, batch: int = 25) -> np.ndarray:
    outs = []
    with no_grad():
        for lo in range(0, len(images), batch):
            outs.append(fn(Tensor(images[lo : lo + batch])).data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def to_prediction(task: str, raw: np.ndarray) -> np.ndarray:
    """Network output -> label map (seg) or clamped world-unit depth (depth)."""
    if task == SEG:
        return raw.argmax(axis=1)[:, None]
    return np.clip(raw * D_MAX, D_MIN, D_MAX)


def evaluate_outputs(task: str, raw: np.ndarray, split: Split) -> dict[str, float]:
    pred = to_prediction(task, raw)
    if task == SEG:
        cm = accumulate(ConfusionMatrix(NUM_CLASSES), pred, split.labels)
        m = seg_metrics(cm)
        out = {"miou": m.miou, "acc": m.acc}
        for i, v in enumerate(m.per_class_iou):
            out[f"iou_{i}"] = float("nan") if v is None else v
        return out
    # depth is always scored against ground truth; every rendered pixel is valid
    acc = DepthAccumulator(D_MIN, D_MAX)
    acc.update(pred, split.depth)
    return acc.result().to_dict()


def evaluate(task: str, fn: Callable[[Tensor], Tensor], split: Split, batch: int = 25) -> dict[str, float]:
    return evaluate_outputs(task, predict_batches(fn, split.images, batch), split)


def primary_metric(task: str) -> str:
    return "miou" if task == SEG else "abs_rel"


# ------------------------------------------------------------------ loops
def _batch_sources(rng: np.random.Generator, sources: Sequence[Split], batch_size: int):
    """Index arrays for one batch; with two sources the batch is split evenly."""
    k = len(sources)
    sizes = [batch_size // k + (1 if i < batch_size % k else 0) for i in range(k)]
    return [rng.integers(0, len(s), size=n) for s, n in zip(sources, sizes)]


def _stack(sources: Sequence[Split], picks: Sequence[np.ndarray]):
    images = np.concatenate([s.images[i] for s, i in zip(sources, picks)])
    labels = np.concatenate([s.labels[i] for s, i in zip(sources, picks)])
    depth = np.concatenate([s.depth[i] for s, i in zip(sources, picks)])
    valid = np.concatenate([s.valid[i] for s, i in zip(sources, picks)])
    return images, labels, depth, valid


def _loss_for(task: str, out: Tensor, labels, depth, valid) -> Tensor:
    if task == SEG:
        return segmentation_loss(out, labels)
    return depth_loss(out, depth / D_MAX, valid)


class _Guard:
    """Keeps the last finite state and converts NaN/inf into TrainingAborted."""

    def __init__(self, module: Module, checkpoint_dir: Path | None, tag: str):
        self.module = module
        self.dir = checkpoint_dir
        self.tag = tag
        self.good_state = module.state_dict()
        self.good_path: Path | None = None
        self.good_step = 0

    def commit(self, step: int) -> None:
        self.good_state = self.module.state_dict()
        self.good_step = step
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            path = self.dir / f"{self.tag}_step{step:06d}.ckpt"
            checkpoint.save(path, self.good_state)
            self.good_path = path

    def abort(self, step: int, why: str):
        self.module.load_state_dict(self.good_state)
        raise TrainingAborted(f"{self.tag}: {why} at step {step}; restored step {self.good_step}",
                              self.good_path, step)


def _run_loop(module: Module, step_loss: Callable[[np.random.Generator], Tensor], cfg: TrainConfig,
              evaluate_fn: Callable[[], dict[str, float]] | None, checkpoint_dir: Path | None,
              tag: str) -> list[LossRecord]:
    rng = np.random.default_rng(cfg.seed)
    params = module.parameters()
    state = AdamState(lr=cfg.lr)
    guard = _Guard(module, checkpoint_dir, tag)
    records: list[LossRecord] = []
    for step in range(1, cfg.steps + 1):
        module.train()
        loss = step_loss(rng)
        value = float(loss.data)
        if not np.isfinite(value):
            guard.abort(step, "non-finite loss")
        zero_grad(params)
        loss.backward()
        try:
            adam_step(params, state)
        except NonFiniteGradient as exc:
            guard.abort(step, str(exc))
        rec = LossRecord(step, value)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            module.eval()
            if evaluate_fn is not None:
                rec.val = evaluate_fn()
            guard.commit(step)
            log.info("%s step %d loss %.4f %s", tag, step, value, rec.val)
        records.append(rec)
    zero_grad(params)
    module.eval()
    return records


def train_task_network(net: TaskNetwork, sources: Sequence[Split], task: str, cfg: TrainConfig,
                       val: Split | None = None, checkpoint_dir: str | Path | None = None,
                       tag: str = "net") -> tuple[TaskNetwork, list[LossRecord]]:
    """Supervised training on one or two domains (two: every batch is half A, half B)."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    if net.out_channels != out_channels(task):
        raise ContractError(f"network has {net.out_channels} outputs, task {task} needs {out_channels(task)}")
    if not 1 <= len(sources) <= 2:
        raise ContractError("train_task_network takes one or two domains")
    cfg.validate(net.use_batchnorm)

    def step_loss(rng):
        picks = _batch_sources(rng, sources, cfg.batch_size)
        images, labels, depth, valid = _stack(sources, picks)
        return _loss_for(task, net(Tensor(images)), labels, depth, valid)

    evaluate_fn = (lambda: evaluate(task, net, val, cfg.eval_batch)) if val is not None else None
    records = _run_loop(net, step_loss, cfg, evaluate_fn,
                        Path(checkpoint_dir) if checkpoint_dir else None, tag)
    return net, records


def encode_all(net: TaskNetwork, images: np.ndarray, level: int, batch: int = 25) -> np.ndarray:
    net.eval()
    return predict_batches(lambda x: net.encode(x, level), images, batch)


def train_transfer(g: TransferNet, net1: TaskNetwork, net2: TaskNetwork, train_a: Split, cfg: TrainConfig,
                   level: int = 4, val_a: Split | None = None, loss_kind: str = "mse",
                   checkpoint_dir: str | Path | None = None, tag: str = "G",
                   source_net: TaskNetwork | None = None) -> tuple[TransferNet, list[LossRecord]]:
    """Fit G so that G(E1(x_A)) reconstructs E2(x_A).

    Both encoders run once, frozen in eval mode, to precompute the feature pairs;
    no gradient ever reaches them. ``source_net`` overrides net1 as the feature
    source (used by the non-shared encoder ablation).
    """
    cfg.validate(True)
    src = source_net if source_net is not None else net1
    feats1 = encode_all(src, train_a.images, level, cfg.eval_batch)
    feats2 = encode_all(net2, train_a.images, level, cfg.eval_batch)
    if val_a is not None:
        v1 = encode_all(src, val_a.images, level, cfg.eval_batch)
        v2 = encode_all(net2, val_a.images, level, cfg.eval_batch)

    def step_loss(rng):
        idx = rng.integers(0, len(feats1), size=cfg.batch_size)
        return transfer_loss(g(Tensor(feats1[idx])), feats2[idx], loss_kind)

    def evaluate_fn():
        return {"transfer_loss": feature_loss(g, v1, v2, cfg.eval_batch)}

    records = _run_loop(g, step_loss, cfg, evaluate_fn if val_a is not None else None,
                        Path(checkpoint_dir) if checkpoint_dir else None, tag)
    return g, records


def feature_loss(g: TransferNet, f1: np.ndarray, f2: np.ndarray, batch: int = 25) -> float:
    """Element-mean squared reconstruction error over a whole feature set."""
    g.eval()
    out = predict_batches(g, f1, batch)
    return float(np.mean((out - f2) ** 2))


def train_multitask(net: MultiTaskNetwork, t1_sources: Sequence[Split], t2_source: Split,
                    task1: str, task2: str, cfg: TrainConfig, checkpoint_dir: str | Path | None = None,
                    tag: str = "multitask") -> tuple[MultiTaskNetwork, list[LossRecord]]:
    """Joint training with equal loss weights: T1 on every batch image (A and B),
    T2 only on the A half of the batch."""
    cfg.validate(True)
    if t1_sources[0] is not t2_source:
        raise ContractError("T2 supervision must come from the first (domain A) source")

    def step_loss(rng):
        picks = _batch_sources(rng, t1_sources, cfg.batch_size)
        images, labels, depth, valid = _stack(t1_sources, picks)
        n_a = len(picks[0])
        out1, out2 = net(Tensor(images))
        l1 = _loss_for(task1, out1, labels, depth, valid)
        l2 = _loss_for(task2, batch_slice(out2, 0, n_a), labels[:n_a], depth[:n_a], valid[:n_a])
        return l1 + l2

    records = _run_loop(net, step_loss, cfg, None, Path(checkpoint_dir) if checkpoint_dir else None, tag)
    return net, records


def write_records_csv(path: str | Path, records: Sequence[LossRecord]) -> None:
    keys: list[str] = []
    for r in records:
        for k in r.val:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", *keys])
        for r in records:
            w.writerow([r.step, repr(r.train_loss), *[repr(r.val[k]) if k in r.val else "" for k in keys]])
