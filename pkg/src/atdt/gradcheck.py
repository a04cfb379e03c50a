"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index: tuple, h: float = 1e-5) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def max_rel_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], rng: np.random.Generator,
                  samples: int = 200, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    Up to ``samples`` coordinates are drawn across ``tensors``. The relative error
    is |a - n| / max(|a|, |n|, 1e-8), so entries where both are ~0 do not blow up.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value() -> float:
        return float(np.asarray(loss_fn().data).reshape(-1)[0])

    sizes = np.array([t.size for t in tensors])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), tensors[k].shape)
        num = numeric_grad(value, tensors[k].data, idx, h)
        ana = float(analytic[k][idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ cases
# Each builder draws one random instance and returns (loss_fn, tensors to perturb).
# Inputs are kept at least 1e-3 away from kinks (ReLU, |.|, the L1 loss) because a
# central difference straddling a kink measures the wrong slope.
def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _off_kinks(rng: np.random.Generator, *shape: int) -> Tensor:
    x = rng.normal(size=shape)
    x[np.abs(x) < 1e-3] = 0.5
    return Tensor(x, requires_grad=True)


def _probe(rng: np.random.Generator, out: Tensor) -> Tensor:
    return Tensor(rng.normal(size=out.shape))


def _conv_case(rng):
    stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x, w, b = _rand(rng, 2, c, 5, 6), _rand(rng, f, c, k, k), _rand(rng, f)
    r = _probe(rng, T.conv2d(x, w, b, stride=stride, dilation=dil))
    return (lambda: T.sum_all(T.conv2d(x, w, b, stride=stride, dilation=dil) * r)), [x, w, b]


def _bn_case(rng, training: bool):
    x, gamma, beta = _rand(rng, 3, 2, 3, 4), _rand(rng, 2), _rand(rng, 2)
    stats = T.BatchNormStats(2)
    stats.var[:] = rng.uniform(0.5, 2.0, size=2)
    r = _probe(rng, x)
    # running-stat updates in train mode do not feed back into the train-mode output
    return (lambda: T.sum_all(T.batch_norm2d(x, gamma, beta, stats, training=training) * r)), [x, gamma, beta]


def _upsample_case(rng):
    x = _rand(rng, 2, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    r = _probe(rng, T.bilinear_upsample2x(x))
    return (lambda: T.sum_all(T.bilinear_upsample2x(x) * r)), [x]


def _relu_case(rng):
    x = _off_kinks(rng, 3, 7)
    r = _probe(rng, x)
    return (lambda: T.sum_all(T.relu(x) * r)), [x]


def _abs_case(rng):
    x = _off_kinks(rng, 4, 5)
    r = _probe(rng, x)
    return (lambda: T.sum_all(T.abs_(x) * r)), [x]


def _arith_case(rng):
    # add / sub / mul / neg with broadcasting, then square, sqrt and mean
    a, b, c = _rand(rng, 3, 4), _rand(rng, 1, 4), _rand(rng, 3, 1)
    return (lambda: T.sqrt(T.mean_all(T.square(a * b - c + (-a))) + 1.0)), [a, b, c]


def _slice_reshape_case(rng):
    x = _rand(rng, 4, 3, 2)
    lo = int(rng.integers(0, 3))
    hi = int(rng.integers(lo + 1, 5))
    r = Tensor(rng.normal(size=((hi - lo), 6)))
    return (lambda: T.sum_all(T.flatten(T.batch_slice(x, lo, hi)) * r).reshape(1)), [x]


def _cross_entropy_case(rng):
    logits = _rand(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    return (lambda: T.cross_entropy2d(logits, labels)), [logits]


def _masked_l1_case(rng):
    pred = _rand(rng, 2, 1, 3, 3)
    target = pred.data + rng.choice([-1.0, 1.0], size=pred.shape) * rng.uniform(1e-2, 1.0, size=pred.shape)
    mask = (rng.uniform(size=pred.shape) > 0.3).astype(float)
    mask.flat[0] = 1.0
    return (lambda: T.masked_l1(pred, target, mask)), [pred]


def _mse_case(rng):
    a, b = _rand(rng, 2, 3, 2, 2), _rand(rng, 2, 3, 2, 2)
    return (lambda: T.mse(a, b)), [a, b]


def _residual_case(rng):
    while True:
        x, w = _rand(rng, 2, 2, 4, 4), _rand(rng, 2, 2, 3, 3)
        if np.abs(T.conv2d(x, w, None).data).min() > 1e-3:
            break
    r = _probe(rng, x)
    return (lambda: T.sum_all((T.relu(T.conv2d(x, w, None)) + x) * r)), [x, w]


GRADIENT_CASES: dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]] = {
    "conv2d": _conv_case,
    "batch_norm2d_train": lambda rng: _bn_case(rng, True),
    "batch_norm2d_eval": lambda rng: _bn_case(rng, False),
    "bilinear_upsample2x": _upsample_case,
    "relu": _relu_case,
    "abs": _abs_case,
    "add_sub_mul_neg_square_sqrt_mean": _arith_case,
    "batch_slice_flatten_reshape": _slice_reshape_case,
    "cross_entropy2d": _cross_entropy_case,
    "masked_l1": _masked_l1_case,
    "mse": _mse_case,
    "residual_block": _residual_case,
}


def check_case(name: str, cases: int = 20, samples: int = 40, first_seed: int = 1000) -> float:
    """Worst relative error of ``name`` over ``cases`` random instances."""
    worst = 0.0
    for s in range(cases):
        rng = np.random.default_rng(first_seed + s)
        fn, tensors = GRADIENT_CASES[name](rng)
        worst = max(worst, max_rel_error(fn, tensors, rng, samples=samples))
    return worst
