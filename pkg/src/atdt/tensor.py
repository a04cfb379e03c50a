"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records a closure on its output that maps the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. All arithmetic runs in float64 so that central finite
differences remain a usable correctness oracle.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ContractError(ValueError):
    """Raised when an op is called with arguments that violate its contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # ``name`` is the parameter path for leaves owned by a network
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``self`` must be a scalar. Calling twice without zeroing accumulates.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------- elementwise
def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def batch_slice(a: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` along the leading (batch) axis."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[lo:hi] = g
        return (full,)

    return _make(a.data[lo:hi].copy(), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(tuple(shape))
    if out.size != a.size:
        raise ContractError(f"cannot reshape {src} to {shape}")
    return _make(out.copy(), (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------- conv2d
def _conv_out(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _taps(k: int, dilation: int) -> list[tuple[int, int]]:
    return [(i * dilation, j * dilation) for i in range(k) for j in range(k)]


def _pad_nhwc(a: np.ndarray, padding: int) -> np.ndarray:
    """NCHW array -> zero-padded NHWC copy."""
    n, c, h, w = a.shape
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=DTYPE)
    out[:, padding : padding + h, padding : padding + w, :] = a.transpose(0, 2, 3, 1)
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Padded NHWC input -> (N*ho*wo, k*k*C) patch matrix via one copy of a strided window view."""
    n, c = xp.shape[0], xp.shape[3]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, k, k, c),
        (s0, stride * s1, stride * s2, dilation * s1, dilation * s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``padding`` defaults to ``dilation * (k - 1) // 2`` ("same" for stride 1).
    Internally im2col runs in NHWC order so each kernel tap is one strided copy.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ContractError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh != kw or kh % 2 == 0:
        raise ContractError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if stride not in (1, 2) or dilation not in (1, 2):
        raise ContractError(f"stride and dilation must be 1 or 2, got {stride}, {dilation}")
    if bias is not None and bias.shape != (f,):
        raise ContractError(f"bias shape {bias.shape} does not match {f} filters")
    k = kh
    if padding is None:
        padding = dilation * (k - 1) // 2
    ho = _conv_out(h, k, stride, dilation, padding)
    wo = _conv_out(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d output would be empty for input {x.shape}")

    xp = _pad_nhwc(x.data, padding)
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    wd = weight.data
    wmat = wd.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g: np.ndarray):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gmat.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2))
        gb = gmat.sum(axis=0) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # adjoint of a stride-1 "same" correlation is a correlation of g with the
                # spatially flipped, channel-transposed kernel
                gcols = _im2col(_pad_nhwc(g, padding), k, 1, dilation, h, w)
                wflip = wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * f, c)
                gx = np.ascontiguousarray((gcols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                hp, wp = xp.shape[1:3]
                rs, cs = (ho - 1) * stride + 1, (wo - 1) * stride + 1
                gc = (gmat @ wmat).reshape(n, ho, wo, k * k, c)
                gxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
                for t, (r0, c0) in enumerate(_taps(k, dilation)):
                    gxp[:, r0 : r0 + rs : stride, c0 : c0 + cs : stride, :] += gc[:, :, :, t, :]
                gx = np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _make(out, parents, lambda g: backward(g)[:2])
    return _make(out, parents, backward)


# ------------------------------------------------------------ batch norm
class BatchNormStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
                 training: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics (biased variance for normalization,
    unbiased for the running estimate) and updates ``stats`` in place.
    """
    if x.ndim != 4:
        raise ContractError(f"batch_norm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"gamma/beta must have shape ({c},)")
    xd = x.data
    m = n * h * w
    if training:
        if m < 2:
            raise ContractError("batch_norm2d in train mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = stats.momentum
        stats.mean *= 1.0 - mom
        stats.mean += mom * mu
        stats.var *= 1.0 - mom
        stats.var += mom * var * (m / (m - 1))
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd, bd = gamma.data, beta.data
    out = xhat * gd[None, :, None, None] + bd[None, :, None, None]

    def backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        if training:
            gxhat = g * gd[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = g * (gd * inv)[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# ------------------------------------------------------- bilinear upsample
@functools.lru_cache(maxsize=None)
def _up_matrix(n: int) -> np.ndarray:
    """(2n x n) linear 2x interpolation with half-pixel centers and edge clamp:
    row 2i = 0.75 e_i + 0.25 e_(i-1), row 2i+1 = 0.75 e_i + 0.25 e_(i+1)."""
    u = np.zeros((2 * n, n), dtype=DTYPE)
    for i in range(n):
        u[2 * i, i] += 0.75
        u[2 * i, max(i - 1, 0)] += 0.25
        u[2 * i + 1, i] += 0.75
        u[2 * i + 1, min(i + 1, n - 1)] += 0.25
    u.setflags(write=False)
    return u


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling, align_corners=False convention."""
    if x.ndim != 4:
        raise ContractError(f"bilinear_upsample2x expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    uh, uw = _up_matrix(h), _up_matrix(w)
    out = uh @ (x.data.reshape(-1, w) @ uw.T).reshape(n, c, h, 2 * w)

    def backward(g: np.ndarray):
        return (((uh.T @ g).reshape(-1, 2 * w) @ uw).reshape(n, c, h, w),)

    return _make(np.ascontiguousarray(out), (x,), backward)


# --------------------------------------------------------------- losses
def cross_entropy2d(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label]. ``labels`` is N x H x W int."""
    n, k, h, w = logits.shape
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    count = n * h * w
    loss = -(logp * onehot).sum() / count
    probs = e / s
    return _make(np.array(loss), (logits,), lambda g: ((probs - onehot) * (float(g) / count),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return mean_all(square(d))


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    denom = float(mask.sum())
    diff = pred.data - target
    loss = float((np.abs(diff) * mask).sum() / denom)
    sign = np.sign(diff) * mask / denom
    return _make(np.array(loss), (pred,), lambda g: (sign * float(g),))


class Parameter(Tensor):
    """A trainable leaf tensor named by its module path, e.g. ``enc.stage2.conv1.w``."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
