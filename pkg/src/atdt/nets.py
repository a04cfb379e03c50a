"""Task networks N = D o E, the feature transfer network, and a multi-task comparator.

The encoder has four residual stages with output strides (2, 4, 8, 8) and
widths (16, 32, 64, 64); the last stage keeps stride 8 and dilates instead.
Splitting a task network at ``level`` L means E = stages 1..L and
D = stages L+1..4 followed by the upsampling decoder, so ``decode(encode(x, L), L)``
is exactly ``forward(x)`` for every L.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    BatchNormStats,
    ContractError,
    Parameter,
    Tensor,
    batch_norm2d,
    bilinear_upsample2x,
    conv2d,
    relu,
)

STAGE_STRIDES = (2, 4, 8, 8)
STAGE_WIDTHS = (16, 32, 64, 64)
DECODER_WIDTHS = (64, 32, 16)
LEVELS = (1, 2, 3, 4)


class Module:
    """Parameter container with named children, in the spirit of torch.nn.Module."""

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}{i + 1}", item

    def _own_params(self) -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield key, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._own_params():
            yield prefix + key, p
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, b in self._own_buffers():
            yield prefix + key, b
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def name_parameters(self, root: str) -> None:
        """Stamp each Parameter's ``name`` with its full path under ``root``."""
        for name, p in self.named_parameters(f"{root}."):
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, gain: float = 2.0):
        std = np.sqrt(gain / (cin * k * k))
        self.w = Parameter(rng.normal(0.0, std, size=(cout, cin, k, k)), "w")
        self.b = Parameter(np.zeros(cout), "b")
        self.stride = stride
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, dilation=self.dilation)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels), "gamma")
        self.beta = Parameter(np.zeros(channels), "beta")
        self.stats = BatchNormStats(channels)

    def _own_buffers(self):
        yield "running_mean", self.stats.mean
        yield "running_var", self.stats.var

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.stats, training=self.training)


class ConvBlock(Module):
    """conv -> [BN] -> ReLU"""

    def __init__(self, cin, cout, rng, k=3, stride=1, dilation=1, use_batchnorm=True):
        self.conv = Conv(cin, cout, k, rng, stride=stride, dilation=dilation)
        self.bn = BatchNorm(cout) if use_batchnorm else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return relu(y)


class ResidualBlock(Module):
    def __init__(self, cin, cout, rng, stride=1, dilation=1, use_batchnorm=True):
        self.conv1 = Conv(cin, cout, 3, rng, stride=stride, dilation=dilation)
        self.bn1 = BatchNorm(cout) if use_batchnorm else None
        self.conv2 = Conv(cout, cout, 3, rng, dilation=dilation)
        self.bn2 = BatchNorm(cout) if use_batchnorm else None
        self.proj = Conv(cin, cout, 1, rng, stride=stride, gain=1.0) if (stride != 1 or cin != cout) else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv1(x)
        if self.bn1 is not None:
            y = self.bn1(y)
        y = self.conv2(relu(y))
        if self.bn2 is not None:
            y = self.bn2(y)
        skip = self.proj(x) if self.proj is not None else x
        return relu(y + skip)


class Stage(Module):
    def __init__(self, blocks: list[Module]):
        self.block = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.block:
            x = b(x)
        return x


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, use_batchnorm: bool = True):
        w1, w2, w3, w4 = STAGE_WIDTHS
        bn = use_batchnorm
        self.stage = [
            Stage([ConvBlock(3, w1, rng, stride=2, use_batchnorm=bn), ResidualBlock(w1, w1, rng, use_batchnorm=bn)]),
            Stage([ResidualBlock(w1, w2, rng, stride=2, use_batchnorm=bn)]),
            Stage([ResidualBlock(w2, w3, rng, stride=2, use_batchnorm=bn)]),
            Stage([ResidualBlock(w3, w4, rng, dilation=2, use_batchnorm=bn)]),
        ]

    def run(self, x: Tensor, start: int, stop: int) -> Tensor:
        """Apply stages ``start+1 .. stop`` (1-based, so run(x, 0, L) is E at level L)."""
        for s in self.stage[start:stop]:
            x = s(x)
        return x


class Decoder(Module):
    """Alternating conv block + bilinear 2x upsampling from stride 8 back to full size, then a 1x1 head."""

    def __init__(self, out_channels: int, rng: np.random.Generator, use_batchnorm: bool = True):
        widths = (STAGE_WIDTHS[-1],) + DECODER_WIDTHS
        self.up = [
            ConvBlock(widths[i], widths[i + 1], rng, use_batchnorm=use_batchnorm)
            for i in range(len(DECODER_WIDTHS))
        ]
        self.head = Conv(DECODER_WIDTHS[-1], out_channels, 1, rng, gain=1.0)

    def __call__(self, f: Tensor) -> Tensor:
        for block in self.up:
            f = bilinear_upsample2x(block(f))
        return self.head(f)


def _check_level(level: int) -> None:
    if level not in LEVELS:
        raise ContractError(f"split level must be one of {LEVELS}, got {level}")


def feature_shape(level: int, batch: int, height: int, width: int) -> tuple[int, int, int, int]:
    _check_level(level)
    s = STAGE_STRIDES[level - 1]
    return (batch, STAGE_WIDTHS[level - 1], height // s, width // s)


class TaskNetwork(Module):
    """Encoder/decoder network for one dense task.

    ``out_channels`` is the number of classes for segmentation and 1 for depth;
    nothing else differs between the two task variants.
    """

    def __init__(self, out_channels: int, seed: int = 0, use_batchnorm: bool = True,
                 split_level: int = 4, name: str = "N"):
        _check_level(split_level)
        rng = np.random.default_rng(seed)
        self.out_channels = out_channels
        self.use_batchnorm = use_batchnorm
        self.split_level = split_level
        self.enc = Encoder(rng, use_batchnorm)
        self.dec = Decoder(out_channels, rng, use_batchnorm)
        self.name_parameters(name)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected N x 3 x H x W input, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ContractError(f"H and W must be divisible by 8, got {x.shape[2:]}")

    def encode(self, x: Tensor, level: int | None = None) -> Tensor:
        level = self.split_level if level is None else level
        _check_level(level)
        self._check_input(x)
        return self.enc.run(x, 0, level)

    def decode(self, f: Tensor, level: int | None = None) -> Tensor:
        level = self.split_level if level is None else level
        _check_level(level)
        c = STAGE_WIDTHS[level - 1]
        if f.ndim != 4 or f.shape[1] != c:
            raise ContractError(f"level-{level} features must have {c} channels, got {f.shape}")
        return self.dec(self.enc.run(f, level, 4))

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        return self.dec(self.enc.run(x, 0, 4))

    __call__ = forward


class TransferNet(Module):
    """Feature-to-feature map: two stride-2 convs down to 1/4 resolution, a middle
    block, then two upsample+conv blocks back to the input resolution."""

    def __init__(self, in_channels: int, out_channels: int | None = None, seed: int = 0,
                 use_batchnorm: bool = True, name: str = "G"):
        out_channels = in_channels if out_channels is None else out_channels
        rng = np.random.default_rng(seed)
        wide = 2 * in_channels
        bn = use_batchnorm
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.down = [
            ConvBlock(in_channels, wide, rng, stride=2, use_batchnorm=bn),
            ConvBlock(wide, wide, rng, stride=2, use_batchnorm=bn),
        ]
        self.mid = ConvBlock(wide, wide, rng, use_batchnorm=bn)
        self.up1 = ConvBlock(wide, wide, rng, use_batchnorm=bn)
        self.out = Conv(wide, out_channels, 3, rng, gain=1.0)
        self.name_parameters(name)

    def bottleneck(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.in_channels:
            raise ContractError(f"transfer input must have {self.in_channels} channels, got {f.shape}")
        if f.shape[2] % 4 or f.shape[3] % 4:
            raise ContractError(f"transfer input spatial size must be divisible by 4, got {f.shape[2:]}")
        for block in self.down:
            f = block(f)
        return self.mid(f)

    def forward(self, f: Tensor) -> Tensor:
        h = self.bottleneck(f)
        h = self.up1(bilinear_upsample2x(h))
        return self.out(bilinear_upsample2x(h))

    __call__ = forward


class MultiTaskNetwork(Module):
    """One shared encoder feeding two task decoders from the deepest features."""

    def __init__(self, out_channels_1: int, out_channels_2: int, seed: int = 0,
                 use_batchnorm: bool = True, name: str = "M"):
        rng = np.random.default_rng(seed)
        self.enc = Encoder(rng, use_batchnorm)
        self.dec1 = Decoder(out_channels_1, rng, use_batchnorm)
        self.dec2 = Decoder(out_channels_2, rng, use_batchnorm)
        self.name_parameters(name)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        f = self.enc.run(x, 0, 4)
        return self.dec1(f), self.dec2(f)

    __call__ = forward


def encode(net: TaskNetwork, x: Tensor, level: int | None = None) -> Tensor:
    return net.encode(x, level)


def decode(net: TaskNetwork, f: Tensor, level: int | None = None) -> Tensor:
    return net.decode(f, level)


def transfer(g: TransferNet, f1: Tensor) -> Tensor:
    return g(f1)
