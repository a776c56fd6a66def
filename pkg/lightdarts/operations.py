"""
Candidate operations of the light-DARTS search space.

Nine operations: the eight of the original DARTS space plus a max-feature-map
block. Every operation maps (N, C, H, W) to (N, C, ceil(H/s), ceil(W/s)).
"""

from enum import Enum
from typing import Callable, Dict

import numpy as np

from . import functional as F
from .exceptions import ShapeError
from .layers import ChannelNorm, Conv2d, Module
from .tensor import Tensor


class OpKind(str, Enum):
    """Candidate operations, in their fixed index order."""

    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    AVG_POOL_3X3 = "avg_pool_3x3"
    MAX_POOL_3X3 = "max_pool_3x3"
    SKIP_CONNECT = "skip_connect"
    ZERO = "zero"
    MAX_FEATURE_MAP = "max_feature_map"

    @property
    def op_index(self) -> int:
        return OP_NAMES.index(self.value)

    @classmethod
    def parse(cls, name: str) -> "OpKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown operation {name!r}; expected one of {OP_NAMES}") from None


OP_NAMES = tuple(kind.value for kind in OpKind)


class Operation(Module):
    """An OpInstance: one candidate operation with its own parameters."""

    kind: OpKind

    def __init__(self, channels: int, stride: int):
        super().__init__()
        self.channels = channels
        self.stride = stride


class Zero(Operation):
    kind = OpKind.ZERO

    def forward(self, x: Tensor) -> Tensor:
        return F.zeros_strided(x, self.stride)


class Identity(Operation):
    kind = OpKind.SKIP_CONNECT

    def forward(self, x: Tensor) -> Tensor:
        return x


class FactorizedReduce(Operation):
    """Two stride-2 pointwise convs on offset pixel grids, concatenated."""

    kind = OpKind.SKIP_CONNECT

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__(out_channels, 2)
        if out_channels % 2:
            raise ShapeError(f"factorized reduce needs an even channel count, got {out_channels}")
        self.in_channels = in_channels
        self.conv_a = Conv2d(in_channels, out_channels // 2, 1, rng, stride=2)
        self.conv_b = Conv2d(in_channels, out_channels // 2, 1, rng, stride=2)
        self.norm = ChannelNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(x)
        merged = F.concat_channels([self.conv_a(x), self.conv_b(F.offset_pixels(x))])
        return self.norm(merged)


class Pool(Operation):
    def __init__(self, kind: OpKind, channels: int, stride: int):
        super().__init__(channels, stride)
        self.kind = kind
        self.mode = "avg" if kind is OpKind.AVG_POOL_3X3 else "max"
        self.norm = ChannelNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(F.pool2d(x, self.mode, 3, self.stride, 1))


class _ReluDepthwisePointwise(Module):
    def __init__(
        self,
        channels: int,
        kernel_size: int,
        stride: int,
        dilation: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        padding = dilation * (kernel_size - 1) // 2
        self.depthwise = Conv2d(
            channels,
            channels,
            kernel_size,
            rng,
            stride=stride,
            padding=padding,
            dilation=dilation,
            groups=channels,
        )
        self.pointwise = Conv2d(channels, channels, 1, rng)
        self.norm = ChannelNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.pointwise(self.depthwise(F.relu(x))))


class SepConv(Operation):
    """Two relu-depthwise-pointwise-norm stacks; only the first is strided."""

    def __init__(self, kind: OpKind, channels: int, stride: int, rng: np.random.Generator):
        super().__init__(channels, stride)
        self.kind = kind
        kernel_size = 3 if kind is OpKind.SEP_CONV_3X3 else 5
        self.first = _ReluDepthwisePointwise(channels, kernel_size, stride, 1, rng)
        self.second = _ReluDepthwisePointwise(channels, kernel_size, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class DilConv(Operation):
    """One relu-depthwise(dilation 2)-pointwise-norm stack."""

    def __init__(self, kind: OpKind, channels: int, stride: int, rng: np.random.Generator):
        super().__init__(channels, stride)
        self.kind = kind
        kernel_size = 3 if kind is OpKind.DIL_CONV_3X3 else 5
        self.stack = _ReluDepthwisePointwise(channels, kernel_size, stride, 2, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.stack(x)


class MaxFeatureMap(Operation):
    """Pointwise expansion to 2C channels followed by channel-pair maximum back to C."""

    kind = OpKind.MAX_FEATURE_MAP

    def __init__(self, channels: int, stride: int, rng: np.random.Generator):
        super().__init__(channels, stride)
        self.expand = Conv2d(channels, 2 * channels, 1, rng, stride=stride)

    def forward(self, x: Tensor) -> Tensor:
        return mfm_pairing(self.expand(x))


class ReLUConvNorm(Module):
    """Input adapter: relu, 1x1 conv, norm."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng)
        self.norm = ChannelNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(F.relu(x)))


def _skip(channels: int, stride: int, rng: np.random.Generator) -> Operation:
    if stride == 1:
        return Identity(channels, 1)
    return FactorizedReduce(channels, channels, rng)


_BUILDERS: Dict[OpKind, Callable[[int, int, np.random.Generator], Operation]] = {
    OpKind.SEP_CONV_3X3: lambda c, s, rng: SepConv(OpKind.SEP_CONV_3X3, c, s, rng),
    OpKind.SEP_CONV_5X5: lambda c, s, rng: SepConv(OpKind.SEP_CONV_5X5, c, s, rng),
    OpKind.DIL_CONV_3X3: lambda c, s, rng: DilConv(OpKind.DIL_CONV_3X3, c, s, rng),
    OpKind.DIL_CONV_5X5: lambda c, s, rng: DilConv(OpKind.DIL_CONV_5X5, c, s, rng),
    OpKind.AVG_POOL_3X3: lambda c, s, rng: Pool(OpKind.AVG_POOL_3X3, c, s),
    OpKind.MAX_POOL_3X3: lambda c, s, rng: Pool(OpKind.MAX_POOL_3X3, c, s),
    OpKind.SKIP_CONNECT: _skip,
    OpKind.ZERO: lambda c, s, rng: Zero(c, s),
    OpKind.MAX_FEATURE_MAP: lambda c, s, rng: MaxFeatureMap(c, s, rng),
}


def build_op(kind, channels: int, stride: int, seed: int) -> Operation:
    """
    Build one candidate operation with seeded parameters.

    Args:
        kind: OpKind or its canonical name
        channels: Channel count C (even, at least 2)
        stride: 1, or 2 inside reduction cells
        seed: Seed for parameter initialisation

    Raises:
        ShapeError: If channels is odd or below 2, or stride is not 1 or 2
    """
    kind = kind if isinstance(kind, OpKind) else OpKind.parse(kind)
    if channels < 2 or channels % 2:
        raise ShapeError(f"operations need an even channel count of at least 2, got {channels}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    return _BUILDERS[kind](channels, stride, np.random.default_rng(seed))


def apply(op: Operation, x: Tensor) -> Tensor:
    """Run ``op`` on x, checking the channel count first."""
    if x.ndim != 4 or x.shape[1] != op.channels:
        raise ShapeError(
            f"{op.kind.value} expects (N, {op.channels}, H, W) input, got shape {x.shape}"
        )
    return op(x)


def mfm_pairing(y: Tensor) -> Tensor:
    """
    Max feature map: channel k of the output is max(y[k], y[k + C]).

    Raises:
        ShapeError: If y has an odd channel count
    """
    if y.ndim != 4 or y.shape[1] % 2:
        raise ShapeError(f"mfm_pairing needs an even channel count, got shape {y.shape}")
    half = y.shape[1] // 2
    return F.elementwise_max(F.channel_slice(y, 0, half), F.channel_slice(y, half, 2 * half))
