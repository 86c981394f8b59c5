"""Inference-mode building blocks: SE, GRN, FFN, the two block kinds, and downsampling.

A block is residual in two halves: spatial mixing (depth-wise conv -> BN ->
SE) and channel mixing (1x1 expand -> GELU -> GRN -> 1x1 reduce -> BN).
Large-kernel blocks use a DilatedReparamBlock as the spatial mixer and can
be collapsed for deployment without changing their outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .convops import ConvKernel, ConvParams, conv2d_direct, same_padding
from .errors import ConfigError, ShapeError
from .reparam import (
    BatchNormParams,
    DilatedReparamBlock,
    bn_forward,
    drb_forward,
    fuse_bn,
    merge_dilated_reparam_block,
)
from .tensor import Tensor, reduce_spatial_mean

GRN_EPS = 1e-6


def gelu(x: np.ndarray, exact: bool = False) -> np.ndarray:
    """GELU activation; tanh approximation by default, erf form on request."""
    if exact:
        erf = np.frompyfunc(math.erf, 1, 1)
        return (x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)).astype(x.dtype))).astype(x.dtype)
    c = np.asarray(math.sqrt(2.0 / math.pi), dtype=x.dtype)
    half = np.asarray(0.5, dtype=x.dtype)
    coef = np.asarray(0.044715, dtype=x.dtype)
    return half * x * (1.0 + np.tanh(c * (x + coef * x * x * x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class SeParams:
    """Squeeze-excitation with fixed 1/4 channel reduction."""

    fc1_weight: Tensor  # [C/4, C]
    fc1_bias: Tensor
    fc2_weight: Tensor  # [C, C/4]
    fc2_bias: Tensor

    def __post_init__(self):
        c = self.fc2_weight.dims[0]
        if c % 4:
            raise ConfigError(f"SE needs channels divisible by 4, got {c}")
        if self.fc1_weight.dims != (c // 4, c) or self.fc2_weight.dims != (c, c // 4):
            raise ShapeError(
                f"SE weight shapes {self.fc1_weight.dims}/{self.fc2_weight.dims} "
                f"inconsistent for {c} channels"
            )
        if self.fc1_bias.dims != (c // 4,) or self.fc2_bias.dims != (c,):
            raise ShapeError("SE bias shapes inconsistent")

    @property
    def channels(self) -> int:
        return self.fc2_weight.dims[0]


def se_forward(x: Tensor, p: SeParams) -> Tensor:
    """Scale each channel by a sigmoid gate computed from the pooled map."""
    if x.dims[1] != p.channels:
        raise ShapeError(f"input has {x.dims[1]} channels, SE expects {p.channels}")
    pooled = reduce_spatial_mean(x).data
    hidden = np.maximum(pooled @ p.fc1_weight.data.T + p.fc1_bias.data, 0.0)
    gate = _sigmoid(hidden @ p.fc2_weight.data.T + p.fc2_bias.data)
    return Tensor._wrap(x.data * gate[:, :, None, None])


@dataclass(frozen=True)
class GrnParams:
    """Global response normalization scale/shift over the expanded channels."""

    gamma: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.gamma.dims != self.beta.dims or self.gamma.data.ndim != 1:
            raise ShapeError("GRN gamma/beta must be equal-length vectors")

    @property
    def channels(self) -> int:
        return self.gamma.dims[0]


def grn_forward(x: Tensor, p: GrnParams) -> Tensor:
    """Divide each channel's response by the mean spatial L2 norm, then scale+shift+residual."""
    if x.dims[1] != p.channels:
        raise ShapeError(f"input has {x.dims[1]} channels, GRN expects {p.channels}")
    xd = x.data
    norms = np.sqrt(np.sum(xd * xd, axis=(2, 3)))  # [B, C]
    scale = norms / (norms.mean(axis=1, keepdims=True) + GRN_EPS)
    g = p.gamma.data[None, :, None, None]
    b = p.beta.data[None, :, None, None]
    return Tensor._wrap(g * (xd * scale[:, :, None, None]) + b + xd)


@dataclass(frozen=True)
class FfnParams:
    """1x1 expand -> GELU -> GRN -> 1x1 reduce."""

    pw1: ConvKernel
    grn: GrnParams
    pw2: ConvKernel

    def __post_init__(self):
        if self.pw1.kernel_size != 1 or self.pw2.kernel_size != 1:
            raise ShapeError("FFN convs must be 1x1")
        hidden = self.pw1.out_channels
        if self.grn.channels != hidden or self.pw2.in_channels_per_group != hidden:
            raise ShapeError("FFN channel chain is inconsistent")

    @property
    def channels(self) -> int:
        return self.pw1.in_channels_per_group


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    h = conv2d_direct(x, p.pw1, ConvParams())
    h = Tensor._wrap(gelu(h.data))
    h = grn_forward(h, p.grn)
    return conv2d_direct(h, p.pw2, ConvParams())


@dataclass(frozen=True)
class BlockSpec:
    """One network block. kind 'lark' mixes space with a DilatedReparamBlock,
    kind 'smak' with a plain depth-wise 3x3. norm/ffn_norm are None once the
    block has been merged for deployment."""

    kind: str
    channels: int
    conv: DilatedReparamBlock | ConvKernel
    norm: BatchNormParams | None
    se: SeParams
    ffn: FfnParams
    ffn_norm: BatchNormParams | None

    def __post_init__(self):
        if self.kind not in ("lark", "smak"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        c = self.channels
        if isinstance(self.conv, DilatedReparamBlock):
            if self.kind != "lark":
                raise ConfigError("only LarK blocks carry a DilatedReparamBlock")
            if self.conv.channels != c:
                raise ShapeError("DilatedReparamBlock channel mismatch")
        else:
            if self.conv.out_channels != c or self.conv.in_channels_per_group != 1:
                raise ShapeError("block conv must be depth-wise with matching channels")
            if self.kind == "smak" and self.conv.kernel_size != 3:
                raise ShapeError("SmaK blocks use exactly a 3x3 depth-wise conv")
        if self.se.channels != c or self.ffn.channels != c:
            raise ShapeError("SE/FFN channel mismatch")
        for bn in (self.norm, self.ffn_norm):
            if bn is not None and bn.channels != c:
                raise ShapeError("block BN channel mismatch")

    @property
    def merged(self) -> bool:
        return self.norm is None and not isinstance(self.conv, DilatedReparamBlock)

    @property
    def kernel_size(self) -> int:
        return self.conv.kernel_size


def block_forward(x: Tensor, spec: BlockSpec) -> Tensor:
    """y1 = x + SE(BN(DWConv(x))); y2 = y1 + BN(FFN(y1)). Shape-preserving."""
    if x.dims[1] != spec.channels:
        raise ShapeError(f"input has {x.dims[1]} channels, block expects {spec.channels}")
    if isinstance(spec.conv, DilatedReparamBlock):
        y = drb_forward(x, spec.conv)
    else:
        k = spec.conv.kernel_size
        y = conv2d_direct(x, spec.conv, ConvParams(padding=same_padding(k), groups=spec.channels))
    if spec.norm is not None:
        y = bn_forward(y, spec.norm)
    y = se_forward(y, spec.se)
    y1 = Tensor._wrap(x.data + y.data)

    z = ffn_forward(y1, spec.ffn)
    if spec.ffn_norm is not None:
        z = bn_forward(z, spec.ffn_norm)
    return Tensor._wrap(y1.data + z.data)


def merge_block_for_inference(spec: BlockSpec) -> BlockSpec:
    """Collapse branches and fold BNs; forward outputs are unchanged. Idempotent."""
    conv = spec.conv
    if isinstance(conv, DilatedReparamBlock):
        conv = merge_dilated_reparam_block(conv)
    if spec.norm is not None:
        conv = fuse_bn(conv, spec.norm)
    ffn = spec.ffn
    if spec.ffn_norm is not None:
        ffn = replace(ffn, pw2=fuse_bn(ffn.pw2, spec.ffn_norm))
    return replace(spec, conv=conv, norm=None, ffn=ffn, ffn_norm=None)


@dataclass(frozen=True)
class DownsampleSpec:
    """Stage transition. The stem runs two stride-2 3x3 convs (GELU between);
    inter-stage transitions run one stride-2 3x3 conv doubling the channels."""

    kind: str  # "stem" | "inter"
    convs: tuple[ConvKernel, ...]
    norms: tuple[BatchNormParams | None, ...]

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple(self.convs))
        object.__setattr__(self, "norms", tuple(self.norms))
        expected = 2 if self.kind == "stem" else 1
        if self.kind not in ("stem", "inter") or len(self.convs) != expected:
            raise ConfigError(f"bad downsample spec: kind={self.kind}, {len(self.convs)} convs")
        if len(self.norms) != len(self.convs):
            raise ConfigError("one norm slot per conv required")
        for conv in self.convs:
            if conv.kernel_size != 3:
                raise ShapeError("downsample convs are 3x3")

    @property
    def out_channels(self) -> int:
        return self.convs[-1].out_channels


def downsample_forward(x: Tensor, spec: DownsampleSpec) -> Tensor:
    """Apply the stem (4x spatial reduction) or an inter-stage conv (2x)."""
    if x.dims[2] < 2 or x.dims[3] < 2:
        raise ShapeError(f"spatial dims too small to downsample: {x.dims}")
    p = ConvParams(stride=2, padding=1)
    y = x
    for i, (conv, bn) in enumerate(zip(spec.convs, spec.norms)):
        y = conv2d_direct(y, conv, p)
        if bn is not None:
            y = bn_forward(y, bn)
        if spec.kind == "stem" and i + 1 < len(spec.convs):
            y = Tensor._wrap(gelu(y.data))
    return y


def merge_downsample_for_inference(spec: DownsampleSpec) -> DownsampleSpec:
    convs = tuple(
        fuse_bn(conv, bn) if bn is not None else conv
        for conv, bn in zip(spec.convs, spec.norms)
    )
    return replace(spec, convs=convs, norms=(None,) * len(convs))
