"""Structural re-parameterization transforms.

Every function here rewrites weights so that a multi-branch training-time
structure collapses into a single convolution with identical forward
behavior (exact in real arithmetic):

  * fuse_bn folds an inference-mode batch norm into the preceding conv;
  * dilate_kernel turns a dilated kernel into an equivalent non-dilated
    sparse kernel of size (k-1)*r + 1, realized as a stride-r transpose
    convolution with a 1x1 identity kernel;
  * merge_small_into_large folds a parallel small-kernel branch into a
    large one by center-padding;
  * merge_dilated_reparam_block chains all three to collapse a large-kernel
    conv plus its dilated small-kernel branches into one kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convops import ConvKernel, ConvParams, conv2d_direct, conv_transpose2d, same_padding
from .errors import ConfigError, ShapeError
from .tensor import Tensor, pad2d_center

DEFAULT_BN_EPS = 1e-5


@dataclass(frozen=True)
class BatchNormParams:
    """Inference-mode batch norm: y = gamma * (x - mean) / sqrt(var + eps) + beta."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        c = self.gamma.dims[0]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            t = getattr(self, name)
            if t.data.ndim != 1 or t.dims[0] != c:
                raise ShapeError(f"{name} must be a length-{c} vector, got {t.dims}")
        if np.any(self.running_var.data < 0):
            raise ConfigError("running_var must be non-negative")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.dims[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BatchNormParams":
        one = Tensor(np.ones(channels), dtype=dtype)
        zero = Tensor(np.zeros(channels), dtype=dtype)
        return cls(gamma=one, beta=zero, running_mean=zero, running_var=one)


def bn_forward(x: Tensor, bn: BatchNormParams) -> Tensor:
    """Apply inference-mode batch norm over the channel axis of an NCHW map."""
    if x.dims[1] != bn.channels:
        raise ShapeError(f"input has {x.dims[1]} channels, BN expects {bn.channels}")
    scale = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
    shift = bn.beta.data - bn.running_mean.data * scale
    return Tensor._wrap(x.data * scale[None, :, None, None] + shift[None, :, None, None])


def fuse_bn(kernel: ConvKernel, bn: BatchNormParams) -> ConvKernel:
    """Fold a batch norm that follows `kernel` into the kernel itself."""
    if bn.channels != kernel.out_channels:
        raise ShapeError(
            f"BN has {bn.channels} channels, conv produces {kernel.out_channels}"
        )
    scale = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
    weight = kernel.weight.data * scale[:, None, None, None]
    bias = bn.beta.data - bn.running_mean.data * scale
    if kernel.bias is not None:
        bias = bias + kernel.bias.data * scale
    return ConvKernel(weight=Tensor._wrap(weight), bias=Tensor._wrap(bias))


def dilate_kernel(kernel: ConvKernel, r: int) -> ConvKernel:
    """Convert a kernel used at dilation r into its non-dilated sparse equivalent.

    The new kernel has size (k-1)*r + 1 and reproduces the dilated conv for
    every input. Depth-wise kernels convert in one transpose conv; kernels
    with more than one input channel per group are converted slice by slice
    and concatenated.
    """
    if r < 1:
        raise ShapeError(f"dilation must be >= 1, got {r}")
    if r == 1:
        return kernel
    wt = kernel.weight
    identity = ConvKernel(weight=Tensor(np.ones((1, 1, 1, 1), dtype=wt.dtype)))
    if wt.dims[1] == 1:
        dilated = conv_transpose2d(wt, identity, stride=r)
    else:
        slices = [
            conv_transpose2d(Tensor._wrap(wt.data[:, i:i + 1]), identity, stride=r).data
            for i in range(wt.dims[1])
        ]
        dilated = Tensor._wrap(np.concatenate(slices, axis=1))
    return ConvKernel(weight=dilated, bias=kernel.bias)


def _add_bias(a: Tensor | None, b: Tensor | None) -> Tensor | None:
    if a is None:
        return b
    if b is None:
        return a
    return Tensor._wrap(a.data + b.data)


def merge_small_into_large(
    large: ConvKernel,
    large_bn: BatchNormParams,
    small: ConvKernel,
    small_bn: BatchNormParams,
) -> ConvKernel:
    """Collapse parallel large + small branches (summed after their BNs) into one kernel."""
    K = large.kernel_size
    k = small.kernel_size
    if k > K:
        raise ShapeError(f"small kernel {k} exceeds large kernel {K}")
    if K % 2 == 0 or k % 2 == 0:
        raise ShapeError(f"kernel sizes must be odd, got {K} and {k}")
    lf = fuse_bn(large, large_bn)
    sf = fuse_bn(small, small_bn)
    if lf.weight.dims[:2] != sf.weight.dims[:2]:
        raise ShapeError(
            f"branch channel layouts differ: {lf.weight.dims} vs {sf.weight.dims}"
        )
    weight = Tensor._wrap(lf.weight.data + pad2d_center(sf.weight, K).data)
    return ConvKernel(weight=weight, bias=_add_bias(lf.bias, sf.bias))


@dataclass(frozen=True)
class DilatedReparamConfig:
    """Hyper-parameters of one block: large size K plus (k, r) per parallel branch."""

    K: int
    branches: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.K < 3 or self.K % 2 == 0:
            raise ConfigError(f"K must be an odd size >= 3, got {self.K}")
        object.__setattr__(self, "branches", tuple((int(k), int(r)) for k, r in self.branches))
        for k, r in self.branches:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"branch kernels must be odd, got {k}")
            if r < 1:
                raise ConfigError(f"dilation must be >= 1, got {r}")
            if (k - 1) * r + 1 > self.K:
                raise ConfigError(
                    f"branch k={k}, r={r} has equivalent size {(k - 1) * r + 1} > K={self.K}"
                )

    @classmethod
    def for_kernel(cls, K: int) -> "DilatedReparamConfig":
        """Branch schedule for the supported large-kernel sizes."""
        table = {
            9: ((5, 1), (5, 2), (3, 3), (3, 4)),
            13: ((5, 1), (7, 2), (3, 3), (3, 4), (3, 5)),
        }
        if K not in table:
            raise ConfigError(
                f"no default branch schedule for K={K}; pass branches explicitly"
            )
        return cls(K=K, branches=table[K])


@dataclass(frozen=True)
class DrbBranch:
    kernel: ConvKernel
    dilation: int
    bn: BatchNormParams


@dataclass(frozen=True)
class DilatedReparamBlock:
    """A K x K depth-wise conv plus parallel dilated depth-wise branches, each with BN."""

    main: ConvKernel
    main_bn: BatchNormParams
    branches: tuple[DrbBranch, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        K = self.main.kernel_size
        c = self.main.out_channels
        if self.main.in_channels_per_group != 1:
            raise ShapeError("main kernel must be depth-wise (one input channel per group)")
        if self.main_bn.channels != c:
            raise ShapeError("main BN channel count mismatch")
        for br in self.branches:
            if br.kernel.in_channels_per_group != 1:
                raise ShapeError("branch kernels must be depth-wise")
            if br.kernel.out_channels != c or br.bn.channels != c:
                raise ShapeError("branch channel count mismatch")
            k = br.kernel.kernel_size
            if (k - 1) * br.dilation + 1 > K:
                raise ShapeError(
                    f"branch k={k}, r={br.dilation} does not fit inside K={K}"
                )

    @property
    def channels(self) -> int:
        return self.main.out_channels

    @property
    def kernel_size(self) -> int:
        return self.main.kernel_size

    def config(self) -> DilatedReparamConfig:
        return DilatedReparamConfig(
            K=self.kernel_size,
            branches=tuple((br.kernel.kernel_size, br.dilation) for br in self.branches),
        )


def drb_forward(x: Tensor, block: DilatedReparamBlock) -> Tensor:
    """Multi-branch forward: sum of BN(conv(x)) over the main and every branch."""
    c = block.channels
    K = block.kernel_size
    out = bn_forward(
        conv2d_direct(x, block.main, ConvParams(padding=same_padding(K), groups=c)),
        block.main_bn,
    ).data.copy()
    for br in block.branches:
        k = br.kernel.kernel_size
        y = conv2d_direct(
            x, br.kernel,
            ConvParams(padding=same_padding(k, br.dilation), dilation=br.dilation, groups=c),
        )
        out += bn_forward(y, br.bn).data
    return Tensor._wrap(out)


def merge_dilated_reparam_block(block: DilatedReparamBlock) -> ConvKernel:
    """Collapse the whole block into a single K x K depth-wise kernel + bias.

    Merge order follows the equivalence proof: fuse each BN into its conv,
    convert each dilated branch to its sparse non-dilated equivalent, then
    center-pad everything to K and sum.
    """
    K = block.kernel_size
    merged = fuse_bn(block.main, block.main_bn)
    weight = merged.weight.data.copy()
    bias = merged.bias.data.copy()
    for br in block.branches:
        fused = fuse_bn(br.kernel, br.bn)
        expanded = dilate_kernel(fused, br.dilation)
        weight += pad2d_center(expanded.weight, K).data
        bias += expanded.bias.data
    return ConvKernel(weight=Tensor._wrap(weight), bias=Tensor._wrap(bias))
