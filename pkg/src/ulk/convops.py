"""Convolution operators on NCHW tensors.

conv2d_direct is the reference: a plain tap-loop with stride, padding,
dilation and groups, exact in the input dtype. dwconv2d_blocked is the
cache-tiled fast path for depth-wise kernels. conv_transpose2d supplies the
zero-insertion primitive the kernel-dilation transform is built on, and
conv2d_input_grad is the adjoint used by the receptive-field analyzer.

All operators use the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._microkernel import dw_conv_planes
from .errors import ShapeError
from .tensor import Shape, Tensor


@dataclass(frozen=True)
class ConvParams:
    """Stride/padding/dilation/groups metadata for a 2-D convolution."""

    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ShapeError(f"stride/dilation/groups must be positive, got {self}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")


@dataclass(frozen=True)
class ConvKernel:
    """Square conv weight [C_out, C_in/groups, k, k] with optional per-channel bias."""

    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"weight must be 4-D, got {self.weight.dims}")
        if self.weight.dims[2] != self.weight.dims[3]:
            raise ShapeError(f"kernel must be square, got {self.weight.dims}")
        if self.bias is not None:
            if self.bias.data.ndim != 1 or self.bias.dims[0] != self.weight.dims[0]:
                raise ShapeError(
                    f"bias shape {self.bias.dims} does not match C_out {self.weight.dims[0]}"
                )

    @property
    def out_channels(self) -> int:
        return self.weight.dims[0]

    @property
    def in_channels_per_group(self) -> int:
        return self.weight.dims[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.dims[2]


def same_padding(k: int, dilation: int = 1) -> int:
    """Padding that keeps H/W unchanged at stride 1: (k-1)*dilation / 2."""
    if k % 2 == 0:
        raise ShapeError(f"same padding requires an odd kernel, got {k}")
    return (k - 1) * dilation // 2


def conv_output_size(size: int, k: int, p: ConvParams) -> int:
    span = (k - 1) * p.dilation + 1
    if span > size + 2 * p.padding:
        raise ShapeError(
            f"effective kernel extent {span} exceeds padded input {size + 2 * p.padding}"
        )
    return (size + 2 * p.padding - span) // p.stride + 1


def _check_conv_args(x: Tensor, kernel: ConvKernel, p: ConvParams):
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got rank {x.data.ndim}")
    c_in = x.dims[1]
    c_out = kernel.out_channels
    if c_in % p.groups or c_out % p.groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups {p.groups}")
    if kernel.in_channels_per_group != c_in // p.groups:
        raise ShapeError(
            f"weight expects {kernel.in_channels_per_group} channels/group, "
            f"input provides {c_in // p.groups}"
        )


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def conv2d_direct(x: Tensor, kernel: ConvKernel, p: ConvParams) -> Tensor:
    """Reference convolution: loop over kernel taps, gather strided windows."""
    _check_conv_args(x, kernel, p)
    b, c_in, h, w = x.dims
    c_out = kernel.out_channels
    k = kernel.kernel_size
    ho = conv_output_size(h, k, p)
    wo = conv_output_size(w, k, p)

    xp = _pad_input(x.data, p.padding)
    wt = kernel.weight.data
    out = np.zeros((b, c_out, ho, wo), dtype=np.result_type(x.dtype, wt.dtype))
    s, d, g = p.stride, p.dilation, p.groups
    depthwise = g == c_in == c_out

    for i in range(k):
        ysl = slice(i * d, i * d + s * (ho - 1) + 1, s)
        for j in range(k):
            xsl = slice(j * d, j * d + s * (wo - 1) + 1, s)
            tap = xp[:, :, ysl, xsl]
            if depthwise:
                out += tap * wt[:, 0, i, j][None, :, None, None]
            else:
                cig, cog = c_in // g, c_out // g
                for gi in range(g):
                    out[:, gi * cog:(gi + 1) * cog] += np.einsum(
                        "bchw,oc->bohw",
                        tap[:, gi * cig:(gi + 1) * cig],
                        wt[gi * cog:(gi + 1) * cog, :, i, j],
                    )
    if kernel.bias is not None:
        out += kernel.bias.data[None, :, None, None]
    return Tensor._wrap(out)


def conv_transpose2d(x: Tensor, kernel: ConvKernel, stride: int) -> Tensor:
    """Transpose convolution (zero-padding-free, groups=1).

    The weight axes are read in transpose-conv order [C_in, C_out, k, k];
    each input element is scattered onto the stride lattice and weighted by
    the kernel. Output spatial size is (H-1)*stride + k.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got rank {x.data.ndim}")
    wt = kernel.weight.data
    c_in, c_out, kh, kw = wt.shape
    if x.dims[1] != c_in:
        raise ShapeError(f"input has {x.dims[1]} channels, weight expects {c_in}")
    b, _, h, w = x.dims
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    out = np.zeros((b, c_out, ho, wo), dtype=np.result_type(x.dtype, wt.dtype))
    for ki in range(kh):
        ysl = slice(ki, ki + (h - 1) * stride + 1, stride)
        for kj in range(kw):
            xsl = slice(kj, kj + (w - 1) * stride + 1, stride)
            out[:, :, ysl, xsl] += np.einsum("bihw,io->bohw", x.data, wt[:, :, ki, kj])
    if kernel.bias is not None:
        out += kernel.bias.data[None, :, None, None]
    return Tensor._wrap(out)


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("ULK_THREADS", "")
    return max(1, int(env)) if env.isdigit() and env != "0" else 1


def dwconv2d_blocked(
    x: Tensor,
    kernel: ConvKernel,
    p: ConvParams,
    tile_h: int = 8,
    tile_w: int = 64,
    threads: int | None = None,
) -> Tensor:
    """Blocked depth-wise convolution; matches conv2d_direct up to reassociation."""
    _check_conv_args(x, kernel, p)
    b, c, h, w = x.dims
    if not (p.groups == c == kernel.out_channels):
        raise ShapeError(
            f"blocked path is depth-wise only: need groups == C_in == C_out, "
            f"got groups={p.groups}, C_in={c}, C_out={kernel.out_channels}"
        )
    k = kernel.kernel_size
    ho = conv_output_size(h, k, p)
    wo = conv_output_size(w, k, p)

    xp = _pad_input(x.data, p.padding).reshape(b * c, h + 2 * p.padding, w + 2 * p.padding)
    wt = np.ascontiguousarray(kernel.weight.data[:, 0])
    out = np.empty((b * c, ho, wo), dtype=x.dtype)
    if wt.dtype != x.dtype:
        wt = wt.astype(x.dtype)

    n_threads = _resolve_threads(threads)
    planes = b * c
    if n_threads == 1 or planes == 1:
        dw_conv_planes(xp, wt, out, c, k, p.stride, p.dilation, tile_h, tile_w, 0, planes)
    else:
        n_threads = min(n_threads, planes)
        bounds = np.linspace(0, planes, n_threads + 1, dtype=np.int64)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futs = [
                pool.submit(dw_conv_planes, xp, wt, out, c, k, p.stride, p.dilation,
                            tile_h, tile_w, int(bounds[t]), int(bounds[t + 1]))
                for t in range(n_threads)
            ]
            for f in futs:
                f.result()

    out = out.reshape(b, c, ho, wo)
    if kernel.bias is not None:
        out = out + kernel.bias.data[None, :, None, None].astype(x.dtype)
    return Tensor._wrap(out)


def conv2d_input_grad(
    grad_out: Tensor, kernel: ConvKernel, p: ConvParams, input_shape
) -> Tensor:
    """Gradient of <grad_out, conv2d_direct(x)> with respect to x.

    Exact adjoint of the conv2d_direct gather: each tap scatters grad_out
    back onto the padded input lattice.
    """
    dims = input_shape.dims if isinstance(input_shape, Shape) else tuple(input_shape)
    if len(dims) != 4:
        raise ShapeError(f"input_shape must be NCHW, got {dims}")
    b, c_in, h, w = dims
    k = kernel.kernel_size
    c_out = kernel.out_channels
    ho = conv_output_size(h, k, p)
    wo = conv_output_size(w, k, p)
    if grad_out.dims != (b, c_out, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.dims} does not match conv output {(b, c_out, ho, wo)}"
        )
    if c_in % p.groups or kernel.in_channels_per_group != c_in // p.groups:
        raise ShapeError("kernel/groups inconsistent with input_shape")

    s, d, g, pad = p.stride, p.dilation, p.groups, p.padding
    wt = kernel.weight.data
    buf = np.zeros((b, c_in, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    depthwise = g == c_in == c_out
    for i in range(k):
        ysl = slice(i * d, i * d + s * (ho - 1) + 1, s)
        for j in range(k):
            xsl = slice(j * d, j * d + s * (wo - 1) + 1, s)
            if depthwise:
                buf[:, :, ysl, xsl] += grad_out.data * wt[:, 0, i, j][None, :, None, None]
            else:
                cig, cog = c_in // g, c_out // g
                for gi in range(g):
                    buf[:, gi * cig:(gi + 1) * cig, ysl, xsl] += np.einsum(
                        "bohw,oc->bchw",
                        grad_out.data[:, gi * cog:(gi + 1) * cog],
                        wt[gi * cog:(gi + 1) * cog, :, i, j],
                    )
    if pad:
        buf = buf[:, :, pad:pad + h, pad:pad + w]
    return Tensor._wrap(np.ascontiguousarray(buf))
