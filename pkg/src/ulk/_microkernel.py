"""Tiled depth-wise convolution microkernel (numba-compiled).

The operator pulls kernel-window products straight from the padded input
rows instead of materializing an im2col buffer: output rows are tiled, a
per-row accumulator stays in L1 across all kernel taps, and the tap loop is
unrolled by four so each accumulator touch amortizes four multiply-adds.
The innermost loop runs over contiguous output columns, which LLVM turns
into vector FMAs.

Planes (batch x channel slices) are fully independent, so callers may split
the plane range across threads; results do not depend on that split because
each output element is written by exactly one tile.
"""

import numpy as np
from numba import njit


@njit(nogil=True, fastmath=True, boundscheck=False, cache=True)
def dw_conv_planes(xp, w, out, channels, k, stride, dilation, tile_h, tile_w, p0, p1):
    """Depth-wise conv over planes [p0, p1).

    xp:  padded input planes, [B*C, Hp, Wp]
    w:   per-channel taps, [C, k, k]
    out: output planes, [B*C, Ho, Wo]; fully overwritten on the given range
    """
    Ho = out.shape[1]
    Wo = out.shape[2]
    acc = np.empty(tile_w, dtype=out.dtype)
    for p in range(p0, p1):
        wc = w[p % channels]
        if stride == 1:
            for oy0 in range(0, Ho, tile_h):
                oy1 = min(oy0 + tile_h, Ho)
                for ox0 in range(0, Wo, tile_w):
                    n = min(tile_w, Wo - ox0)
                    for oy in range(oy0, oy1):
                        for ox in range(n):
                            acc[ox] = 0.0
                        for i in range(k):
                            row = xp[p, oy + i * dilation]
                            j = 0
                            while j + 4 <= k:
                                w0 = wc[i, j]
                                w1 = wc[i, j + 1]
                                w2 = wc[i, j + 2]
                                w3 = wc[i, j + 3]
                                o0 = ox0 + j * dilation
                                o1 = o0 + dilation
                                o2 = o1 + dilation
                                o3 = o2 + dilation
                                for ox in range(n):
                                    acc[ox] += (w0 * row[o0 + ox] + w1 * row[o1 + ox]
                                                + w2 * row[o2 + ox] + w3 * row[o3 + ox])
                                j += 4
                            while j < k:
                                wv = wc[i, j]
                                o0 = ox0 + j * dilation
                                for ox in range(n):
                                    acc[ox] += wv * row[o0 + ox]
                                j += 1
                        for ox in range(n):
                            out[p, oy, ox0 + ox] = acc[ox]
        else:
            # Strided gather; no contiguity to exploit, keep it simple.
            for oy in range(Ho):
                for ox in range(Wo):
                    s = out.dtype.type(0.0)
                    for i in range(k):
                        row = xp[p, oy * stride + i * dilation]
                        for j in range(k):
                            s += wc[i, j] * row[ox * stride + j * dilation]
                    out[p, oy, ox] = s
    return out
