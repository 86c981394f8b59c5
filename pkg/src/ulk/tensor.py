"""Minimal dense NCHW tensor and the handful of array ops everything else builds on.

Tensors are immutable after construction: the backing numpy buffer is made
read-only so ops can safely share it between threads. Reference precision is
float64; float32 is the benchmark fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64)


@dataclass(frozen=True)
class Shape:
    """Ordered list of positive extents, e.g. (B, C, H, W)."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) == 0:
            raise ShapeError("shape must have at least one dimension")
        if any(d < 1 for d in dims):
            raise ShapeError(f"all extents must be >= 1, got {dims}")

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))

    @property
    def rank(self) -> int:
        return len(self.dims)

    def __iter__(self):
        return iter(self.dims)

    def __getitem__(self, i):
        return self.dims[i]

    def __len__(self):
        return len(self.dims)


def _as_dims(shape) -> tuple[int, ...]:
    if isinstance(shape, Shape):
        return shape.dims
    return Shape(tuple(shape)).dims


class Tensor:
    """Immutable dense array of reals, row-major with the last dim fastest."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        Shape(arr.shape)  # validates extents
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array the caller promises not to mutate (internal fast path)."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the backing buffer."""
        return self._data

    @property
    def shape(self) -> Shape:
        return Shape(self._data.shape)

    @property
    def dims(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return int(self._data.size)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self._data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self._data.shape}, dtype={self._data.dtype})"


def reshape(t: Tensor, new_shape) -> Tensor:
    """Reinterpret `t` with a new shape; flat row-major order is unchanged."""
    dims = _as_dims(new_shape)
    new_size = int(np.prod(dims, dtype=np.int64))
    if new_size != t.size:
        raise ShapeError(
            f"cannot reshape {t.dims} ({t.size} elements) to {dims} ({new_size} elements)"
        )
    # The buffer is frozen, so sharing it between the two tensors is safe.
    return Tensor._wrap(t.data.reshape(dims))


def pad2d_center(t: Tensor, target: int) -> Tensor:
    """Zero-pad the last two (k x k) dims of a kernel tensor to target x target.

    Both k and target must be odd so the kernel stays centered.
    """
    if t.data.ndim < 2:
        raise ShapeError("pad2d_center expects at least 2 dims")
    kh, kw = t.dims[-2], t.dims[-1]
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0 or target % 2 == 0:
        raise ShapeError(f"kernel size {kh} and target {target} must both be odd")
    if kh > target:
        raise ShapeError(f"kernel size {kh} exceeds target {target}")
    if kh == target:
        return t
    ring = (target - kh) // 2
    pad = [(0, 0)] * (t.data.ndim - 2) + [(ring, ring), (ring, ring)]
    return Tensor._wrap(np.pad(t.data, pad))


def unpad2d_center(t: Tensor, k: int) -> Tensor:
    """Inverse of pad2d_center: crop the centered k x k window back out."""
    target = t.dims[-1]
    if t.dims[-2] != target:
        raise ShapeError("expected square spatial dims")
    if k % 2 == 0 or target % 2 == 0 or k > target:
        raise ShapeError(f"invalid crop {k} from {target}")
    ring = (target - k) // 2
    sl = (Ellipsis, slice(ring, ring + k), slice(ring, ring + k))
    return Tensor._wrap(t.data[sl].copy())


def reduce_spatial_mean(t: Tensor) -> Tensor:
    """Per-(batch, channel) mean over H x W of an NCHW map."""
    if t.data.ndim != 4:
        raise ShapeError(f"expected 4-D NCHW input, got rank {t.data.ndim}")
    return Tensor._wrap(t.data.mean(axis=(2, 3)))


def relative_error(actual, expected) -> float:
    """Max absolute deviation normalized by the magnitude of `expected`.

    The global normalization keeps near-zero entries from blowing up the
    metric; this is the quantity all equivalence tolerances refer to.
    """
    a = actual.data if isinstance(actual, Tensor) else np.asarray(actual)
    b = expected.data if isinstance(expected, Tensor) else np.asarray(expected)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = float(np.max(np.abs(b)))
    if denom == 0.0:
        return float(np.max(np.abs(a - b)))
    return float(np.max(np.abs(a - b)) / denom)
