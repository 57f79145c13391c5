"""Sparse tensors over integer coordinate grids and rulebook construction.

Coordinates are stored as int32 rows ``(batch, z, y, x)`` for 3D and
``(batch, y, x)`` for 2D, sorted ascending lexicographically. A rulebook
is the execution plan of a sparse convolution: per kernel offset, the
list of (input_row, output_row) pairs, stored CSR-style.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from . import kernels
from .errors import (CoordinateOverflow, DuplicateCoordinate, InvalidKernel,
                     ShapeError)

COORD_DTYPE = np.int32
MAX_AXIS = 2**31 - 1


def axis_strides(spatial_shape) -> np.ndarray:
    """Row-major linearization strides for the spatial axes."""
    d = len(spatial_shape)
    strides = np.ones(d, dtype=np.int64)
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * spatial_shape[a + 1]
    return strides


def linear_keys(coords: np.ndarray, spatial_shape, batch_size: int) -> np.ndarray:
    """Encode coordinate rows as scalar int64 keys (batch most significant)."""
    if any(s > MAX_AXIS for s in spatial_shape):
        raise CoordinateOverflow(f"axis of {spatial_shape} exceeds 2^31-1")
    cells = 1
    for s in spatial_shape:        # python ints: no silent int64 overflow
        cells *= int(s)
    if batch_size * cells >= 2**62:
        raise CoordinateOverflow(
            f"grid {spatial_shape} x batch {batch_size} overflows key space")
    strides = axis_strides(spatial_shape)
    c = coords.astype(np.int64, copy=False)
    return c[:, 0] * cells + c[:, 1:] @ strides


@dataclasses.dataclass(frozen=True)
class SparseTensor:
    """Coordinate list + feature matrix over a d-dimensional grid.

    Invariants enforced on construction: coordinates sorted ascending
    lexicographically by (batch, spatial axes), duplicate-free, and in
    bounds. Feature row i belongs to coordinate row i.
    """

    coords: np.ndarray           # (N, 1+d) int32
    features: np.ndarray         # (N, C)
    spatial_shape: tuple[int, ...]
    batch_size: int = 1

    def __post_init__(self):
        coords = np.asarray(self.coords)
        feats = np.asarray(self.features)
        d = len(self.spatial_shape)
        if d not in (2, 3):
            raise ShapeError(f"dimensionality must be 2 or 3, got {d}")
        if coords.ndim != 2 or coords.shape[1] != 1 + d:
            raise ShapeError(f"coords must be (N, {1 + d}), got {coords.shape}")
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"features {feats.shape} do not match {coords.shape[0]} coords")
        if coords.dtype != COORD_DTYPE:
            coords = coords.astype(COORD_DTYPE)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "spatial_shape", tuple(int(s) for s in self.spatial_shape))
        if coords.shape[0]:
            if coords.min() < 0:
                raise ShapeError("negative coordinate component")
            if coords[:, 0].max() >= self.batch_size:
                raise ShapeError("batch index out of range")
            upper = np.asarray(self.spatial_shape, dtype=np.int64)
            if np.any(coords[:, 1:].astype(np.int64) >= upper):
                raise ShapeError("spatial coordinate out of range")
            keys = linear_keys(coords, self.spatial_shape, self.batch_size)
            diffs = np.diff(keys)
            if np.any(diffs == 0):
                i = int(np.nonzero(diffs == 0)[0][0])
                raise DuplicateCoordinate(f"duplicate coordinate {tuple(coords[i])}")
            if np.any(diffs < 0):
                raise ShapeError("coordinates are not sorted")

    @property
    def ndim(self) -> int:
        return len(self.spatial_shape)

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.spatial_shape, self.batch_size)

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same coordinate set, new feature matrix."""
        return SparseTensor(self.coords, features, self.spatial_shape,
                            self.batch_size)

    @classmethod
    def empty(cls, spatial_shape, channels: int, batch_size: int = 1,
              dtype=np.float64) -> "SparseTensor":
        d = len(spatial_shape)
        return cls(np.empty((0, 1 + d), dtype=COORD_DTYPE),
                   np.empty((0, channels), dtype=dtype), tuple(spatial_shape),
                   batch_size)

    @classmethod
    def from_unsorted(cls, coords, features, spatial_shape,
                      batch_size: int = 1) -> "SparseTensor":
        """Build a tensor from unsorted (but duplicate-free) rows."""
        coords = np.asarray(coords, dtype=COORD_DTYPE)
        features = np.asarray(features)
        if coords.shape[0]:
            order = np.argsort(linear_keys(coords, spatial_shape, batch_size),
                               kind="stable")
            coords = coords[order]
            features = features[order]
        return cls(coords, features, tuple(spatial_shape), batch_size)


@dataclasses.dataclass(frozen=True)
class KernelSpec:
    """Kernel geometry of a (sparse or dense) convolution."""

    kernel_size: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    in_channels: int
    out_channels: int

    @classmethod
    def cube(cls, d: int, k: int, in_channels: int, out_channels: int,
             stride: int = 1, padding: int | None = None) -> "KernelSpec":
        """Isotropic kernel; padding defaults to (k-1)//2."""
        if padding is None:
            padding = (k - 1) // 2
        return cls((k,) * d, (stride,) * d, (padding,) * d, in_channels,
                   out_channels)

    def __post_init__(self):
        d = len(self.kernel_size)
        if len(self.stride) != d or len(self.padding) != d:
            raise InvalidKernel("kernel_size/stride/padding ranks disagree")
        if any(k < 1 for k in self.kernel_size) or any(s < 1 for s in self.stride):
            raise InvalidKernel("kernel size and stride must be positive")
        if any(p < 0 for p in self.padding):
            raise InvalidKernel("padding must be non-negative")

    @property
    def ndim(self) -> int:
        return len(self.kernel_size)

    @property
    def num_offsets(self) -> int:
        return int(np.prod(self.kernel_size))

    @property
    def is_submanifold(self) -> bool:
        return (all(k % 2 == 1 for k in self.kernel_size)
                and all(s == 1 for s in self.stride))

    def require_submanifold(self) -> None:
        if not self.is_submanifold:
            raise InvalidKernel(
                f"submanifold mode needs odd sizes and unit strides, got "
                f"k={self.kernel_size}, s={self.stride}")

    def centered_offsets(self) -> np.ndarray:
        """(K, d) centered offsets in lexicographic order (odd kernels only)."""
        ranges = [range(-(k - 1) // 2, (k - 1) // 2 + 1) for k in self.kernel_size]
        return np.array(list(itertools.product(*ranges)), dtype=np.int64)

    def out_shape(self, in_shape) -> tuple[int, ...]:
        """Dense conv output shape; raises InvalidKernel if non-positive."""
        out = tuple(
            (in_shape[a] + 2 * self.padding[a] - self.kernel_size[a])
            // self.stride[a] + 1
            for a in range(self.ndim))
        if any(s <= 0 for s in out):
            raise InvalidKernel(f"non-positive output shape {out} from {in_shape}")
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class CoordIndex:
    """Hash-free index from coordinate to row, backed by sorted linear keys."""

    sorted_keys: np.ndarray
    spatial_shape: tuple[int, ...]
    batch_size: int

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where absent."""
        n = self.sorted_keys.shape[0]
        if coords.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        if n == 0:
            return np.full(coords.shape[0], -1, dtype=np.int64)
        q = linear_keys(np.asarray(coords), self.spatial_shape, self.batch_size)
        pos = np.minimum(np.searchsorted(self.sorted_keys, q), n - 1)
        rows = np.where(self.sorted_keys[pos] == q, pos, -1)
        return rows

    def lookup_one(self, coord) -> int:
        return int(self.lookup(np.asarray([coord]))[0])

    def __len__(self) -> int:
        return self.sorted_keys.shape[0]


def build_coord_index(coords: np.ndarray, spatial_shape,
                      batch_size: int = 1) -> CoordIndex:
    """Index sorted duplicate-free coords; raises DuplicateCoordinate."""
    coords = np.asarray(coords)
    keys = linear_keys(coords, spatial_shape, batch_size) if coords.shape[0] \
        else np.empty(0, dtype=np.int64)
    if keys.shape[0] > 1:
        dup = np.nonzero(np.diff(keys) == 0)[0]
        if dup.shape[0]:
            raise DuplicateCoordinate(
                f"duplicate coordinate {tuple(coords[int(dup[0])])}")
        if np.any(np.diff(keys) < 0):
            raise ShapeError("coordinates are not sorted")
    return CoordIndex(keys, tuple(spatial_shape), batch_size)


@dataclasses.dataclass(frozen=True, eq=False)
class Rulebook:
    """Per-offset (input_row, output_row) pairs, CSR over offsets.

    Within one offset, pairs are sorted by output row then input row, and
    both row columns are duplicate-free (one contribution per offset per
    row in either direction).
    """

    starts: np.ndarray   # (K+1,) int64
    pin: np.ndarray      # (P,) int64 input rows
    pout: np.ndarray     # (P,) int64 output rows
    out_rows: int

    @property
    def num_offsets(self) -> int:
        return self.starts.shape[0] - 1

    @property
    def num_pairs(self) -> int:
        return self.pin.shape[0]

    def pairs(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.starts[t], self.starts[t + 1]
        return self.pin[s:e], self.pout[s:e]

    def counts(self) -> np.ndarray:
        return np.diff(self.starts)


def build_submanifold_rulebook(tensor: SparseTensor,
                               kernel: KernelSpec) -> Rulebook:
    """Rulebook of a submanifold convolution: output coords = input coords.

    Pair (i, j) at centered offset o means output j gathers input i where
    coords[i] = coords[j] + o.
    """
    kernel.require_submanifold()
    if kernel.ndim != tensor.ndim:
        raise InvalidKernel("kernel dimensionality does not match tensor")
    offsets = kernel.centered_offsets()
    coords64 = tensor.coords.astype(np.int64)
    keys = tensor.keys()
    spatial = np.asarray(tensor.spatial_shape, dtype=np.int64)
    starts, pin, pout = kernels.get().subm_pairs(
        coords64, keys, offsets, spatial, axis_strides(tensor.spatial_shape))
    return Rulebook(starts, pin, pout, out_rows=tensor.num_active)


def build_downsample_rulebook(
        tensor: SparseTensor, kernel: KernelSpec
) -> tuple[np.ndarray, tuple[int, ...], Rulebook]:
    """Output coords, output shape and rulebook of a regular sparse conv.

    Output coordinate j covers input positions j*stride - pad + t per
    axis; the output set is every in-range output coordinate covered by
    at least one active input.
    """
    if kernel.ndim != tensor.ndim:
        raise InvalidKernel("kernel dimensionality does not match tensor")
    out_shape = kernel.out_shape(tensor.spatial_shape)
    out_strides = axis_strides(out_shape)
    out_cells = int(np.prod(out_shape, dtype=np.int64))
    if tensor.batch_size * out_cells >= 2**62:
        raise CoordinateOverflow("output grid overflows key space")
    tap, row, key = kernels.get().downsample_pairs(
        tensor.coords.astype(np.int64),
        np.asarray(kernel.kernel_size, dtype=np.int64),
        np.asarray(kernel.stride, dtype=np.int64),
        np.asarray(kernel.padding, dtype=np.int64),
        np.asarray(out_shape, dtype=np.int64),
        out_strides, out_cells)
    uniq = np.unique(key)
    pout = np.searchsorted(uniq, key)
    order = np.lexsort((row, pout, tap))
    tap_sorted = tap[order]
    k_total = kernel.num_offsets
    starts = np.searchsorted(tap_sorted, np.arange(k_total + 1))
    rb = Rulebook(starts.astype(np.int64), row[order], pout[order],
                  out_rows=uniq.shape[0])
    # decode unique keys back to coordinate rows
    d = kernel.ndim
    out_coords = np.empty((uniq.shape[0], 1 + d), dtype=COORD_DTYPE)
    out_coords[:, 0] = uniq // out_cells
    rem = uniq % out_cells
    for a in range(d):
        out_coords[:, 1 + a] = rem // out_strides[a]
        rem = rem % out_strides[a]
    return out_coords, out_shape, rb


def transpose_rulebook(rb: Rulebook, n_in: int) -> Rulebook:
    """Swap pair direction per offset; result is re-sorted canonically."""
    k = rb.num_offsets
    pin = rb.pout.copy()
    pout = rb.pin.copy()
    t_ids = np.repeat(np.arange(k, dtype=np.int64), rb.counts())
    order = np.lexsort((pin, pout, t_ids))
    return Rulebook(rb.starts.copy(), pin[order], pout[order], out_rows=n_in)


def sparsity(tensor: SparseTensor) -> float:
    """Fraction of grid cells not occupied by active features."""
    cells = tensor.batch_size * int(np.prod(tensor.spatial_shape, dtype=np.int64))
    return 1.0 - tensor.num_active / cells


def sparse_to_dense(tensor: SparseTensor) -> np.ndarray:
    """Scatter to a dense (batch, C, *spatial) array; inactive cells zero."""
    dense = np.zeros(
        (tensor.batch_size, *tensor.spatial_shape, tensor.channels),
        dtype=tensor.features.dtype)
    if tensor.num_active:
        idx = tuple(tensor.coords[:, a] for a in range(tensor.coords.shape[1]))
        dense[idx] = tensor.features
    return np.ascontiguousarray(np.moveaxis(dense, -1, 1))


def dense_to_sparse(dense: np.ndarray, batch_size: int | None = None
                    ) -> SparseTensor:
    """Keep cells where any channel is nonzero; coords come out sorted."""
    b = dense.shape[0] if batch_size is None else batch_size
    spatial = dense.shape[2:]
    mask = np.any(dense != 0, axis=1)
    coords = np.argwhere(mask).astype(COORD_DTYPE)
    feats = np.moveaxis(dense, 1, -1)[mask]
    return SparseTensor(coords, feats, tuple(spatial), b)
