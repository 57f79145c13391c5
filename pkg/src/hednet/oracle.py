"""Independent reference implementations and probes used by tests.

Nothing here calls the rulebook execution paths; shared code is limited
to the type definitions, so these can serve as oracles for them.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from .core import COORD_DTYPE, KernelSpec, SparseTensor, build_coord_index
from .errors import ProbeError, ShapeError, TopologyError
from .ops import ConvWeights


def dense_conv_reference(x: np.ndarray, k: KernelSpec,
                         w: ConvWeights) -> np.ndarray:
    """Direct nested-loop cross-correlation with zero padding.

    Works for any dimensionality; fixed summation order (output cell
    outer, tap inner); float64 only.
    """
    d = k.ndim
    if x.ndim != 2 + d:
        raise ShapeError(f"input rank {x.ndim} does not match kernel rank {d}")
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    in_shape = x.shape[2:]
    out_shape = k.out_shape(in_shape)
    wt = np.asarray(w.w, dtype=np.float64)
    out = np.zeros((b, w.out_channels, *out_shape), dtype=np.float64)
    taps = list(itertools.product(*(range(ks) for ks in k.kernel_size)))
    for bi in range(b):
        for j in itertools.product(*(range(s) for s in out_shape)):
            acc = np.zeros(w.out_channels, dtype=np.float64)
            for t, tap in enumerate(taps):
                pos = tuple(j[a] * k.stride[a] - k.padding[a] + tap[a]
                            for a in range(d))
                if all(0 <= pos[a] < in_shape[a] for a in range(d)):
                    acc += x[(bi, slice(None)) + pos] @ wt[t]
            out[(bi, slice(None)) + j] = acc
    if w.bias is not None:
        out += np.asarray(w.bias, dtype=np.float64).reshape(
            (1, -1) + (1,) * d)
    return out


def submanifold_reference(x: np.ndarray, active: np.ndarray, k: KernelSpec,
                          w: ConvWeights) -> np.ndarray:
    """Dense conv evaluated only at active sites, reading only active
    inputs; everything else is zero. ``active`` is a (B, *spatial) mask."""
    k.require_submanifold()
    d = k.ndim
    x = np.asarray(x, dtype=np.float64)
    in_shape = x.shape[2:]
    wt = np.asarray(w.w, dtype=np.float64)
    out = np.zeros((x.shape[0], w.out_channels, *in_shape), dtype=np.float64)
    offsets = [tuple(o) for o in k.centered_offsets()]
    for bi in range(x.shape[0]):
        for j in itertools.product(*(range(s) for s in in_shape)):
            if not active[(bi,) + j]:
                continue
            acc = np.zeros(w.out_channels, dtype=np.float64)
            for t, off in enumerate(offsets):
                pos = tuple(j[a] + off[a] for a in range(d))
                if (all(0 <= pos[a] < in_shape[a] for a in range(d))
                        and active[(bi,) + pos]):
                    acc += x[(bi, slice(None)) + pos] @ wt[t]
            if w.bias is not None:
                acc += np.asarray(w.bias, dtype=np.float64)
            out[(bi, slice(None)) + j] = acc
    return out


def finite_diff_grad(f, p0: np.ndarray, eps: float) -> np.ndarray:
    """Central differences (f(p+eps*e) - f(p-eps*e)) / 2eps per component."""
    p0 = np.asarray(p0, dtype=np.float64)
    grad = np.empty_like(p0)
    for i in range(p0.shape[0]):
        p = p0.copy()
        p[i] = p0[i] + eps
        hi = f(p)
        p[i] = p0[i] - eps
        lo = f(p)
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


@dataclasses.dataclass(frozen=True)
class InfluenceSet:
    """Output coordinates whose values change under an input perturbation."""

    coords: frozenset
    threshold: float = 1e-12

    def __contains__(self, coord) -> bool:
        return tuple(coord) in self.coords


def influence_set(pipeline, base: SparseTensor, probe,
                  delta: float = 1.0, threshold: float = 1e-12
                  ) -> InfluenceSet:
    """Run ``pipeline`` on ``base`` and on ``base`` with the probe row
    shifted by +delta on every channel; report where the output moved.

    Callers should build the pipeline in linear mode (identity
    activations) so that zero influence is structural, not a statement
    about relu gating.
    """
    row = build_coord_index(base.coords, base.spatial_shape,
                            base.batch_size).lookup_one(probe)
    if row < 0:
        raise ProbeError(f"probe coordinate {tuple(probe)} is not active")
    feats = base.features.copy()
    feats[row] += delta
    y0 = pipeline(base)
    y1 = pipeline(base.with_features(feats))
    if not np.array_equal(y0.coords, y1.coords):
        raise TopologyError("pipeline output coordinates depend on values")
    moved = np.max(np.abs(y1.features - y0.features), axis=1) > threshold
    return InfluenceSet(
        frozenset(tuple(int(v) for v in c) for c in y0.coords[moved]),
        threshold)


def random_sparse_tensor(seed: int, spatial_shape, density: float,
                         channels: int, batch_size: int = 1,
                         dtype=np.float64) -> SparseTensor:
    """Seeded random tensor: each cell active independently with the
    given probability, features standard-normal."""
    if not 0 < density <= 1:
        raise ShapeError(f"density must be in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    mask = rng.random((batch_size, *spatial_shape)) < density
    coords = np.argwhere(mask).astype(COORD_DTYPE)
    feats = rng.standard_normal((coords.shape[0], channels)).astype(dtype)
    return SparseTensor(coords, feats, tuple(spatial_shape), batch_size)


def minkowski_dilate(coords: np.ndarray, spatial_shape,
                     offsets: np.ndarray) -> set:
    """Brute-force dilation of a coordinate set by a kernel footprint,
    clipped to the grid. Returns a set of coordinate tuples."""
    out = set()
    upper = tuple(spatial_shape)
    for c in coords:
        for off in offsets:
            cand = (int(c[0]),) + tuple(int(c[1 + a] + off[a])
                                        for a in range(len(upper)))
            if all(0 <= cand[1 + a] < upper[a] for a in range(len(upper))):
                out.add(cand)
    return out
