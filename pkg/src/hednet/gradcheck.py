"""Finite-difference verification of the analytic backward passes.

Each check builds a small random instance, forms the scalar loss
sum(forward(params) * R) for a fixed random projection R, and compares
the analytic gradient against central differences in float64.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import KernelSpec
from .dense import dense_conv2d_backward, dense_conv2d_forward
from .errors import ShapeError
from .ops import (ConvWeights, NormParams, conv_backward, inv_conv_forward,
                  norm_relu_backward, norm_relu_forward, rs_conv_forward,
                  ss_conv_forward)
from .oracle import finite_diff_grad

FD_STEP = 1e-6
KINK_MARGIN = 1e-3


def _tiny_tensor(seed: int, d: int, channels: int, n_active: int = 2,
                 spatial: int = 5):
    """A few active voxels on a small grid.

    Keeping the instance tiny keeps the loss magnitude small, which is
    what bounds the round-off floor of the central difference at step
    1e-6; larger instances would drown the comparison in cancellation.
    """
    from .core import SparseTensor
    rng = np.random.default_rng(seed)
    cells = rng.choice(spatial ** d, size=n_active, replace=False)
    coords = np.zeros((n_active, 1 + d), dtype=np.int64)
    for axis in range(d):
        coords[:, 1 + axis] = (cells // spatial ** (d - 1 - axis)) % spatial
    feats = rng.standard_normal((n_active, channels)) * 0.5
    return SparseTensor.from_unsorted(coords.astype(np.int32), feats,
                                      (spatial,) * d, 1)


@dataclasses.dataclass
class GradcheckResult:
    layer: str
    max_rel_err: float
    skipped: int = 0
    worst_component: str = ""


def _rel_err(analytic: np.ndarray, fd: np.ndarray,
             mask: np.ndarray | None = None) -> tuple[float, int]:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-3)
    rel = np.abs(analytic - fd) / denom
    if mask is not None:
        rel = rel[mask]
    if rel.size == 0:
        return 0.0, -1
    i = int(np.argmax(rel))
    return float(rel[i]), i


def _pack(*arrays):
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel()
                           for a in arrays])


def _check_conv(layer: str, forward, feats, w: ConvWeights) -> GradcheckResult:
    """Generic conv check; ``forward(feats, w)`` returns (out, ctx)."""
    rng = np.random.default_rng(abs(hash(layer)) % 2**32)
    out, ctx = forward(feats, w)
    # a small projection keeps |loss| small, which keeps the central
    # difference's round-off floor well under the comparison tolerance
    proj = rng.standard_normal(out.shape) * 0.5
    grad_in, grad_w, grad_b = conv_backward(ctx, proj) if layer != "dense" \
        else dense_conv2d_backward(ctx, proj)
    analytic = _pack(grad_in, grad_w,
                     *([grad_b] if w.bias is not None else []))

    shapes = [feats.shape, w.w.shape] + \
        ([w.bias.shape] if w.bias is not None else [])

    def loss(p):
        sizes = [int(np.prod(s)) for s in shapes]
        parts = np.split(p, np.cumsum(sizes)[:-1])
        f = parts[0].reshape(shapes[0])
        ww = ConvWeights(parts[1].reshape(shapes[1]),
                         parts[2] if w.bias is not None else None)
        y, _ = forward(f, ww)
        return float(np.sum(y * proj))

    p0 = _pack(feats, w.w, *([w.bias] if w.bias is not None else []))
    fd = finite_diff_grad(loss, p0, FD_STEP)
    err, i = _rel_err(analytic, fd)
    return GradcheckResult(layer, err, worst_component=f"component {i}")


def gradcheck_ss(seed: int, d: int = 3) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    t = _tiny_tensor(seed, d, 2)
    k = KernelSpec.cube(d, 3, 2, 3)
    w = ConvWeights(rng.standard_normal((k.num_offsets, 2, 3)) * 0.5,
                    rng.standard_normal(3) * 0.5)

    def fwd(f, ww):
        out, ctx = ss_conv_forward(t.with_features(f), k, ww)
        return out.features, ctx

    return _check_conv("ss", fwd, t.features, w)


def gradcheck_rs(seed: int, d: int = 3) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    t = _tiny_tensor(seed, d, 2, spatial=6)
    k = KernelSpec.cube(d, 3, 2, 3, stride=2, padding=1)
    w = ConvWeights(rng.standard_normal((k.num_offsets, 2, 3)) * 0.5,
                    rng.standard_normal(3) * 0.5)

    def fwd(f, ww):
        out, ctx = rs_conv_forward(t.with_features(f), k, ww)
        return out.features, ctx

    return _check_conv("rs", fwd, t.features, w)


def gradcheck_inv(seed: int, d: int = 3) -> GradcheckResult:
    from .core import build_downsample_rulebook
    rng = np.random.default_rng(seed)
    base = _tiny_tensor(seed, d, 3, spatial=6)
    k = KernelSpec.cube(d, 3, 3, 3, stride=2, padding=1)
    out_coords, out_shape, rb = build_downsample_rulebook(base, k)
    feats = rng.standard_normal((rb.out_rows, 3)) * 0.5
    w = ConvWeights(rng.standard_normal((k.num_offsets, 3, 2)) * 0.5,
                    rng.standard_normal(2) * 0.5)
    from .core import SparseTensor
    coarse = SparseTensor(out_coords, feats, out_shape, base.batch_size)

    def fwd(f, ww):
        out, ctx = inv_conv_forward(coarse.with_features(f), base.coords,
                                    base.spatial_shape, rb, ww)
        return out.features, ctx

    return _check_conv("inv", fwd, feats, w)


def gradcheck_norm(seed: int) -> GradcheckResult:
    """Norm + relu; components whose pre-activation sits within the kink
    margin are skipped and counted."""
    rng = np.random.default_rng(seed)
    n, c = 8, 4
    x = rng.standard_normal((n, c)) * 2.0
    p = NormParams(rng.standard_normal(c) + 1.5, rng.standard_normal(c),
                   rng.standard_normal(c) * 0.3,
                   rng.random(c) + 0.5)
    proj = rng.standard_normal((n, c))
    out, saved = norm_relu_forward(x, p)
    pre = saved.gamma * saved.x_hat + np.asarray(p.beta)
    gx, gg, gb = norm_relu_backward(saved, proj)
    analytic = _pack(gx, gg, gb)

    def loss(pvec):
        parts = np.split(pvec, [n * c, n * c + c])
        xx = parts[0].reshape(n, c)
        pp = NormParams(parts[1], parts[2], p.running_mean, p.running_var)
        y, _ = norm_relu_forward(xx, pp)
        return float(np.sum(y * proj))

    fd = finite_diff_grad(loss, _pack(x, p.gamma, p.beta), FD_STEP)
    clear = np.abs(pre) >= KINK_MARGIN                # per-element
    chan_clear = np.all(clear, axis=0)                # for gamma/beta
    mask = _pack(clear, chan_clear, chan_clear).astype(bool)
    err, i = _rel_err(analytic, fd, mask)
    return GradcheckResult("norm", err, skipped=int((~mask).sum()),
                           worst_component=f"component {i}")


def gradcheck_dense(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 3)) * 0.5
    k = KernelSpec.cube(2, 3, 2, 2)
    w = ConvWeights(rng.standard_normal((9, 2, 2)) * 0.5,
                    rng.standard_normal(2) * 0.5)

    def fwd(f, ww):
        return dense_conv2d_forward(f.reshape(x.shape), k, ww)

    return _check_conv("dense", fwd, x, w)


LAYERS = {
    "ss": gradcheck_ss,
    "rs": gradcheck_rs,
    "inv": gradcheck_inv,
    "norm": lambda seed, d=3: gradcheck_norm(seed),
    "dense": lambda seed, d=3: gradcheck_dense(seed),
}


def run_gradchecks(layers, seed: int, d: int = 3) -> list[GradcheckResult]:
    results = []
    for name in layers:
        if name not in LAYERS:
            raise ShapeError(f"unknown gradcheck layer {name!r}")
        results.append(LAYERS[name](seed, d=d))
    return results
