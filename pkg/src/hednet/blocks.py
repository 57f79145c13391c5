"""Residual and encoder-decoder blocks.

SSR: two submanifold convolutions with an identity skip.
RSR: the same structure with regular sparse convolutions (dilates coords).
SED: SSR stacks at descending resolutions with inverse-conv up-sampling
and additive skip fusion; coordinate-set preserving by construction.
DR / DED: the dense 2D counterparts operating on BEV maps.

Block forwards accept ``linear=True`` to skip relu (normalization stays,
as a pure affine map), used by influence probing where structural zeros
must not depend on activation gating.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import (KernelSpec, SparseTensor, build_coord_index,
                   build_downsample_rulebook, build_submanifold_rulebook)
from .dense import (dense_conv2d_forward, dense_deconv2d_forward,
                    norm_relu_forward_nchw)
from .errors import ShapeError
from .ops import (ConvWeights, NormParams, apply_rulebook, inv_conv_forward,
                  norm_relu_forward, rs_conv_forward)


@dataclasses.dataclass(frozen=True, eq=False)
class ConvNorm:
    """One convolution followed by its normalization parameters."""

    w: ConvWeights
    norm: NormParams


@dataclasses.dataclass(frozen=True, eq=False)
class ResidualWeights:
    """Two conv+norm layers; ``proj`` is the stride-2 skip projection of
    a downsampling DR block and is None otherwise."""

    conv1: ConvNorm
    conv2: ConvNorm
    proj: ConvNorm | None = None


@dataclasses.dataclass(frozen=True)
class SedBlockSpec:
    """Geometry of a sparse encoder-decoder block.

    ``scales=1`` degenerates to ``m`` plain SSR blocks (the single-scale
    ablation variant). Channel width is constant within a block.
    """

    scales: int
    m: int
    channels: int
    ndim: int
    down_specs: tuple[KernelSpec, ...] = ()

    def __post_init__(self):
        if self.scales < 1 or self.m < 1:
            raise ShapeError("scales and m must be >= 1")
        if self.down_specs and len(self.down_specs) != self.scales - 1:
            raise ShapeError(
                f"need {self.scales - 1} down specs, got {len(self.down_specs)}")

    def down_spec(self, i: int) -> KernelSpec:
        if self.down_specs:
            return self.down_specs[i]
        return KernelSpec.cube(self.ndim, 3, self.channels, self.channels,
                               stride=2, padding=1)


@dataclasses.dataclass(frozen=True)
class DedBlockSpec:
    """Geometry of a dense 2D encoder-decoder block."""

    scales: int
    m: int
    channels: int

    def __post_init__(self):
        if self.scales < 1 or self.m < 1:
            raise ShapeError("scales and m must be >= 1")


@dataclasses.dataclass(frozen=True, eq=False)
class EncDecWeights:
    """Weights of a SED or DED block: S x m residual stacks, S-1 downs,
    S-1 ups. For SED, downs/ups are ConvNorm; for DED, each down is a
    stride-2 ResidualWeights and each up a deconv ConvNorm."""

    stages: tuple
    downs: tuple
    ups: tuple


def _check_encdec(spec, w: EncDecWeights) -> None:
    if len(w.stages) != spec.scales or any(len(s) != spec.m for s in w.stages):
        raise ShapeError("stage weights do not match spec (scales x m)")
    if len(w.downs) != spec.scales - 1 or len(w.ups) != spec.scales - 1:
        raise ShapeError("down/up weight counts do not match spec")


def ssr_block_forward(t: SparseTensor, w: ResidualWeights,
                      kernel_size: int = 3, linear: bool = False
                      ) -> SparseTensor:
    """out = relu(N2(SS2(relu(N1(SS1(x))))) + x); coords preserved."""
    k = KernelSpec.cube(t.ndim, kernel_size, t.channels, t.channels)
    rb = build_submanifold_rulebook(t, k)   # both convs share the plan
    h = apply_rulebook(t.features, rb, w.conv1.w)
    h, _ = norm_relu_forward(h, w.conv1.norm, apply_relu=not linear)
    h = apply_rulebook(h, rb, w.conv2.w)
    h, _ = norm_relu_forward(h, w.conv2.norm, apply_relu=False)
    h = h + t.features
    if not linear:
        h = np.maximum(h, 0)
    return t.with_features(h)


def rsr_block_forward(t: SparseTensor, w: ResidualWeights,
                      kernel_size: int = 3, linear: bool = False
                      ) -> SparseTensor:
    """Residual block of two stride-1 regular sparse convolutions.

    The output coordinate set is the input set dilated twice by the
    kernel footprint; the skip adds input features where they exist.
    """
    k = KernelSpec.cube(t.ndim, kernel_size, t.channels, t.channels)
    y1, _ = rs_conv_forward(t, k, w.conv1.w)
    f1, _ = norm_relu_forward(y1.features, w.conv1.norm, apply_relu=not linear)
    y2, _ = rs_conv_forward(y1.with_features(f1), k, w.conv2.w)
    f2, _ = norm_relu_forward(y2.features, w.conv2.norm, apply_relu=False)
    rows = build_coord_index(y2.coords, y2.spatial_shape,
                             y2.batch_size).lookup(t.coords)
    f2 = f2.copy()
    f2[rows] += t.features
    if not linear:
        f2 = np.maximum(f2, 0)
    return y2.with_features(f2)


def sed_block_forward(t: SparseTensor, spec: SedBlockSpec, w: EncDecWeights,
                      linear: bool = False) -> SparseTensor:
    """Sparse encoder-decoder block.

    Encoder: per scale, SSR^m, with a strided RS conv descent between
    scales. Decoder: inverse convolutions that reuse the exact rulebook
    of their paired descent (transposed), plus additive skips. Output
    coordinate set and spatial shape equal the input's.
    """
    if t.ndim != spec.ndim or t.channels != spec.channels:
        raise ShapeError("tensor does not match SED spec")
    _check_encdec(spec, w)
    cur = t
    skips = []
    down_rbs = []
    for s in range(spec.scales):
        if s > 0:
            kd = spec.down_spec(s - 1)
            out_coords, out_shape, rb = build_downsample_rulebook(cur, kd)
            feats = apply_rulebook(cur.features, rb, w.downs[s - 1].w)
            feats, _ = norm_relu_forward(feats, w.downs[s - 1].norm,
                                         apply_relu=not linear)
            down_rbs.append(rb)
            cur = SparseTensor(out_coords, feats, out_shape, cur.batch_size)
        for r in range(spec.m):
            cur = ssr_block_forward(cur, w.stages[s][r], linear=linear)
        skips.append(cur)
    dec = skips[-1]
    for s in range(spec.scales - 1, 0, -1):
        target = skips[s - 1]
        up, _ = inv_conv_forward(dec, target.coords, target.spatial_shape,
                                 down_rbs[s - 1], w.ups[s - 1].w)
        feats, _ = norm_relu_forward(up.features, w.ups[s - 1].norm,
                                     apply_relu=not linear)
        dec = target.with_features(feats + target.features)
    return dec


def dr_block_forward(x: np.ndarray, stride: int, w: ResidualWeights,
                     linear: bool = False) -> np.ndarray:
    """Dense residual block; stride 2 halves both spatial dims and uses a
    1x1 stride-2 projection on the skip path."""
    c = x.shape[1]
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"stride-2 DR block needs even dims, got {x.shape[2:]}")
    k1 = KernelSpec.cube(2, 3, c, c, stride=stride, padding=1)
    k2 = KernelSpec.cube(2, 3, c, c)
    y, _ = dense_conv2d_forward(x, k1, w.conv1.w)
    y, _ = norm_relu_forward_nchw(y, w.conv1.norm, apply_relu=not linear)
    y, _ = dense_conv2d_forward(y, k2, w.conv2.w)
    y, _ = norm_relu_forward_nchw(y, w.conv2.norm, apply_relu=False)
    if stride == 1:
        skip = x
    else:
        if w.proj is None:
            raise ShapeError("stride-2 DR block requires projection weights")
        kp = KernelSpec.cube(2, 1, c, c, stride=2, padding=0)
        skip, _ = dense_conv2d_forward(x, kp, w.proj.w)
        skip, _ = norm_relu_forward_nchw(skip, w.proj.norm, apply_relu=False)
    y = y + skip
    if not linear:
        y = np.maximum(y, 0)
    return y


def ded_block_forward(x: np.ndarray, spec: DedBlockSpec, w: EncDecWeights,
                      linear: bool = False) -> np.ndarray:
    """Dense encoder-decoder block: same topology as SED with DR blocks,
    stride-2 DR descents and k2s2 deconvolution ascents."""
    if x.shape[1] != spec.channels:
        raise ShapeError("input channels do not match DED spec")
    div = 2 ** (spec.scales - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(
            f"spatial dims {x.shape[2:]} not divisible by {div}")
    _check_encdec(spec, w)
    c = spec.channels
    cur = x
    skips = []
    for s in range(spec.scales):
        if s > 0:
            cur = dr_block_forward(cur, 2, w.downs[s - 1], linear=linear)
        for r in range(spec.m):
            cur = dr_block_forward(cur, 1, w.stages[s][r], linear=linear)
        skips.append(cur)
    dec = skips[-1]
    kd = KernelSpec((2, 2), (2, 2), (0, 0), c, c)
    for s in range(spec.scales - 1, 0, -1):
        up = dense_deconv2d_forward(dec, kd, w.ups[s - 1].w)
        up, _ = norm_relu_forward_nchw(up, w.ups[s - 1].norm,
                                       apply_relu=not linear)
        dec = up + skips[s - 1]
    return dec
