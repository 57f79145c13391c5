"""End-to-end assembly: voxelization, sparse backbone, BEV compression,
dense backbone.

The pipeline is: dynamic voxel feature encoding (mean pooling, no
per-voxel point cap) -> linear stem projection -> stem SSR blocks ->
per stage an optional strided RS conv (where channel width changes)
followed by one SED block -> BEV compression -> a stack of DED blocks.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .blocks import (ConvNorm, DedBlockSpec, EncDecWeights, ResidualWeights,
                     SedBlockSpec, ded_block_forward, sed_block_forward,
                     ssr_block_forward)
from .core import (COORD_DTYPE, KernelSpec, SparseTensor, sparse_to_dense,
                   sparsity)
from .errors import ConfigError, ShapeError
from .ops import ConvWeights, NormParams, norm_relu_forward, rs_conv_forward

GRID_TOLERANCE = 1e-6


@dataclasses.dataclass(frozen=True)
class VoxelGridSpec:
    """Metric extent and voxel size per point axis (x, y, z order)."""

    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    voxel_size: tuple[float, float, float]

    def __post_init__(self):
        for a in range(3):
            if not self.range_max[a] > self.range_min[a]:
                raise ConfigError("range_max must exceed range_min")
            if not self.voxel_size[a] > 0:
                raise ConfigError("voxel_size must be positive")

    def grid_dims(self) -> tuple[int, int, int]:
        """Cells per axis (x, y, z); snaps near-integer ratios so e.g.
        150.4 / 0.08 derives to exactly 1880."""
        dims = []
        for a in range(3):
            q = (self.range_max[a] - self.range_min[a]) / self.voxel_size[a]
            r = round(q)
            dims.append(int(r) if abs(q - r) <= GRID_TOLERANCE else int(np.floor(q)))
        if any(d < 1 for d in dims):
            raise ConfigError(f"degenerate grid dims {dims}")
        return tuple(dims)

    def spatial_shape(self, dimensionality: int) -> tuple[int, ...]:
        """Tensor spatial shape: (z, y, x) for 3D, (y, x) for 2D."""
        dx, dy, dz = self.grid_dims()
        if dimensionality == 3:
            return (dz, dy, dx)
        if dimensionality == 2:
            return (dy, dx)
        raise ConfigError(f"dimensionality must be 2 or 3, got {dimensionality}")


def voxelize_dynamic(points: np.ndarray, spec: VoxelGridSpec,
                     dimensionality: int = 3, batch_index: int = 0,
                     batch_size: int = 1, dtype=np.float64,
                     stats: dict | None = None) -> SparseTensor:
    """Dynamic voxel feature encoding: mean-pool all points per voxel.

    Per-point feature vector: (x, y, z, extras..., offsets from the
    voxel center). Points outside [range_min, range_max) are dropped;
    non-finite points are dropped and counted. Points are canonically
    ordered (voxel key, then value) before averaging, so the result is
    bitwise permutation-invariant.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        else:
            raise ShapeError(f"points must be (P, >=3), got {pts.shape}")
    shape = spec.spatial_shape(dimensionality)
    dims = spec.grid_dims()                       # (x, y, z)
    n_extra = pts.shape[1] - 3
    feat_width = 3 + n_extra + 3
    finite = np.all(np.isfinite(pts), axis=1)
    if stats is not None:
        stats["points_in"] = pts.shape[0]
        stats["dropped_nonfinite"] = int(pts.shape[0] - finite.sum())
    pts = pts[finite]
    lo = np.asarray(spec.range_min)
    hi = np.asarray(spec.range_max)
    size = np.asarray(spec.voxel_size)
    in_range = np.all((pts[:, :3] >= lo) & (pts[:, :3] < hi), axis=1)
    pts = pts[in_range]
    if stats is not None:
        stats["dropped_out_of_range"] = int(in_range.shape[0] - in_range.sum())
    if pts.shape[0] == 0:
        t = SparseTensor.empty(shape, feat_width, batch_size, dtype=dtype)
        if stats is not None:
            stats["voxels"] = 0
        return t
    v = np.floor((pts[:, :3] - lo) / size).astype(np.int64)
    # p < range_max guarantees v < dims mathematically; any v == dims is a
    # floating-point overshoot of at most one ulp, clamped back in.
    v = np.clip(v, 0, np.asarray(dims) - 1)
    center = lo + (v + 0.5) * size
    feats = np.concatenate([pts, pts[:, :3] - center], axis=1)
    if dimensionality == 3:
        coords = np.column_stack(
            [np.full(v.shape[0], batch_index), v[:, 2], v[:, 1], v[:, 0]])
    else:
        coords = np.column_stack(
            [np.full(v.shape[0], batch_index), v[:, 1], v[:, 0]])
    strides = np.ones(len(shape), dtype=np.int64)
    for a in range(len(shape) - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    keys = coords[:, 1:] @ strides
    order = np.lexsort(tuple(feats[:, c] for c in range(feats.shape[1] - 1, -1, -1))
                       + (keys,))
    keys = keys[order]
    feats = feats[order]
    coords = coords[order]
    starts = np.nonzero(np.r_[True, np.diff(keys) != 0])[0]
    sums = np.add.reduceat(feats, starts, axis=0)
    counts = np.diff(np.r_[starts, keys.shape[0]])
    mean = (sums / counts[:, None]).astype(dtype)
    t = SparseTensor(coords[starts].astype(COORD_DTYPE), mean, shape, batch_size)
    if stats is not None:
        stats["voxels"] = t.num_active
    return t


def bev_compress(t: SparseTensor) -> np.ndarray:
    """Fold the vertical axis into channels: (B, C, D, H, W) sparse input
    becomes a dense (B, D*C, H, W) map with channel index z*C + c."""
    if t.ndim != 3:
        raise ShapeError("bev_compress expects a 3D sparse tensor")
    depth, h, w = t.spatial_shape
    c = t.channels
    out = np.zeros((t.batch_size, depth * c, h, w), dtype=t.features.dtype)
    if t.num_active:
        b = t.coords[:, 0]
        ch = t.coords[:, 1].astype(np.int64)[:, None] * c + np.arange(c)[None, :]
        out[b[:, None], ch, t.coords[:, 2][:, None], t.coords[:, 3][:, None]] = \
            t.features
    return out


@dataclasses.dataclass(frozen=True)
class StagePlan:
    channels: int
    stride: int


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    """Full network description; mirrors the JSON config file."""

    dimensionality: int
    grid: VoxelGridSpec
    stem_channels: int
    stages: tuple[StagePlan, ...]
    point_features: int = 1
    stem_blocks: int = 2
    sed_scales: int = 3
    m: int = 2
    ded_count: int = 4
    ded_scales: int = 3
    ded_m: int = 2

    def __post_init__(self):
        if self.dimensionality not in (2, 3):
            raise ConfigError("dimensionality must be 2 or 3")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        width = self.stem_channels
        for i, st in enumerate(self.stages):
            if st.stride < 1:
                raise ConfigError(f"stage {i} stride must be >= 1")
            if st.stride == 1 and st.channels != width:
                raise ConfigError(
                    f"stage {i} has stride 1 but changes width "
                    f"{width} -> {st.channels}; stride-1 stages have no "
                    f"downsample conv")
            width = st.channels
        if min(self.sed_scales, self.m, self.ded_scales, self.ded_m) < 1:
            raise ConfigError("scale/repeat counts must be >= 1")
        if self.ded_count < 0:
            raise ConfigError("ded_count must be >= 0")

    @property
    def point_feature_width(self) -> int:
        return 3 + self.point_features + 3

    def backbone_shapes(self) -> list[tuple[int, ...]]:
        """Spatial shape entering each stage, plus the final shape."""
        shape = self.grid.spatial_shape(self.dimensionality)
        shapes = [shape]
        for st in self.stages:
            if st.stride > 1:
                k = KernelSpec.cube(self.dimensionality, 3, 1, 1,
                                    stride=st.stride, padding=1)
                shape = k.out_shape(shape)
            shapes.append(shape)
        return shapes

    def bev_channels(self) -> int:
        final = self.backbone_shapes()[-1]
        c = self.stages[-1].channels
        return c * final[0] if self.dimensionality == 3 else c

    def bev_shape(self) -> tuple[int, int]:
        final = self.backbone_shapes()[-1]
        return final[-2], final[-1]


_CONFIG_KEYS = {"dimensionality", "grid", "stem_channels", "stages",
                "point_features", "stem_blocks", "sed_scales", "m",
                "ded_count", "ded_scales", "ded_m"}


def config_from_dict(data: dict) -> NetworkConfig:
    """Parse the JSON config structure; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("dimensionality", "grid", "stem_channels", "stages"):
        if key not in data:
            raise ConfigError(f"missing config key: {key}")
    grid_data = data["grid"]
    g_unknown = set(grid_data) - {"range_min", "range_max", "voxel_size"}
    if g_unknown:
        raise ConfigError(f"unknown grid keys: {sorted(g_unknown)}")
    grid = VoxelGridSpec(tuple(grid_data["range_min"]),
                         tuple(grid_data["range_max"]),
                         tuple(grid_data["voxel_size"]))
    stages = []
    for i, st in enumerate(data["stages"]):
        s_unknown = set(st) - {"channels", "stride"}
        if s_unknown:
            raise ConfigError(f"unknown stage keys: {sorted(s_unknown)}")
        stages.append(StagePlan(int(st["channels"]), int(st.get("stride", 2))))
    kwargs = {k: int(data[k]) for k in
              ("point_features", "stem_blocks", "sed_scales", "m",
               "ded_count", "ded_scales", "ded_m") if k in data}
    return NetworkConfig(int(data["dimensionality"]), grid,
                         int(data["stem_channels"]), tuple(stages), **kwargs)


def config_to_dict(cfg: NetworkConfig) -> dict:
    return {
        "dimensionality": cfg.dimensionality,
        "grid": {"range_min": list(cfg.grid.range_min),
                 "range_max": list(cfg.grid.range_max),
                 "voxel_size": list(cfg.grid.voxel_size)},
        "stem_channels": cfg.stem_channels,
        "stages": [{"channels": s.channels, "stride": s.stride}
                   for s in cfg.stages],
        "point_features": cfg.point_features,
        "stem_blocks": cfg.stem_blocks,
        "sed_scales": cfg.sed_scales,
        "m": cfg.m,
        "ded_count": cfg.ded_count,
        "ded_scales": cfg.ded_scales,
        "ded_m": cfg.ded_m,
    }


def param_specs(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter records and shapes, in canonical order.

    Conv records are (K, C_in, C_out); norm records are (4, C) rows
    (gamma, beta, running_mean, running_var); the stem projection is
    (in_features, stem_channels).
    """
    specs: list[tuple[str, tuple[int, ...]]] = []
    d = cfg.dimensionality
    k3 = 3 ** d
    specs.append(("vfe.linear.w", (cfg.point_feature_width, cfg.stem_channels)))
    specs.append(("vfe.norm", (4, cfg.stem_channels)))

    def residual(prefix: str, c: int, kk: int, with_proj: bool = False):
        specs.append((f"{prefix}.conv1.w", (kk, c, c)))
        specs.append((f"{prefix}.norm1", (4, c)))
        specs.append((f"{prefix}.conv2.w", (kk, c, c)))
        specs.append((f"{prefix}.norm2", (4, c)))
        if with_proj:
            specs.append((f"{prefix}.proj.w", (1, c, c)))
            specs.append((f"{prefix}.proj.norm", (4, c)))

    for b in range(cfg.stem_blocks):
        residual(f"stem.ssr{b}", cfg.stem_channels, k3)
    width = cfg.stem_channels
    for i, st in enumerate(cfg.stages):
        if st.stride > 1:
            specs.append((f"stage{i}.down.w", (k3, width, st.channels)))
            specs.append((f"stage{i}.down.norm", (4, st.channels)))
        width = st.channels
        for j in range(cfg.sed_scales):
            for r in range(cfg.m):
                residual(f"stage{i}.sed.scale{j}.ssr{r}", width, k3)
        for j in range(1, cfg.sed_scales):
            specs.append((f"stage{i}.sed.down{j}.w", (k3, width, width)))
            specs.append((f"stage{i}.sed.down{j}.norm", (4, width)))
            specs.append((f"stage{i}.sed.up{j}.w", (k3, width, width)))
            specs.append((f"stage{i}.sed.up{j}.norm", (4, width)))
    cb = cfg.bev_channels()
    for b in range(cfg.ded_count):
        for j in range(cfg.ded_scales):
            for r in range(cfg.ded_m):
                residual(f"ded{b}.scale{j}.dr{r}", cb, 9)
        for j in range(1, cfg.ded_scales):
            residual(f"ded{b}.down{j}", cb, 9, with_proj=True)
            specs.append((f"ded{b}.up{j}.w", (4, cb, cb)))
            specs.append((f"ded{b}.up{j}.norm", (4, cb)))
    return specs


def init_weights(cfg: NetworkConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded random weights: fan-in-scaled normal with gain sqrt(2) for
    convolutions, identity statistics for normalizations."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in param_specs(cfg):
        if name.endswith(("norm", "norm1", "norm2")):
            arr = np.zeros(shape, dtype=np.float32)
            arr[0] = 1.0   # gamma
            arr[3] = 1.0   # running_var
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            arr = (rng.standard_normal(shape) * std).astype(np.float32)
        out[name] = arr
    return out


def _get(weights: dict, name: str) -> np.ndarray:
    try:
        return weights[name]
    except KeyError:
        raise ConfigError(f"missing weight record: {name}") from None


def _conv(weights, name, dtype) -> ConvWeights:
    return ConvWeights(np.asarray(_get(weights, name), dtype=dtype))


def _norm(weights, name, dtype) -> NormParams:
    arr = np.asarray(_get(weights, name), dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] != 4:
        raise ConfigError(f"norm record {name} must have shape (4, C)")
    return NormParams(arr[0], arr[1], arr[2], arr[3])


def _residual_w(weights, prefix, dtype, with_proj=False) -> ResidualWeights:
    proj = None
    if with_proj:
        proj = ConvNorm(_conv(weights, f"{prefix}.proj.w", dtype),
                        _norm(weights, f"{prefix}.proj.norm", dtype))
    return ResidualWeights(
        ConvNorm(_conv(weights, f"{prefix}.conv1.w", dtype),
                 _norm(weights, f"{prefix}.norm1", dtype)),
        ConvNorm(_conv(weights, f"{prefix}.conv2.w", dtype),
                 _norm(weights, f"{prefix}.norm2", dtype)),
        proj)


def _encdec_w(weights, prefix, scales, m, dtype,
              dense: bool) -> EncDecWeights:
    stages = tuple(
        tuple(_residual_w(weights,
                          f"{prefix}.scale{j}." + ("dr" if dense else "ssr")
                          + str(r), dtype)
              for r in range(m))
        for j in range(scales))
    if dense:
        downs = tuple(_residual_w(weights, f"{prefix}.down{j}", dtype,
                                  with_proj=True)
                      for j in range(1, scales))
    else:
        downs = tuple(ConvNorm(_conv(weights, f"{prefix}.down{j}.w", dtype),
                               _norm(weights, f"{prefix}.down{j}.norm", dtype))
                      for j in range(1, scales))
    ups = tuple(ConvNorm(_conv(weights, f"{prefix}.up{j}.w", dtype),
                         _norm(weights, f"{prefix}.up{j}.norm", dtype))
                for j in range(1, scales))
    return EncDecWeights(stages, downs, ups)


def check_weights(cfg: NetworkConfig, weights: dict) -> None:
    """Verify the weight dict structurally matches the config."""
    for name, shape in param_specs(cfg):
        arr = _get(weights, name)
        if tuple(arr.shape) != shape:
            raise ConfigError(
                f"weight record {name} has shape {tuple(arr.shape)}, "
                f"expected {shape}")


class _Trace:
    def __init__(self, sink):
        self.sink = sink
        self.t0 = time.perf_counter()

    def record(self, name: str, tensor) -> None:
        if self.sink is None:
            return
        now = time.perf_counter()
        if isinstance(tensor, SparseTensor):
            active = tensor.num_active
            sp = sparsity(tensor)
        else:
            active = int(np.count_nonzero(np.any(tensor != 0, axis=1)))
            cells = int(np.prod(tensor.shape[2:])) * tensor.shape[0]
            sp = 1.0 - active / cells
        self.sink.append({"name": name, "active": active,
                          "sparsity": sp, "seconds": now - self.t0})
        self.t0 = time.perf_counter()


def hednet_forward(points: np.ndarray, cfg: NetworkConfig,
                   weights: dict, precision=np.float64,
                   trace: list | None = None) -> np.ndarray:
    """Full forward pass: points in, BEV feature map out."""
    dtype = np.dtype(precision)
    tr = _Trace(trace)
    t = voxelize_dynamic(points, cfg.grid, cfg.dimensionality, dtype=dtype)
    tr.record("voxelize", t)
    if t.channels != cfg.point_feature_width:
        raise ConfigError(
            f"point feature width {t.channels} does not match config "
            f"{cfg.point_feature_width}")
    lin = np.asarray(_get(weights, "vfe.linear.w"), dtype=dtype)
    if lin.shape[0] != t.channels:
        raise ConfigError("vfe.linear.w does not match point feature width")
    feats = t.features @ lin
    feats, _ = norm_relu_forward(feats, _norm(weights, "vfe.norm", dtype))
    t = t.with_features(feats)
    tr.record("vfe", t)
    for b in range(cfg.stem_blocks):
        t = ssr_block_forward(t, _residual_w(weights, f"stem.ssr{b}", dtype))
        tr.record(f"stem.ssr{b}", t)
    width = cfg.stem_channels
    for i, st in enumerate(cfg.stages):
        if st.stride > 1:
            k = KernelSpec.cube(cfg.dimensionality, 3, width, st.channels,
                                stride=st.stride, padding=1)
            t, _ = rs_conv_forward(t, k, _conv(weights, f"stage{i}.down.w",
                                               dtype))
            f, _ = norm_relu_forward(t.features,
                                     _norm(weights, f"stage{i}.down.norm",
                                           dtype))
            t = t.with_features(f)
            tr.record(f"stage{i}.down", t)
        width = st.channels
        spec = SedBlockSpec(cfg.sed_scales, cfg.m, width, cfg.dimensionality)
        t = sed_block_forward(t, spec,
                              _encdec_w(weights, f"stage{i}.sed",
                                        cfg.sed_scales, cfg.m, dtype,
                                        dense=False))
        tr.record(f"stage{i}.sed", t)
    x = bev_compress(t) if cfg.dimensionality == 3 else sparse_to_dense(t)
    tr.record("bev_compress", x)
    cb = cfg.bev_channels()
    if x.shape[1] != cb:
        raise ConfigError(f"BEV channel mismatch: {x.shape[1]} vs {cb}")
    div = 2 ** (cfg.ded_scales - 1)
    if cfg.ded_count and (x.shape[2] % div or x.shape[3] % div):
        raise ConfigError(
            f"BEV dims {x.shape[2:]} not divisible by {div} for the DED stack")
    dspec = DedBlockSpec(cfg.ded_scales, cfg.ded_m, cb)
    for b in range(cfg.ded_count):
        x = ded_block_forward(x, dspec,
                              _encdec_w(weights, f"ded{b}", cfg.ded_scales,
                                        cfg.ded_m, dtype, dense=True))
        tr.record(f"ded{b}", x)
    return x


def hednet2d_forward(points: np.ndarray, cfg: NetworkConfig, weights: dict,
                     precision=np.float64,
                     trace: list | None = None) -> np.ndarray:
    """Pillar-style variant: same pipeline over 2D sparse tensors."""
    if cfg.dimensionality != 2:
        raise ConfigError("hednet2d_forward requires a 2D config")
    return hednet_forward(points, cfg, weights, precision=precision,
                          trace=trace)
