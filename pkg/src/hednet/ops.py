"""Sparse convolution execution and per-channel normalization.

All forwards are pure functions returning a saved context for the
matching explicit backward. There is no autograd tape: callers chain
backwards by hand, which keeps the differentiation surface auditable.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kernels
from .core import (KernelSpec, Rulebook, SparseTensor,
                   build_downsample_rulebook, build_submanifold_rulebook,
                   transpose_rulebook)
from .errors import ShapeError, TopologyError


@dataclasses.dataclass(frozen=True, eq=False)
class ConvWeights:
    """Per-offset weight matrices (K, C_in, C_out) plus optional bias."""

    w: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.w)
        if w.ndim != 3:
            raise ShapeError(f"weights must be (K, C_in, C_out), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ShapeError("non-finite weight entries")
        object.__setattr__(self, "w", w)
        if self.bias is not None:
            b = np.asarray(self.bias)
            if b.shape != (w.shape[2],):
                raise ShapeError(f"bias shape {b.shape} != ({w.shape[2]},)")
            object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w.shape[2]

    def transposed(self) -> "ConvWeights":
        """Swap in/out channels per offset (for adjoint applications)."""
        return ConvWeights(np.ascontiguousarray(self.w.transpose(0, 2, 1)))


@dataclasses.dataclass(frozen=True, eq=False)
class NormParams:
    """Inference-mode per-channel affine normalization parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma).shape
        for name in ("beta", "running_mean", "running_var"):
            if np.asarray(getattr(self, name)).shape != c:
                raise ShapeError(f"norm parameter {name} shape mismatch")
        if np.any(np.asarray(self.running_var) < 0):
            raise ShapeError("running_var must be non-negative")
        if not self.eps > 0:
            raise ShapeError("eps must be positive")

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "NormParams":
        return cls(np.ones(channels, dtype=dtype),
                   np.zeros(channels, dtype=dtype),
                   np.zeros(channels, dtype=dtype),
                   np.ones(channels, dtype=dtype))

    @property
    def channels(self) -> int:
        return np.asarray(self.gamma).shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class ConvSavedContext:
    """Everything the backward pass of a conv needs."""

    rulebook: Rulebook
    features_in: np.ndarray
    weights: ConvWeights


@dataclasses.dataclass(frozen=True, eq=False)
class NormSavedContext:
    x_hat: np.ndarray
    active_mask: np.ndarray | None   # None when relu was not applied
    gamma: np.ndarray
    inv_std: np.ndarray


def apply_rulebook(features_in: np.ndarray, rb: Rulebook,
                   w: ConvWeights) -> np.ndarray:
    """Gather-matmul-scatter over the rulebook; rows with no incoming
    pairs end up at the bias (or zero)."""
    if w.w.shape[0] != rb.num_offsets:
        raise ShapeError(
            f"{w.w.shape[0]} weight offsets vs {rb.num_offsets} rulebook offsets")
    if features_in.shape[1] != w.in_channels:
        raise ShapeError(
            f"{features_in.shape[1]} input channels vs weights {w.in_channels}")
    dtype = features_in.dtype
    out = np.zeros((rb.out_rows, w.out_channels), dtype=dtype)
    kernels.get().gather_scatter(features_in, w.w.astype(dtype, copy=False),
                                 rb.starts, rb.pin, rb.pout, out)
    if w.bias is not None:
        out += w.bias.astype(dtype, copy=False)
    return out


def ss_conv_forward(t: SparseTensor, k: KernelSpec, w: ConvWeights
                    ) -> tuple[SparseTensor, ConvSavedContext]:
    """Submanifold sparse convolution: coordinate set is preserved."""
    if t.channels != k.in_channels or w.in_channels != k.in_channels:
        raise ShapeError("channel counts disagree with KernelSpec")
    rb = build_submanifold_rulebook(t, k)
    feats = apply_rulebook(t.features, rb, w)
    return t.with_features(feats), ConvSavedContext(rb, t.features, w)


def rs_conv_forward(t: SparseTensor, k: KernelSpec, w: ConvWeights
                    ) -> tuple[SparseTensor, ConvSavedContext]:
    """Regular sparse convolution: outputs at every covered site."""
    if t.channels != k.in_channels or w.in_channels != k.in_channels:
        raise ShapeError("channel counts disagree with KernelSpec")
    out_coords, out_shape, rb = build_downsample_rulebook(t, k)
    feats = apply_rulebook(t.features, rb, w)
    out = SparseTensor(out_coords, feats, out_shape, t.batch_size)
    return out, ConvSavedContext(rb, t.features, w)


def inv_conv_forward(t: SparseTensor, target_coords: np.ndarray,
                     target_shape, down_rb: Rulebook, w: ConvWeights
                     ) -> tuple[SparseTensor, ConvSavedContext]:
    """Inverse sparse convolution: executes the transposed downsample plan.

    Output coordinates are pinned to ``target_coords`` (the set the
    paired downsample was built from), which is what makes up-sampling
    reach exactly the pre-downsampling sites.
    """
    if t.num_active != down_rb.out_rows:
        raise TopologyError(
            f"tensor has {t.num_active} rows but the downsample rulebook "
            f"produced {down_rb.out_rows}")
    n_target = np.asarray(target_coords).shape[0]
    if down_rb.num_pairs and int(down_rb.pin.max()) >= n_target:
        raise TopologyError("downsample rulebook references rows beyond the "
                            "target coordinate set")
    rb_t = transpose_rulebook(down_rb, n_in=n_target)
    feats = apply_rulebook(t.features, rb_t, w)
    out = SparseTensor(np.asarray(target_coords), feats, tuple(target_shape),
                       t.batch_size)
    return out, ConvSavedContext(rb_t, t.features, w)


def conv_backward(ctx: ConvSavedContext, grad_out: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of the gather-scatter linear map.

    grad_in flows through the transposed rulebook with transposed weight
    matrices; grad_w[t] accumulates x[i]^T grad_out[j] over the offset's
    pairs; grad_bias is the column sum of grad_out.
    """
    rb = ctx.rulebook
    if grad_out.shape != (rb.out_rows, ctx.weights.out_channels):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != "
            f"({rb.out_rows}, {ctx.weights.out_channels})")
    n_in = ctx.features_in.shape[0]
    rb_t = transpose_rulebook(rb, n_in=n_in)
    grad_in = apply_rulebook(grad_out, rb_t, ctx.weights.transposed())
    grad_w = np.zeros_like(ctx.weights.w, dtype=grad_out.dtype)
    for t in range(rb.num_offsets):
        pin, pout = rb.pairs(t)
        if pin.shape[0]:
            grad_w[t] = ctx.features_in[pin].T @ grad_out[pout]
    grad_bias = grad_out.sum(axis=0) if ctx.weights.bias is not None else None
    return grad_in, grad_w, grad_bias


def norm_relu_forward(features: np.ndarray, p: NormParams,
                      apply_relu: bool = True
                      ) -> tuple[np.ndarray, NormSavedContext]:
    """y = relu(gamma * (x - mean) / sqrt(var + eps) + beta), per channel.

    Uses stored (inference-mode) statistics only.
    """
    if features.shape[1] != p.channels:
        raise ShapeError(
            f"{features.shape[1]} channels vs norm params {p.channels}")
    dtype = features.dtype
    inv_std = 1.0 / np.sqrt(np.asarray(p.running_var, dtype=dtype) + p.eps)
    gamma = np.asarray(p.gamma, dtype=dtype)
    x_hat = (features - np.asarray(p.running_mean, dtype=dtype)) * inv_std
    pre = gamma * x_hat + np.asarray(p.beta, dtype=dtype)
    if apply_relu:
        mask = pre > 0
        out = np.where(mask, pre, dtype.type(0))
    else:
        mask = None
        out = pre
    return out, NormSavedContext(x_hat, mask, gamma, inv_std)


def norm_relu_backward(saved: NormSavedContext, grad_out: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain rule of the affine + relu map; relu subgradient at 0 is 0."""
    if grad_out.shape != saved.x_hat.shape:
        raise ShapeError("grad_out shape does not match saved activations")
    g = grad_out if saved.active_mask is None else grad_out * saved.active_mask
    grad_x = g * (saved.gamma * saved.inv_std)
    grad_gamma = (g * saved.x_hat).sum(axis=0)
    grad_beta = g.sum(axis=0)
    return grad_x, grad_gamma, grad_beta
