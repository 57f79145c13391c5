"""Minimal dense 2D machinery: convolution, k2s2 deconvolution, norm reuse.

Convolutions are cross-correlations (no kernel flip), matching the
gather convention of the sparse ops so dense/sparse comparisons need no
re-indexing. Accumulation is tap-by-tap in lexicographic order.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import KernelSpec
from .errors import ShapeError
from .ops import ConvWeights, NormParams, norm_relu_backward, norm_relu_forward


@dataclasses.dataclass(frozen=True, eq=False)
class DenseConvContext:
    x: np.ndarray
    kernel: KernelSpec
    weights: ConvWeights


def _tap_slices(kernel: KernelSpec, out_shape):
    kh, kw = kernel.kernel_size
    sh, sw = kernel.stride
    oh, ow = out_shape
    for ky in range(kh):
        for kx in range(kw):
            yield (slice(ky, ky + sh * (oh - 1) + 1, sh),
                   slice(kx, kx + sw * (ow - 1) + 1, sw))


def dense_conv2d_forward(x: np.ndarray, k: KernelSpec, w: ConvWeights
                         ) -> tuple[np.ndarray, DenseConvContext]:
    """Standard zero-padded cross-correlation on (B, C, H, W) input."""
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    if x.shape[1] != w.in_channels or k.num_offsets != w.w.shape[0]:
        raise ShapeError("weights do not match input channels / kernel size")
    out_shape = k.out_shape(x.shape[2:])
    ph, pw = k.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros((x.shape[0], w.out_channels, *out_shape), dtype=x.dtype)
    wt = w.w.astype(x.dtype, copy=False)
    for t, (sy, sx) in enumerate(_tap_slices(k, out_shape)):
        y += np.einsum("bihw,io->bohw", xp[:, :, sy, sx], wt[t])
    if w.bias is not None:
        y += w.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return y, DenseConvContext(x, k, w)


def dense_conv2d_backward(ctx: DenseConvContext, grad_out: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Transposed relations of the dense cross-correlation."""
    x, k, w = ctx.x, ctx.kernel, ctx.weights
    out_shape = k.out_shape(x.shape[2:])
    if grad_out.shape != (x.shape[0], w.out_channels, *out_shape):
        raise ShapeError(f"grad_out shape {grad_out.shape} unexpected")
    ph, pw = k.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w.w, dtype=grad_out.dtype)
    wt = w.w.astype(grad_out.dtype, copy=False)
    for t, (sy, sx) in enumerate(_tap_slices(k, out_shape)):
        grad_w[t] = np.einsum("bihw,bohw->io", xp[:, :, sy, sx], grad_out)
        grad_xp[:, :, sy, sx] += np.einsum("bohw,io->bihw", grad_out, wt[t])
    h, wd = x.shape[2:]
    grad_x = grad_xp[:, :, ph:ph + h, pw:pw + wd]
    grad_b = grad_out.sum(axis=(0, 2, 3)) if w.bias is not None else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def dense_deconv2d_forward(x: np.ndarray, k: KernelSpec, w: ConvWeights
                           ) -> np.ndarray:
    """Transposed convolution, kernel 2 stride 2 only: exact shape doubling."""
    if k.kernel_size != (2, 2) or k.stride != (2, 2) or k.padding != (0, 0):
        raise ShapeError("deconvolution supports kernel 2, stride 2, pad 0 only")
    if x.shape[1] != w.in_channels or w.w.shape[0] != 4:
        raise ShapeError("weights do not match input channels / kernel size")
    b, _, h, wd = x.shape
    y = np.zeros((b, w.out_channels, 2 * h, 2 * wd), dtype=x.dtype)
    wt = w.w.astype(x.dtype, copy=False)
    for t, (a, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        y[:, :, a::2, c::2] = np.einsum("bihw,io->bohw", x, wt[t])
    if w.bias is not None:
        y += w.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return y


def norm_relu_forward_nchw(x: np.ndarray, p: NormParams,
                           apply_relu: bool = True):
    """Per-channel norm/relu on a (B, C, H, W) map via the (N, C) kernel."""
    b, c, h, w = x.shape
    flat = np.moveaxis(x, 1, -1).reshape(-1, c)
    out, saved = norm_relu_forward(flat, p, apply_relu)
    return np.ascontiguousarray(
        np.moveaxis(out.reshape(b, h, w, c), -1, 1)), saved


def norm_relu_backward_nchw(saved, grad_out: np.ndarray):
    b, c, h, w = grad_out.shape
    flat = np.moveaxis(grad_out, 1, -1).reshape(-1, c)
    gx, gg, gb = norm_relu_backward(saved, flat)
    gx = np.ascontiguousarray(np.moveaxis(gx.reshape(b, h, w, c), -1, 1))
    return gx, gg, gb
