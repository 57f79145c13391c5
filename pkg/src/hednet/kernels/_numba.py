"""Numba-jitted twins of the kernels in ``_numpy``.

Loops are single-threaded by design: the determinism contract requires
results independent of thread count, and the accumulation order must be
offset-major, pair-minor.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def subm_pairs(coords, keys, offsets, spatial, axstride):
    n = coords.shape[0]
    d = spatial.shape[0]
    k = offsets.shape[0]
    pin = np.empty(n * k, dtype=np.int64)
    pout = np.empty(n * k, dtype=np.int64)
    starts = np.zeros(k + 1, dtype=np.int64)
    p = 0
    for t in range(k):
        shift = np.int64(0)
        for a in range(d):
            shift += offsets[t, a] * axstride[a]
        for j in range(n):
            ok = True
            for a in range(d):
                c = coords[j, 1 + a] + offsets[t, a]
                if c < 0 or c >= spatial[a]:
                    ok = False
                    break
            if not ok:
                continue
            target = keys[j] + shift
            i = np.searchsorted(keys, target)
            if i < n and keys[i] == target:
                pin[p] = i
                pout[p] = j
                p += 1
        starts[t + 1] = p
    return starts, pin[:p].copy(), pout[:p].copy()


@numba.njit(cache=True)
def downsample_pairs(coords, ksize, stride, pad, out_shape, out_axstride,
                     out_batch_stride):
    n = coords.shape[0]
    d = ksize.shape[0]
    k_total = 1
    for a in range(d):
        k_total *= ksize[a]
    cap = n * k_total
    tap = np.empty(cap, dtype=np.int64)
    row = np.empty(cap, dtype=np.int64)
    key = np.empty(cap, dtype=np.int64)
    tvec = np.empty(d, dtype=np.int64)
    p = 0
    for tidx in range(k_total):
        rem = tidx
        for a in range(d - 1, -1, -1):
            tvec[a] = rem % ksize[a]
            rem //= ksize[a]
        for i in range(n):
            ok = True
            k = coords[i, 0] * out_batch_stride
            for a in range(d):
                num = coords[i, 1 + a] + pad[a] - tvec[a]
                if num % stride[a] != 0:
                    ok = False
                    break
                j = num // stride[a]
                if j < 0 or j >= out_shape[a]:
                    ok = False
                    break
                k += j * out_axstride[a]
            if not ok:
                continue
            tap[p] = tidx
            row[p] = i
            key[p] = k
            p += 1
    return tap[:p].copy(), row[:p].copy(), key[:p].copy()


@numba.njit(cache=True)
def gather_scatter(feats, w, starts, pin, pout, out):
    k = w.shape[0]
    ci = feats.shape[1]
    co = out.shape[1]
    for t in range(k):
        s = starts[t]
        e = starts[t + 1]
        if e == s:
            continue
        g = np.empty((e - s, ci), dtype=feats.dtype)
        for r in range(e - s):
            for c in range(ci):
                g[r, c] = feats[pin[s + r], c]
        b = np.dot(g, w[t])
        for r in range(e - s):
            for c in range(co):
                out[pout[s + r], c] += b[r, c]
