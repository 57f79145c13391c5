"""Pure-numpy implementations of the hot rulebook/convolution kernels.

Every function here has a signature-identical twin in ``_numba``; the
active backend is selected via :mod:`hednet.kernels`.
"""

import numpy as np


def subm_pairs(coords, keys, offsets, spatial, axstride):
    """Enumerate submanifold (input_row, output_row) pairs per kernel offset.

    ``coords`` is the sorted (N, 1+d) int64 coordinate array, ``keys`` its
    linear keys, ``offsets`` the (K, d) centered offsets in lexicographic
    order. Returns CSR-style ``(starts, pin, pout)`` with pairs sorted by
    output row within each offset.
    """
    n = coords.shape[0]
    k = offsets.shape[0]
    starts = np.zeros(k + 1, dtype=np.int64)
    pin_parts = []
    pout_parts = []
    rows = np.arange(n, dtype=np.int64)
    for t in range(k):
        off = offsets[t]
        if n == 0:
            starts[t + 1] = starts[t]
            continue
        nb = coords[:, 1:] + off
        ok = np.all((nb >= 0) & (nb < spatial), axis=1)
        j = rows[ok]
        nbkey = keys[j] + int(off @ axstride)
        pos = np.searchsorted(keys, nbkey)
        pos_clipped = np.minimum(pos, n - 1)
        found = keys[pos_clipped] == nbkey
        pin_parts.append(pos_clipped[found])
        pout_parts.append(j[found])
        starts[t + 1] = starts[t] + int(found.sum())
    if not pin_parts:
        empty = np.empty(0, dtype=np.int64)
        return starts, empty, empty.copy()
    return starts, np.concatenate(pin_parts), np.concatenate(pout_parts)


def downsample_pairs(coords, ksize, stride, pad, out_shape, out_axstride,
                     out_batch_stride):
    """Enumerate (tap, input_row, output_key) triples for a strided conv.

    Output coordinate j covers input position j*stride - pad + tap per
    axis; taps are enumerated in lexicographic order. Out-of-range output
    coordinates are discarded (zero-padding semantics).
    """
    n = coords.shape[0]
    d = ksize.shape[0]
    k_total = 1
    for a in range(d):
        k_total *= int(ksize[a])
    tap_parts = []
    row_parts = []
    key_parts = []
    tvec = np.empty(d, dtype=np.int64)
    for tidx in range(k_total):
        rem = tidx
        for a in range(d - 1, -1, -1):
            tvec[a] = rem % ksize[a]
            rem //= ksize[a]
        if n == 0:
            continue
        num = coords[:, 1:] + pad - tvec
        ok = np.all(num % stride == 0, axis=1)
        j = num // stride
        ok &= np.all((j >= 0) & (j < out_shape), axis=1)
        rows = np.nonzero(ok)[0].astype(np.int64)
        if rows.shape[0] == 0:
            continue
        jj = j[rows]
        key = coords[rows, 0] * out_batch_stride + jj @ out_axstride
        tap_parts.append(np.full(rows.shape[0], tidx, dtype=np.int64))
        row_parts.append(rows)
        key_parts.append(key)
    if not tap_parts:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    return (np.concatenate(tap_parts), np.concatenate(row_parts),
            np.concatenate(key_parts))


def gather_scatter(feats, w, starts, pin, pout, out):
    """Accumulate ``out[pout] += feats[pin] @ w[t]`` offset by offset.

    Relies on the rulebook invariant that rows are duplicate-free within
    one offset, so plain fancy-index accumulation is exact. Accumulation
    order is fixed (offset order, then pair order) for bitwise determinism.
    """
    for t in range(w.shape[0]):
        s = starts[t]
        e = starts[t + 1]
        if e == s:
            continue
        out[pout[s:e]] += feats[pin[s:e]] @ w[t]
