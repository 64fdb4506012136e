"""Brute-force reference implementations used as test oracles.

These are written independently of the package code paths (explicit loops,
different formula arrangements) so agreement is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def gabor_loop(theta, sf, phase, nx, ny, ppd, k):
    """Pixel-by-pixel Gabor, unit norm."""
    c = (k - 1) // 2
    th = math.radians(theta)
    sx, sy = nx / sf, ny / sf
    g = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            x = (j - c) / ppd
            y = (c - i) / ppd
            xr = x * math.cos(th) + y * math.sin(th)
            yr = -x * math.sin(th) + y * math.cos(th)
            g[i, j] = math.exp(-(xr * xr / (2 * sx * sx) + yr * yr / (2 * sy * sy))) * math.cos(
                2 * math.pi * sf * xr + phase
            )
    return g / math.sqrt((g * g).sum())


def grating(theta, sf, phase, ppd, k):
    """Full-field cosine grating sampled on the same k x k grid as the kernels."""
    c = (k - 1) // 2
    idx = np.arange(k) - c
    x = idx[None, :] / ppd
    y = -idx[:, None] / ppd
    th = math.radians(theta)
    xr = x * math.cos(th) + y * math.sin(th)
    return np.cos(2 * math.pi * sf * xr + phase)


def sparseness_loop(a):
    b = len(a)
    s1 = sum(a) / b
    s2 = sum(v * v for v in a) / b
    if s2 == 0:
        return 0.0
    return (1 - s1 * s1 / s2) / (1 - 1 / b)


def conv2d_loop(img, ker, stride, pad):
    """Direct cross-correlation of one 2-D image with one 2-D kernel."""
    h, w = img.shape
    k = ker.shape[0]
    p = np.zeros((h + 2 * pad, w + 2 * pad))
    p[pad:pad + h, pad:pad + w] = img
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = (p[i * stride:i * stride + k, j * stride:j * stride + k] * ker).sum()
    return out


def mean_abs_weights_loop(w):
    n_out, n_in = w.shape
    return np.array([sum(abs(w[o, c]) for o in range(n_out)) / n_out for c in range(n_in)])


def bin_loop(values, edges):
    """Right-open bins, last bin right-closed, by linear scan."""
    out = []
    for v in values:
        for b in range(len(edges) - 1):
            last = b == len(edges) - 2
            if edges[b] <= v < edges[b + 1] or (last and v == edges[b + 1]):
                out.append(b)
                break
        else:
            raise ValueError(v)
    return np.array(out)


def bin_table_loop(cell_type, i0, i1, shape, act, sp, w):
    """Per-cell count, means and impact by explicit accumulation."""
    count = np.zeros(shape)
    sums = {k: np.zeros(shape) for k in ("act", "sp", "w")}
    for c, a, b, va, vs, vw in zip(cell_type, i0, i1, act, sp, w):
        count[c, a, b] += 1
        sums["act"][c, a, b] += va
        sums["sp"][c, a, b] += vs
        sums["w"][c, a, b] += vw
    means = {}
    for k, s in sums.items():
        m = np.full(shape, np.nan)
        nz = count > 0
        m[nz] = s[nz] / count[nz]
        means[k] = m
    impact = np.zeros(shape)
    for idx in np.ndindex(shape):
        if count[idx] > 0:
            impact[idx] = count[idx] * means["act"][idx] * means["w"][idx]
    return count, means, impact


def cross_entropy_mp(logits, labels):
    """Mean cross-entropy in arbitrary precision."""
    import mpmath

    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        total += lse - mpmath.mpf(float(row[y]))
    return float(total / len(labels))
