"""Numba voxel-traversal kernels shared by the occupancy and object maps."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def box_interval(o, d, lo, hi):
    """Slab test: entry/exit parameter of a ray against an axis-aligned box."""
    t0 = -INF
    t1 = INF
    for a in range(3):
        if d[a] != 0.0:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif o[a] < lo[a] or o[a] > hi[a]:
            return INF, -INF
    return t0, t1


@njit(cache=True)
def traverse(o, d, t_start, t_end, bmin, res, dims, out_idx, out_tin, out_tout):
    """Amanatides-Woo traversal of the grid along o + t*d for t in [t_start, t_end].

    ``d`` must be unit length. Fills voxel (i, j, k) triples and their
    [t_in, t_out) intervals; returns the number of voxels written.
    Zero-length corner touches are skipped.
    """
    hi = np.empty(3)
    for a in range(3):
        hi[a] = bmin[a] + dims[a] * res
    tb0, tb1 = box_interval(o, d, bmin, hi)
    ts = max(t_start, tb0)
    te = min(t_end, tb1)
    if not ts < te:
        return 0
    idx = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    tmid = ts + min(1e-9, 0.5 * (te - ts))
    for a in range(3):
        p = o[a] + d[a] * tmid
        i = int(math.floor((p - bmin[a]) / res))
        if i < 0:
            i = 0
        elif i >= dims[a]:
            i = dims[a] - 1
        idx[a] = i
        if d[a] > 0.0:
            step[a] = 1
            tmax[a] = (bmin[a] + (i + 1) * res - o[a]) / d[a]
            tdelta[a] = res / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            tmax[a] = (bmin[a] + i * res - o[a]) / d[a]
            tdelta[a] = -res / d[a]
        else:
            step[a] = 0
            tmax[a] = INF
            tdelta[a] = INF
    n = 0
    cap = out_idx.shape[0]
    t_in = ts
    while n < cap:
        ax = 0
        if tmax[1] < tmax[ax]:
            ax = 1
        if tmax[2] < tmax[ax]:
            ax = 2
        t_out = tmax[ax]
        if t_out > te:
            t_out = te
        if t_out - t_in > 1e-9:
            out_idx[n, 0] = idx[0]
            out_idx[n, 1] = idx[1]
            out_idx[n, 2] = idx[2]
            out_tin[n] = t_in
            out_tout[n] = t_out
            n += 1
        if t_out >= te:
            break
        idx[ax] += step[ax]
        if idx[ax] < 0 or idx[ax] >= dims[ax]:
            break
        t_in = t_out
        tmax[ax] += tdelta[ax]
    return n


@njit(cache=True)
def point_segment_dist2(p0, p1, p2, a, b):
    ab0 = b[0] - a[0]
    ab1 = b[1] - a[1]
    ab2 = b[2] - a[2]
    ap0 = p0 - a[0]
    ap1 = p1 - a[1]
    ap2 = p2 - a[2]
    den = ab0 * ab0 + ab1 * ab1 + ab2 * ab2
    s = 0.0
    if den > 0.0:
        s = (ap0 * ab0 + ap1 * ab1 + ap2 * ab2) / den
        if s < 0.0:
            s = 0.0
        elif s > 1.0:
            s = 1.0
    e0 = ap0 - s * ab0
    e1 = ap1 - s * ab1
    e2 = ap2 - s * ab2
    return e0 * e0 + e1 * e1 + e2 * e2
