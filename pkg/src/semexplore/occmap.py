"""Volumetric occupancy map with colour, observed-distance fusion and frontiers.

Leaves are stored densely at the finest resolution; the octree above them
is implicit. Each internal node at level ``k`` covers a ``2**k`` voxel cube
and stores the [min, max] log-odds of its leaves (see :meth:`node_bounds`),
which is what pruned region queries use.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from ._raycast import point_segment_dist2, traverse
from .geometry import CameraModel, RigidTransform
from .plyio import write_ply

SNAPSHOT_MAGIC = b"SXOCCMAP"
SNAPSHOT_VERSION = 1


class OutOfBoundsError(ValueError):
    pass


class VoxelState(enum.IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


@dataclass(frozen=True)
class SensorModel:
    """Log-odds inverse sensor model."""

    # one observation must cross the 0.25 / 0.75 thresholds (|l| > ln 3)
    l_occ: float = 1.5
    l_free: float = -1.15
    l_min: float = -7.0
    l_max: float = 7.0
    p_free: float = 0.25
    p_occ: float = 0.75
    band_voxels: float = 1.0          # along-ray occupied band of the ray-casting method
    # projective method: a leaf is occupied when its cube meets the local surface
    # plane, free when it lies in front of that plane by more than this margin,
    # and untouched in between
    free_margin_voxels: float = 0.25
    # below this |cos(incidence)| (after subtracting the tolerance) the plane
    # estimate is not trusted for the occupied test; the leaf holding the
    # measured point is marked instead
    min_incidence_cos: float = 0.15
    # uncertainty of the estimated |cos(incidence)|: both tests use cos - tol, so
    # an overestimated cos at grazing angles cannot free a leaf on the surface
    normal_cos_tol: float = 0.1

    @property
    def free_threshold(self) -> float:
        return math.log(self.p_free / (1.0 - self.p_free))

    @property
    def occ_threshold(self) -> float:
        return math.log(self.p_occ / (1.0 - self.p_occ))


@dataclass
class UpdateSummary:
    """What one integration touched.

    ``changed`` holds the flat indices of leaves whose tri-state class
    changed; only those (and their face neighbours) can change frontier
    status.
    """

    changed: np.ndarray
    n_updated: int = 0
    n_occupied: int = 0

    def __len__(self):
        return self.n_updated


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _push(buf, n, v):
    if n >= buf.shape[0]:
        nb = np.empty(buf.shape[0] * 2, dtype=buf.dtype)
        nb[:n] = buf[:n]
        buf = nb
    buf[n] = v
    return buf


@njit(cache=True, inline="always")
def _state(l, thr_free, thr_occ):
    if l > thr_occ:
        return 2
    if l < thr_free:
        return 1
    return 0


@njit(cache=True, inline="always")
def _apply(log_odds, weight, colour, min_obs, i, j, k, dl, rgb, dist, l_lo, l_hi,
           thr_free, thr_occ):
    """One inverse-sensor update of a leaf; returns True if its state changed."""
    old = log_odds[i, j, k]
    l = max(l_lo, min(l_hi, old + dl))
    log_odds[i, j, k] = l
    if rgb[0] >= 0.0:
        w = float(weight[i, j, k])
        for c in range(3):
            colour[i, j, k, c] = np.uint8(min(255.0, math.floor(
                (colour[i, j, k, c] * w + rgb[c]) / (w + 1.0) + 0.5)))
    if weight[i, j, k] < 65535:
        weight[i, j, k] += 1
    if dist < min_obs[i, j, k]:
        min_obs[i, j, k] = dist
    return _state(old, thr_free, thr_occ) != _state(l, thr_free, thr_occ)


@njit(cache=True)
def _integrate_rays(log_odds, weight, colour, min_obs, stamp, frame, bmin, res,
                    origin, dirs, t_hit, cols, t_min, band, l_occ, l_free, l_lo, l_hi,
                    thr_free, thr_occ):
    nx, ny, nz = log_odds.shape
    dims = np.array([nx, ny, nz], dtype=np.int64)
    cap = nx + ny + nz + 4
    vox = np.empty((cap, 3), dtype=np.int64)
    tin = np.empty(cap)
    tout = np.empty(cap)
    occ_mark = 2 * frame + 1
    free_mark = 2 * frame
    occ_list = np.empty(1024, dtype=np.int64)
    occ_ray = np.empty(1024, dtype=np.int64)
    n_occ = 0
    changed = np.empty(1024, dtype=np.int64)
    n_chg = 0
    n_upd = 0
    no_rgb = np.full(3, -1.0)
    nr = dirs.shape[0]
    # occupied band first so it wins over free-space passes of other rays
    for r in range(nr):
        t0 = max(t_min[r], t_hit[r] - band)
        n = traverse(origin, dirs[r], t0, t_hit[r] + band, bmin, res, dims, vox, tin, tout)
        for q in range(n):
            i, j, k = vox[q, 0], vox[q, 1], vox[q, 2]
            if stamp[i, j, k] != occ_mark:
                stamp[i, j, k] = occ_mark
                occ_list = _push(occ_list, n_occ, (i * ny + j) * nz + k)
                occ_ray = _push(occ_ray, n_occ, r)
                n_occ += 1
    for r in range(nr):
        n = traverse(origin, dirs[r], t_min[r], t_hit[r] - band, bmin, res, dims, vox, tin, tout)
        for q in range(n):
            i, j, k = vox[q, 0], vox[q, 1], vox[q, 2]
            if stamp[i, j, k] < free_mark:
                stamp[i, j, k] = free_mark
                cx = bmin[0] + (i + 0.5) * res - origin[0]
                cy = bmin[1] + (j + 0.5) * res - origin[1]
                cz = bmin[2] + (k + 0.5) * res - origin[2]
                dist = math.sqrt(cx * cx + cy * cy + cz * cz)
                n_upd += 1
                if _apply(log_odds, weight, colour, min_obs, i, j, k, l_free, no_rgb, dist,
                          l_lo, l_hi, thr_free, thr_occ):
                    changed = _push(changed, n_chg, (i * ny + j) * nz + k)
                    n_chg += 1
    for q in range(n_occ):
        flat = occ_list[q]
        k = flat % nz
        j = (flat // nz) % ny
        i = flat // (ny * nz)
        cx = bmin[0] + (i + 0.5) * res - origin[0]
        cy = bmin[1] + (j + 0.5) * res - origin[1]
        cz = bmin[2] + (k + 0.5) * res - origin[2]
        dist = math.sqrt(cx * cx + cy * cy + cz * cz)
        n_upd += 1
        if _apply(log_odds, weight, colour, min_obs, i, j, k, l_occ, cols[occ_ray[q]], dist,
                  l_lo, l_hi, thr_free, thr_occ):
            changed = _push(changed, n_chg, flat)
            n_chg += 1
    return changed[:n_chg], n_upd, n_occ


@njit(cache=True)
def _planar_triple(d0, d1, d2, lim):
    """Three collinear depth samples lie on one plane (inverse depth is affine there)."""
    if not (d0 > 0.0 and d1 > 0.0 and d2 > 0.0):
        return False
    return abs(1.0 / d0 + 1.0 / d2 - 2.0 / d1) <= lim


@njit(cache=True)
def _surface_geometry(depth, intr, rot_wc, step, max_jump):
    """Per-pixel |cos(incidence)| and L1 norm of the world-frame surface normal.

    Tangents come from central differences of neighbours ``step`` pixels away
    along each image axis. Pixels whose neighbourhood is not planar (crease,
    discontinuity, image border) get cos = -1.
    """
    H, W = depth.shape
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    cos_out = -np.ones((H, W))
    supp = np.full((H, W), math.sqrt(3.0))
    for v in range(step, H - step):
        for u in range(step, W - step):
            d = depth[v, u]
            if not d > 0.0:
                continue
            lim = max_jump / d
            ua = u - step
            ub = u + step
            va = v - step
            vb = v + step
            if not (_planar_triple(depth[v, ua], d, depth[v, ub], lim)
                    and _planar_triple(depth[va, u], d, depth[vb, u], lim)):
                continue
            dl = depth[v, ua]
            dr = depth[v, ub]
            du = depth[va, u]
            dd = depth[vb, u]
            ax = (ub - cx) / fx * dr - (ua - cx) / fx * dl
            ay = (v - cy) / fy * (dr - dl)
            az = dr - dl
            bx = (u - cx) / fx * (dd - du)
            by = (vb - cy) / fy * dd - (va - cy) / fy * du
            bz = dd - du
            nx = ay * bz - az * by
            ny = az * bx - ax * bz
            nz = ax * by - ay * bx
            nn = math.sqrt(nx * nx + ny * ny + nz * nz)
            if nn <= 0.0:
                continue
            nx /= nn
            ny /= nn
            nz /= nn
            rx = (u - cx) / fx
            ry = (v - cy) / fy
            rn = math.sqrt(rx * rx + ry * ry + 1.0)
            cos_out[v, u] = abs(nx * rx + ny * ry + nz) / rn
            l1 = 0.0
            for k in range(3):
                l1 += abs(rot_wc[k, 0] * nx + rot_wc[k, 1] * ny + rot_wc[k, 2] * nz)
            supp[v, u] = l1
    return cos_out, supp


@njit(cache=True)
def _integrate_projective(log_odds, weight, colour, min_obs, stamp, frame, bmin, res, rot_cw,
                          t_cw, depth, cos_inc, supp, cols, intr, lo, hi, margin, min_cos, cos_tol,
                          l_occ, l_free, l_lo, l_hi, thr_free, thr_occ):
    nx, ny, nz = log_odds.shape
    H, W = depth.shape
    fx, fy, cx, cy, d_min, d_max = intr[0], intr[1], intr[2], intr[3], intr[4], intr[5]
    half = 0.5 * res
    changed = np.empty(1024, dtype=np.int64)
    n_chg = 0
    n_upd = 0
    n_occ = 0
    # endpoint pass for pixels whose plane estimate is unusable: the leaf
    # containing the measured point is occupied
    cam_w = np.empty(3)
    for a in range(3):
        cam_w[a] = -(rot_cw[0, a] * t_cw[0] + rot_cw[1, a] * t_cw[1] + rot_cw[2, a] * t_cw[2])
    for v in range(H):
        for u in range(W):
            d = depth[v, u]
            if not (d >= d_min and d <= d_max) or cos_inc[v, u] - cos_tol >= min_cos:
                continue
            qx = (u - cx) / fx * d
            qy = (v - cy) / fy * d
            ii = int(math.floor((rot_cw[0, 0] * qx + rot_cw[1, 0] * qy + rot_cw[2, 0] * d
                                 + cam_w[0] - bmin[0]) / res))
            jj = int(math.floor((rot_cw[0, 1] * qx + rot_cw[1, 1] * qy + rot_cw[2, 1] * d
                                 + cam_w[1] - bmin[1]) / res))
            kk = int(math.floor((rot_cw[0, 2] * qx + rot_cw[1, 2] * qy + rot_cw[2, 2] * d
                                 + cam_w[2] - bmin[2]) / res))
            if ii < 0 or jj < 0 or kk < 0 or ii >= nx or jj >= ny or kk >= nz:
                continue
            if stamp[ii, jj, kk] == frame:
                continue
            stamp[ii, jj, kk] = frame
            n_upd += 1
            n_occ += 1
            old = log_odds[ii, jj, kk]
            l = min(l_hi, old + l_occ)
            w = float(weight[ii, jj, kk])
            for c in range(3):
                colour[ii, jj, kk, c] = np.uint8(min(255.0, math.floor(
                    (colour[ii, jj, kk, c] * w + cols[v, u, c]) / (w + 1.0) + 0.5)))
            log_odds[ii, jj, kk] = l
            if weight[ii, jj, kk] < 65535:
                weight[ii, jj, kk] += 1
            dx = bmin[0] + (ii + 0.5) * res - cam_w[0]
            dy = bmin[1] + (jj + 0.5) * res - cam_w[1]
            dz = bmin[2] + (kk + 0.5) * res - cam_w[2]
            rho = math.sqrt(dx * dx + dy * dy + dz * dz)
            if rho < min_obs[ii, jj, kk]:
                min_obs[ii, jj, kk] = rho
            if (old > thr_occ) != (l > thr_occ) or (old < thr_free) != (l < thr_free):
                changed = _push(changed, n_chg, (ii * ny + jj) * nz + kk)
                n_chg += 1
    for i in range(lo[0], hi[0]):
        wx = bmin[0] + (i + 0.5) * res
        for j in range(lo[1], hi[1]):
            wy = bmin[1] + (j + 0.5) * res
            bx = rot_cw[0, 0] * wx + rot_cw[0, 1] * wy + t_cw[0]
            by = rot_cw[1, 0] * wx + rot_cw[1, 1] * wy + t_cw[1]
            bz = rot_cw[2, 0] * wx + rot_cw[2, 1] * wy + t_cw[2]
            for k in range(lo[2], hi[2]):
                wz = bmin[2] + (k + 0.5) * res
                px = bx + rot_cw[0, 2] * wz
                py = by + rot_cw[1, 2] * wz
                pz = bz + rot_cw[2, 2] * wz
                if pz <= 1e-9 or stamp[i, j, k] == frame:
                    continue
                u = math.floor(fx * px / pz + cx + 0.5)
                v = math.floor(fy * py / pz + cy + 0.5)
                if u < 0 or v < 0 or u >= W or v >= H:
                    continue
                iu = int(u)
                iv = int(v)
                d = depth[iv, iu]
                if not (d >= d_min and d <= d_max):
                    continue
                rho = math.sqrt(px * px + py * py + pz * pz)
                scale = rho / pz
                if rho <= d_min * scale:
                    continue
                gap = d * scale - rho          # along-ray distance to the measured surface
                c = cos_inc[iv, iu]
                if c < 0.0:
                    # no plane estimate (image border, crease, discontinuity, grazing
                    # view): the endpoint pass handles occupancy and nothing is freed
                    continue
                h = half * supp[iv, iu]
                dp_free = gap * max(c - cos_tol, 0.0)
                dp_occ = gap * max(c - cos_tol, min_cos)
                if dp_free > h + margin:
                    occ = False
                elif abs(dp_occ) <= h:
                    occ = True
                else:
                    continue
                n_upd += 1
                old = log_odds[i, j, k]
                if not occ:
                    l = max(l_lo, old + l_free)
                else:
                    n_occ += 1
                    l = min(l_hi, old + l_occ)
                    w = float(weight[i, j, k])
                    for ch in range(3):
                        colour[i, j, k, ch] = np.uint8(min(255.0, math.floor(
                            (colour[i, j, k, ch] * w + cols[iv, iu, ch]) / (w + 1.0) + 0.5)))
                log_odds[i, j, k] = l
                if weight[i, j, k] < 65535:
                    weight[i, j, k] += 1
                if rho < min_obs[i, j, k]:
                    min_obs[i, j, k] = rho
                if (old > thr_occ) != (l > thr_occ) or (old < thr_free) != (l < thr_free):
                    changed = _push(changed, n_chg, (i * ny + j) * nz + k)
                    n_chg += 1
    return changed[:n_chg], n_upd, n_occ


@njit(cache=True)
def _is_frontier(log_odds, i, j, k, thr_free, thr_occ):
    nx, ny, nz = log_odds.shape
    if _state(log_odds[i, j, k], thr_free, thr_occ) != 1:
        return False
    if i > 0 and _state(log_odds[i - 1, j, k], thr_free, thr_occ) == 0:
        return True
    if i < nx - 1 and _state(log_odds[i + 1, j, k], thr_free, thr_occ) == 0:
        return True
    if j > 0 and _state(log_odds[i, j - 1, k], thr_free, thr_occ) == 0:
        return True
    if j < ny - 1 and _state(log_odds[i, j + 1, k], thr_free, thr_occ) == 0:
        return True
    if k > 0 and _state(log_odds[i, j, k - 1], thr_free, thr_occ) == 0:
        return True
    if k < nz - 1 and _state(log_odds[i, j, k + 1], thr_free, thr_occ) == 0:
        return True
    return False


@njit(cache=True)
def _recheck_frontiers(log_odds, frontier, candidates, thr_free, thr_occ):
    nx, ny, nz = log_odds.shape
    delta = 0
    for q in range(candidates.shape[0]):
        flat = candidates[q]
        k0 = flat % nz
        j0 = (flat // nz) % ny
        i0 = flat // (ny * nz)
        for m in range(7):
            i, j, k = i0, j0, k0
            if m == 1:
                i -= 1
            elif m == 2:
                i += 1
            elif m == 3:
                j -= 1
            elif m == 4:
                j += 1
            elif m == 5:
                k -= 1
            elif m == 6:
                k += 1
            if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
                continue
            f = _is_frontier(log_odds, i, j, k, thr_free, thr_occ)
            if f != frontier[i, j, k]:
                frontier[i, j, k] = f
                delta += 1 if f else -1
    return delta


@njit(cache=True)
def _entropy_rays(log_odds, bmin, res, origin, dirs, d_min, n_steps, thr_occ):
    nx, ny, nz = log_odds.shape
    out = np.zeros(dirs.shape[0])
    for r in range(dirs.shape[0]):
        acc = 0.0
        for s in range(n_steps):
            t = d_min + s * res
            i = int(math.floor((origin[0] + dirs[r, 0] * t - bmin[0]) / res))
            j = int(math.floor((origin[1] + dirs[r, 1] * t - bmin[1]) / res))
            k = int(math.floor((origin[2] + dirs[r, 2] * t - bmin[2]) / res))
            if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
                break
            l = np.float64(log_odds[i, j, k])
            if l > thr_occ:
                break
            p = 1.0 / (1.0 + math.exp(-l))
            h = 0.0
            if 0.0 < p < 1.0:
                h = -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)
            acc += h
        out[r] = acc / n_steps
    return out


@njit(cache=True)
def _first_hit_rays(log_odds, min_obs, bmin, res, origin, dirs, t_max, thr_occ):
    nx, ny, nz = log_odds.shape
    dims = np.array([nx, ny, nz], dtype=np.int64)
    cap = nx + ny + nz + 4
    vox = np.empty((cap, 3), dtype=np.int64)
    tin = np.empty(cap)
    tout = np.empty(cap)
    nr = dirs.shape[0]
    hit_idx = np.full(nr, -1, dtype=np.int64)
    hit_t = np.full(nr, np.inf)
    hit_obs = np.full(nr, np.inf)
    for r in range(nr):
        n = traverse(origin, dirs[r], 0.0, t_max, bmin, res, dims, vox, tin, tout)
        for q in range(n):
            i, j, k = vox[q, 0], vox[q, 1], vox[q, 2]
            if log_odds[i, j, k] > thr_occ:
                hit_idx[r] = (i * ny + j) * nz + k
                hit_t[r] = tin[q]
                hit_obs[r] = min_obs[i, j, k]
                break
    return hit_idx, hit_t, hit_obs


@njit(cache=True)
def _segment_free(log_odds, bmin, res, a, b, radius, thr_free):
    nx, ny, nz = log_odds.shape
    r2 = radius * radius
    lo = np.empty(3, dtype=np.int64)
    hi = np.empty(3, dtype=np.int64)
    dims = (nx, ny, nz)
    for ax in range(3):
        mn = min(a[ax], b[ax]) - radius
        mx = max(a[ax], b[ax]) + radius
        lo[ax] = int(math.ceil((mn - bmin[ax]) / res - 0.5))
        hi[ax] = int(math.floor((mx - bmin[ax]) / res - 0.5))
    for i in range(lo[0], hi[0] + 1):
        px = bmin[0] + (i + 0.5) * res
        for j in range(lo[1], hi[1] + 1):
            py = bmin[1] + (j + 0.5) * res
            for k in range(lo[2], hi[2] + 1):
                pz = bmin[2] + (k + 0.5) * res
                if point_segment_dist2(px, py, pz, a, b) > r2:
                    continue
                if i < 0 or j < 0 or k < 0 or i >= dims[0] or j >= dims[1] or k >= dims[2]:
                    return False
                if not log_odds[i, j, k] < thr_free:
                    return False
    return True


def binary_entropy(p):
    """Shannon entropy in bits of a Bernoulli(p) variable; 0 at p in {0, 1}."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p)
    return np.where((p > 0) & (p < 1), h, 0.0)


# --------------------------------------------------------------------------


class OccupancyMap:
    """Occupancy map over the axis-aligned volume [bounds_min, bounds_max)."""

    def __init__(self, bounds_min, bounds_max, resolution: float,
                 sensor: SensorModel | None = None):
        self.bounds_min = np.asarray(bounds_min, dtype=float)
        self.bounds_max = np.asarray(bounds_max, dtype=float)
        self.resolution = float(resolution)
        self.sensor = sensor or SensorModel()
        extent = self.bounds_max - self.bounds_min
        if np.any(extent <= 0) or self.resolution <= 0:
            raise ValueError("empty bounds or non-positive resolution")
        self.dims = tuple(int(math.ceil(e / self.resolution - 1e-9)) for e in extent)
        self.log_odds = np.zeros(self.dims, dtype=np.float32)
        self.weight = np.zeros(self.dims, dtype=np.uint16)
        self.colour = np.zeros(self.dims + (3,), dtype=np.uint8)
        self.min_obs_dist = np.full(self.dims, np.inf, dtype=np.float32)
        self.frontier = np.zeros(self.dims, dtype=np.bool_)
        self.frontier_count = 0
        self._stamp = np.full(self.dims, -1, dtype=np.int32)
        self._frame = 0
        self._pyramid: list[tuple[np.ndarray, np.ndarray]] | None = None

    # -- indexing -----------------------------------------------------------

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.bounds_min) and np.all(p < self.bounds_max))

    def point_to_index(self, point) -> tuple[int, int, int]:
        if not self.contains(point):
            raise OutOfBoundsError(f"point {tuple(point)} outside map bounds")
        idx = np.floor((np.asarray(point, dtype=float) - self.bounds_min) / self.resolution)
        return tuple(int(min(v, d - 1)) for v, d in zip(idx, self.dims))

    def index_to_center(self, idx) -> np.ndarray:
        return self.bounds_min + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def flat_to_index(self, flat):
        return np.unravel_index(flat, self.dims)

    def flat_to_center(self, flat) -> np.ndarray:
        ijk = np.stack(np.unravel_index(np.asarray(flat), self.dims), axis=-1)
        return self.index_to_center(ijk)

    # -- state ----------------------------------------------------------------

    def occupancy_probability(self, point) -> float:
        l = float(self.log_odds[self.point_to_index(point)])
        return 1.0 / (1.0 + math.exp(-l))

    def classify_index(self, idx) -> VoxelState:
        l = float(self.log_odds[tuple(idx)])
        if l > self.sensor.occ_threshold:
            return VoxelState.OCCUPIED
        if l < self.sensor.free_threshold:
            return VoxelState.FREE
        return VoxelState.UNKNOWN

    def classify(self, point) -> VoxelState:
        return self.classify_index(self.point_to_index(point))

    def states(self) -> np.ndarray:
        """uint8 VoxelState grid."""
        out = np.zeros(self.dims, dtype=np.uint8)
        out[self.log_odds < self.sensor.free_threshold] = VoxelState.FREE
        out[self.log_odds > self.sensor.occ_threshold] = VoxelState.OCCUPIED
        return out

    def free_mask(self) -> np.ndarray:
        return self.log_odds < self.sensor.free_threshold

    def occupied_mask(self) -> np.ndarray:
        return self.log_odds > self.sensor.occ_threshold

    def explored_volume(self) -> float:
        known = np.count_nonzero(self.free_mask()) + np.count_nonzero(self.occupied_mask())
        return known * self.resolution ** 3

    # -- integration ------------------------------------------------------------

    def integrate_frame(self, depth, colour, T_WC: RigidTransform, cam: CameraModel,
                        method: str = "projective", stride: int = 1) -> UpdateSummary:
        """Fuse one depth/colour pair and refresh the frontier set.

        ``method="projective"`` visits each leaf in the view frustum once and
        compares it with the surface plane estimated at the pixel it projects
        to (see SensorModel).
        ``method="raycast"`` walks every pixel ray with an exact voxel
        traversal; every leaf is still updated at most once per frame and the
        occupied band wins over free space.
        """
        depth = np.asarray(depth, dtype=float)
        colour = np.asarray(colour)
        if depth.shape != (cam.height, cam.width):
            raise ValueError(f"depth shape {depth.shape} != {(cam.height, cam.width)}")
        if colour.shape[:2] != depth.shape:
            raise ValueError("colour and depth image sizes differ")
        if colour.ndim == 2:
            colour = np.repeat(colour[..., None], 3, axis=2)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(depth) & (depth >= cam.d_min) & (depth <= cam.d_max)
        s = self.sensor
        band = s.band_voxels * self.resolution
        if not valid.any():
            return UpdateSummary(np.empty(0, dtype=np.int64))
        if method == "projective":
            # farthest leaf the occupied test can touch behind a measured point
            reach = 0.5 * math.sqrt(3.0) * self.resolution / s.min_incidence_cos
            lo, hi = self._frustum_box(T_WC, cam, float(depth[valid].max()) + reach)
            rot_cw = T_WC.rotation.T.copy()
            t_cw = -rot_cw @ T_WC.translation
            intr = np.array([cam.fx, cam.fy, cam.cx, cam.cy, cam.d_min, cam.d_max])
            cos_inc, supp = _surface_geometry(np.where(valid, depth, 0.0), intr,
                                              np.ascontiguousarray(T_WC.rotation), 5, 0.02)
            self._frame += 1
            changed, n_upd, n_occ = _integrate_projective(
                self.log_odds, self.weight, self.colour, self.min_obs_dist, self._stamp,
                2 * self._frame + 1, self.bounds_min, self.resolution, rot_cw, t_cw,
                np.where(valid, depth, np.nan), cos_inc, supp, colour.astype(np.float64),
                intr, lo, hi, s.free_margin_voxels * self.resolution, s.min_incidence_cos,
                s.normal_cos_tol,
                s.l_occ, s.l_free, s.l_min, s.l_max, s.free_threshold, s.occ_threshold)
        elif method == "raycast":
            sub = valid[::stride, ::stride]
            rays_c = cam.pixel_rays(stride)[sub]
            norms = np.linalg.norm(rays_c, axis=1)
            dirs = T_WC.rotate(rays_c / norms[:, None])
            self._frame += 1
            changed, n_upd, n_occ = _integrate_rays(
                self.log_odds, self.weight, self.colour, self.min_obs_dist, self._stamp,
                self._frame, self.bounds_min, self.resolution, np.asarray(T_WC.translation),
                np.ascontiguousarray(dirs), depth[::stride, ::stride][sub] * norms,
                colour[::stride, ::stride][sub].astype(np.float64), cam.d_min * norms,
                band, s.l_occ, s.l_free, s.l_min, s.l_max, s.free_threshold, s.occ_threshold)
        else:
            raise ValueError(f"unknown integration method {method!r}")
        summary = UpdateSummary(changed.copy(), int(n_upd), int(n_occ))
        if n_upd:
            self._pyramid = None
        self.update_frontiers(summary)
        return summary

    def _frustum_box(self, T_WC: RigidTransform, cam: CameraModel, far: float):
        """Voxel index range [lo, hi) enclosing the view frustum up to ``far``."""
        corners = np.array([[0, 0], [cam.width, 0], [0, cam.height], [cam.width, cam.height]],
                           dtype=float) - 0.5
        pts = [np.zeros(3)]
        for u, v in corners:
            ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            pts.append(ray * far)
        pts = T_WC.apply(np.array(pts))
        lo = np.floor((pts.min(0) - self.bounds_min) / self.resolution).astype(np.int64) - 1
        hi = np.ceil((pts.max(0) - self.bounds_min) / self.resolution).astype(np.int64) + 1
        dims = np.array(self.dims)
        return np.clip(lo, 0, dims), np.clip(hi, 0, dims)

    def set_free_sphere(self, center, radius: float) -> UpdateSummary:
        """Mark every voxel within ``radius`` of ``center`` as saturated free."""
        c = np.asarray(center, dtype=float)
        lo = np.maximum(np.floor((c - radius - self.bounds_min) / self.resolution).astype(int), 0)
        hi = np.minimum(np.ceil((c + radius - self.bounds_min) / self.resolution).astype(int),
                        np.array(self.dims))
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
        centres = self.bounds_min + (np.stack(grids, -1) + 0.5) * self.resolution
        inside = np.linalg.norm(centres - c, axis=-1) <= radius
        self.log_odds[sl][inside] = self.sensor.l_min
        w = self.weight[sl]
        w[inside] = np.maximum(w[inside], 1)
        flat = np.ravel_multi_index(tuple(g[inside] for g in grids), self.dims)
        summary = UpdateSummary(flat.astype(np.int64), int(flat.size))
        self._pyramid = None
        self.update_frontiers(summary)
        return summary

    # -- frontiers ----------------------------------------------------------------

    def is_frontier(self, idx) -> bool:
        i, j, k = (int(v) for v in idx)
        return bool(_is_frontier(self.log_odds, i, j, k, self.sensor.free_threshold,
                                 self.sensor.occ_threshold))

    def update_frontiers(self, summary: UpdateSummary) -> np.ndarray:
        """Refresh the boolean frontier grid after an integration.

        Only leaves whose class changed and their face neighbours are
        re-checked. Every other previous frontier keeps its status since
        neither it nor any of its face neighbours changed class.
        """
        if summary.changed.size:
            self.frontier_count += int(_recheck_frontiers(
                self.log_odds, self.frontier, summary.changed,
                self.sensor.free_threshold, self.sensor.occ_threshold))
        return self.frontier

    def rebuild_frontiers(self) -> np.ndarray:
        """Full rescan, for log-odds edited outside integrate_frame."""
        self.frontier[...] = False
        self.frontier.reshape(-1)[self.brute_force_frontiers()] = True
        self.frontier_count = int(self.frontier.sum())
        return self.frontier

    def frontiers(self) -> np.ndarray:
        """Sorted flat indices of the frontier set."""
        return np.flatnonzero(self.frontier)

    def brute_force_frontiers(self) -> np.ndarray:
        st = self.states()
        unknown = st == VoxelState.UNKNOWN
        nb = np.zeros(self.dims, dtype=bool)
        nb[1:] |= unknown[:-1]
        nb[:-1] |= unknown[1:]
        nb[:, 1:] |= unknown[:, :-1]
        nb[:, :-1] |= unknown[:, 1:]
        nb[:, :, 1:] |= unknown[:, :, :-1]
        nb[:, :, :-1] |= unknown[:, :, 1:]
        return np.flatnonzero((st == VoxelState.FREE) & nb)

    # -- raycasts -------------------------------------------------------------------

    def entropy_steps(self, cam: CameraModel) -> int:
        """Maximum number of entropy samples on one ray (the normaliser)."""
        return int(math.ceil((cam.d_max - cam.d_min) / self.resolution - 1e-9))

    def raycast_entropy(self, origin, dirs, cam: CameraModel) -> np.ndarray:
        """Normalised entropy sum along each unit direction, in [0, 1]."""
        d = np.ascontiguousarray(np.asarray(dirs, dtype=float).reshape(-1, 3))
        return _entropy_rays(self.log_odds, self.bounds_min, self.resolution,
                             np.asarray(origin, dtype=float), d, cam.d_min,
                             self.entropy_steps(cam), self.sensor.occ_threshold)

    def raycast_first_hit(self, origin, dirs, t_max: float):
        """Nearest occupied leaf along each ray: (flat index or -1, distance, min_obs_dist)."""
        d = np.ascontiguousarray(np.asarray(dirs, dtype=float).reshape(-1, 3))
        return _first_hit_rays(self.log_odds, self.min_obs_dist, self.bounds_min,
                               self.resolution, np.asarray(origin, dtype=float), d,
                               float(t_max), self.sensor.occ_threshold)

    def segment_collision_free(self, a, b, radius: float) -> bool:
        """True iff every voxel centre within ``radius`` of segment ab is free."""
        return bool(_segment_free(self.log_odds, self.bounds_min, self.resolution,
                                  np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                                  float(radius), self.sensor.free_threshold))

    # -- octree node bounds ---------------------------------------------------------

    def _build_pyramid(self):
        levels = [(self.log_odds, self.log_odds)]
        lo, hi = self.log_odds, self.log_odds
        while max(lo.shape) > 1:
            pad = [(0, s % 2) for s in lo.shape]
            lo_p = np.pad(lo, pad, constant_values=np.inf)
            hi_p = np.pad(hi, pad, constant_values=-np.inf)
            sh = [s // 2 for s in lo_p.shape]
            lo = lo_p.reshape(sh[0], 2, sh[1], 2, sh[2], 2).min(axis=(1, 3, 5))
            hi = hi_p.reshape(sh[0], 2, sh[1], 2, sh[2], 2).max(axis=(1, 3, 5))
            levels.append((lo, hi))
        self._pyramid = levels

    @property
    def depth(self) -> int:
        """Number of octree levels above the leaves."""
        if self._pyramid is None:
            self._build_pyramid()
        return len(self._pyramid) - 1

    def node_bounds(self, level: int):
        """(min, max) log-odds arrays for all nodes at ``level`` (0 = leaves)."""
        if self._pyramid is None:
            self._build_pyramid()
        return self._pyramid[level]

    def node_state(self, level: int, idx) -> VoxelState | None:
        """State shared by every leaf under a node, or None if they differ."""
        lo, hi = self.node_bounds(level)
        lo, hi = float(lo[tuple(idx)]), float(hi[tuple(idx)])
        if hi < self.sensor.free_threshold:
            return VoxelState.FREE
        if lo > self.sensor.occ_threshold:
            return VoxelState.OCCUPIED
        if lo >= self.sensor.free_threshold and hi <= self.sensor.occ_threshold:
            return VoxelState.UNKNOWN
        return None

    def copy(self) -> "OccupancyMap":
        other = object.__new__(OccupancyMap)
        other.__dict__.update(self.__dict__)
        for name in ("log_odds", "weight", "colour", "min_obs_dist", "frontier", "_stamp"):
            setattr(other, name, getattr(self, name).copy())
        other._pyramid = None
        return other

    # -- export -----------------------------------------------------------------------

    def export_ply(self, path) -> Path:
        """Coloured point cloud of occupied leaf centres."""
        flat = np.flatnonzero(self.occupied_mask())
        return write_ply(path, self.flat_to_center(flat),
                         self.colour.reshape(-1, 3)[flat])

    def save(self, path) -> Path:
        """Binary snapshot: magic, version, geometry, sensor model, then raw leaf arrays."""
        path = Path(path)
        s = self.sensor
        head = struct.pack("<8sI3i7d10d", SNAPSHOT_MAGIC, SNAPSHOT_VERSION, *self.dims,
                           *self.bounds_min, *self.bounds_max, self.resolution,
                           s.l_occ, s.l_free, s.l_min, s.l_max, s.p_free, s.p_occ, s.band_voxels,
                           s.free_margin_voxels, s.min_incidence_cos, s.normal_cos_tol)
        with open(path, "wb") as fh:
            fh.write(head)
            for a in (self.log_odds, self.weight, self.colour, self.min_obs_dist):
                fh.write(np.ascontiguousarray(a).tobytes())
        return path

    @classmethod
    def load(cls, path) -> "OccupancyMap":
        data = Path(path).read_bytes()
        fmt = "<8sI3i7d10d"
        n = struct.calcsize(fmt)
        vals = struct.unpack(fmt, data[:n])
        if vals[0] != SNAPSHOT_MAGIC:
            raise ValueError("not an occupancy map snapshot")
        if vals[1] != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {vals[1]}")
        dims = vals[2:5]
        bmin, bmax, res = vals[5:8], vals[8:11], vals[11]
        sensor = SensorModel(*vals[12:22])
        m = cls(bmin, bmax, res, sensor)
        if m.dims != tuple(dims):
            raise ValueError("snapshot dims inconsistent with bounds")
        off = n
        for name in ("log_odds", "weight", "colour", "min_obs_dist"):
            a = getattr(m, name)
            a[...] = np.frombuffer(data, dtype=a.dtype, count=a.size, offset=off).reshape(a.shape)
            off += a.nbytes
        m.rebuild_frontiers()
        return m
