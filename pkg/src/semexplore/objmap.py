"""Per-object TSDF submaps with quantized storage, mask rendering and detection matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from ._raycast import box_interval, traverse
from .geometry import CameraModel, RigidTransform
from .occmap import OccupancyMap
from .plyio import write_ply

TSDF_SCALE = 32767
FG_SCALE = 255
WEIGHT_MAX = 100
FG_PRIOR = 0.5

# Declared voxel payload layouts. min_obs_dist is metadata held equal in both.
QUANTIZED_VOXEL = np.dtype([("tsdf", "<i2"), ("fg", "u1"), ("rgb", "u1", (3,)), ("weight", "u1")])
FLOAT_VOXEL = np.dtype([("tsdf", "<f4"), ("fg", "<f4"), ("rgb", "u1", (3,)), ("weight", "u1")])
assert QUANTIZED_VOXEL.itemsize == 7 and FLOAT_VOXEL.itemsize == 12
MEMORY_REDUCTION = 1.0 - QUANTIZED_VOXEL.itemsize / FLOAT_VOXEL.itemsize
assert MEMORY_REDUCTION >= 0.39


def encode_tsdf(x):
    """Clamp to [-1, 1] and round to the nearest int16 code."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint(x * TSDF_SCALE).astype(np.int16)


def decode_tsdf(q):
    return np.asarray(q, dtype=np.float64) / TSDF_SCALE


def encode_fg(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    return np.rint(p * FG_SCALE).astype(np.uint8)


def decode_fg(q):
    return np.asarray(q, dtype=np.float64) / FG_SCALE


# rounded down: the prior alone must not pass the > 0.5 foreground gate
FG_PRIOR_CODE = int(math.floor(FG_PRIOR * FG_SCALE))
# smallest fg code that decodes strictly above 0.5
FG_GATE_CODE = int(math.floor(0.5 * FG_SCALE)) + 1


@dataclass
class ClassTable:
    """Semantic classes and their TSDF resolution in metres."""

    resolutions: dict[str, float]
    d_obj: float = 1.0

    def __post_init__(self):
        if not self.resolutions:
            raise ValueError("class table is empty")
        for cls, r in self.resolutions.items():
            if not r > 0:
                raise ValueError(f"class {cls!r} has non-positive resolution {r}")

    def resolution(self, cls: str) -> float:
        try:
            return float(self.resolutions[cls])
        except KeyError:
            raise KeyError(f"unknown semantic class {cls!r}") from None

    def __contains__(self, cls) -> bool:
        return cls in self.resolutions


@dataclass
class Detection:
    mask: np.ndarray
    cls: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.mask))


def min_mask_pixels(cam: CameraModel, base: int = 50) -> int:
    """Minimum detection size, 50 px at 320x240 scaled by image area."""
    return max(1, int(round(base * cam.width * cam.height / (320 * 240))))


def touches_border(mask) -> bool:
    m = np.asarray(mask, dtype=bool)
    return bool(m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def box_overlap(a, b) -> float:
    """Intersection volume of two boxes over the smaller box's volume."""
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    small = min(float(np.prod(a[1] - a[0])), float(np.prod(b[1] - b[0])))
    return inter / small if small > 0 else 0.0


def match_contained(detections, rendered_masks: dict, classes: dict, free_dets, taken,
                    threshold: float) -> list[tuple[int, int, float]]:
    """Pair leftover detections with same-class objects whose rendered mask lies mostly
    inside them. Greedy by containment, then lower object id."""
    pairs = []
    for d in free_dets:
        det = detections[d]
        for oid, rm in rendered_masks.items():
            if oid in taken or classes[oid] != det.cls:
                continue
            c = np.count_nonzero(det.mask & rm) / np.count_nonzero(rm)
            if c >= threshold:
                pairs.append((-c, oid, d))
    pairs.sort()
    used_d, used_o, out = set(), set(), []
    for neg_c, oid, d in pairs:
        if d in used_d or oid in used_o:
            continue
        used_d.add(d)
        used_o.add(oid)
        out.append((d, oid, -neg_c))
    return sorted(out)


def filter_detections(detections, min_pixels: int) -> list[Detection]:
    return [d for d in detections if d.size >= min_pixels]


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _integrate_tsdf(tsdf, weight, fg, colour, min_obs, origin, res, trunc,
                    rot_cw, t_cw, depth, codes, cols, intr, fuse_fg):
    """Projective TSDF update. ``codes``: 0 skip, 1 detected pixel (fg obs 1),
    2 observed-but-undetected pixel (fg obs 0), 3 integrate without fg update."""
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    H, W = depth.shape
    nx, ny, nz = tsdf.shape
    n_upd = 0
    for i in range(nx):
        px = origin[0] + (i + 0.5) * res
        for j in range(ny):
            py = origin[1] + (j + 0.5) * res
            for k in range(nz):
                pz = origin[2] + (k + 0.5) * res
                xc = rot_cw[0, 0] * px + rot_cw[0, 1] * py + rot_cw[0, 2] * pz + t_cw[0]
                yc = rot_cw[1, 0] * px + rot_cw[1, 1] * py + rot_cw[1, 2] * pz + t_cw[1]
                zc = rot_cw[2, 0] * px + rot_cw[2, 1] * py + rot_cw[2, 2] * pz + t_cw[2]
                if zc <= 1e-6:
                    continue
                u = int(math.floor(fx * xc / zc + cx + 0.5))
                v = int(math.floor(fy * yc / zc + cy + 0.5))
                if u < 0 or u >= W or v < 0 or v >= H:
                    continue
                code = codes[v, u]
                d = depth[v, u]
                if code == 0 or not d > 0.0:
                    continue
                rho = math.sqrt(xc * xc + yc * yc + zc * zc)
                sdf = (d - zc) * rho / zc
                if sdf < -trunc:
                    continue
                obs = sdf / trunc
                if obs > 1.0:
                    obs = 1.0
                w = weight[i, j, k]
                cur = tsdf[i, j, k] / 32767.0
                new = (cur * w + obs) / (w + 1.0)
                q = int(round(new * 32767.0))
                if q > 32767:
                    q = 32767
                elif q < -32767:
                    q = -32767
                tsdf[i, j, k] = q
                for c in range(3):
                    val = (colour[i, j, k, c] * w + cols[v, u, c]) / (w + 1.0)
                    colour[i, j, k, c] = min(255, int(round(val)))
                if fuse_fg and (code == 1 or code == 2):
                    f_obs = 1.0 if code == 1 else 0.0
                    f = (fg[i, j, k] / 255.0 * w + f_obs) / (w + 1.0)
                    fg[i, j, k] = min(255, int(round(f * 255.0)))
                if w < 100:
                    weight[i, j, k] = w + 1
                if rho < min_obs[i, j, k]:
                    min_obs[i, j, k] = rho
                n_upd += 1
    return n_upd


@njit(cache=True)
def _object_raycast(origin, dirs, t_max, tsdf, weight, fg, min_obs, grid_origin, res,
                    fg_gate, obj_index, best_t, best_obs, best_obj):
    """Nearest TSDF zero crossing (gated by weight and fg) along each unit ray.

    Updates best_t / best_obs / best_obj in place where this object is nearer.
    """
    dims = np.array(tsdf.shape, dtype=np.int64)
    cap = int(dims.sum()) + 3
    idx = np.empty((cap, 3), dtype=np.int64)
    tin = np.empty(cap)
    tout = np.empty(cap)
    hi = np.empty(3)
    for a in range(3):
        hi[a] = grid_origin[a] + dims[a] * res
    for r in range(dirs.shape[0]):
        # cheap reject before the traversal sets up its state
        t0, t1 = box_interval(origin, dirs[r], grid_origin, hi)
        if not max(t0, 0.0) < min(t1, t_max, best_t[r]):
            continue
        n = traverse(origin, dirs[r], 0.0, min(t_max, best_t[r]), grid_origin, res, dims,
                     idx, tin, tout)
        prev_ok = False
        prev_v = 0.0
        prev_t = 0.0
        for s in range(n):
            i, j, k = idx[s, 0], idx[s, 1], idx[s, 2]
            if weight[i, j, k] == 0 or fg[i, j, k] < fg_gate:
                prev_ok = False
                continue
            v = tsdf[i, j, k] / 32767.0
            # parameter of the voxel centre's projection on the ray
            tc = 0.0
            for a in range(3):
                tc += (grid_origin[a] + (idx[s, a] + 0.5) * res - origin[a]) * dirs[r, a]
            if v <= 0.0:
                if prev_ok and prev_v > 0.0:
                    t = prev_t + (tc - prev_t) * prev_v / (prev_v - v)
                else:
                    t = tin[s]
                if t < best_t[r]:
                    best_t[r] = t
                    best_obs[r] = min_obs[i, j, k]
                    best_obj[r] = obj_index
                break
            prev_ok = True
            prev_v = v
            prev_t = tc
    return 0


@njit(cache=True)
def _footprint(tsdf, weight, fg, grid_origin, res, fg_gate, rot_cw, t_cw, intr, out):
    """Mark pixels whose ray can stop in this submap: the projected discs of all
    voxels that can hold a zero crossing (observed, foreground, tsdf <= 0)."""
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    H, W = out.shape
    nx, ny, nz = tsdf.shape
    half = 0.5 * math.sqrt(3.0) * res
    n = 0
    for i in range(nx):
        px = grid_origin[0] + (i + 0.5) * res
        for j in range(ny):
            py = grid_origin[1] + (j + 0.5) * res
            for k in range(nz):
                if weight[i, j, k] == 0 or fg[i, j, k] < fg_gate or tsdf[i, j, k] > 0:
                    continue
                pz = grid_origin[2] + (k + 0.5) * res
                xc = rot_cw[0, 0] * px + rot_cw[0, 1] * py + rot_cw[0, 2] * pz + t_cw[0]
                yc = rot_cw[1, 0] * px + rot_cw[1, 1] * py + rot_cw[1, 2] * pz + t_cw[1]
                zc = rot_cw[2, 0] * px + rot_cw[2, 1] * py + rot_cw[2, 2] * pz + t_cw[2]
                if zc <= half + 1e-6:
                    if zc + half > 0.0:
                        out[:, :] = True       # voxel straddles the image plane
                        return -1
                    continue
                zn = zc - half
                # bounding square of the projected voxel sphere, one pixel slack
                u = fx * xc / zc + cx
                v = fy * yc / zc + cy
                ru = fx * half / zn * (1.0 + abs(xc) / zn) + 1.0
                rv = fy * half / zn * (1.0 + abs(yc) / zn) + 1.0
                u0 = max(0, int(math.floor(u - ru)))
                u1 = min(W - 1, int(math.ceil(u + ru)))
                v0 = max(0, int(math.floor(v - rv)))
                v1 = min(H - 1, int(math.ceil(v + rv)))
                for vv in range(v0, v1 + 1):
                    for uu in range(u0, u1 + 1):
                        out[vv, uu] = True
                n += 1
    return n


# ---------------------------------------------------------------------------
# submaps


class ObjectSubmap:
    """Dense quantized TSDF block at a fixed class resolution; grows on demand."""

    def __init__(self, obj_id: int, cls: str, resolution: float, lo, hi,
                 truncation_factor: float = 4.0):
        self.id = int(obj_id)
        self.cls = cls
        self.resolution = float(resolution)
        self.truncation = truncation_factor * self.resolution
        self.origin = np.zeros(3)
        self.tsdf = np.zeros((0, 0, 0), dtype=np.int16)
        self.weight = np.zeros((0, 0, 0), dtype=np.uint8)
        self.fg = np.zeros((0, 0, 0), dtype=np.uint8)
        self.colour = np.zeros((0, 0, 0, 3), dtype=np.uint8)
        self.min_obs_dist = np.zeros((0, 0, 0), dtype=np.float32)
        self._allocate(np.asarray(lo, float), np.asarray(hi, float))

    @property
    def shape(self):
        return self.tsdf.shape

    @property
    def extent(self):
        return self.origin, self.origin + np.array(self.shape) * self.resolution

    def _allocate(self, lo, hi):
        r = self.resolution
        new_origin = np.floor(lo / r) * r
        new_shape = tuple(int(v) for v in np.maximum(np.ceil((hi - new_origin) / r - 1e-9), 1))
        arrays = dict(
            tsdf=np.zeros(new_shape, np.int16), weight=np.zeros(new_shape, np.uint8),
            fg=np.full(new_shape, FG_PRIOR_CODE, np.uint8),
            colour=np.zeros(new_shape + (3,), np.uint8),
            min_obs_dist=np.full(new_shape, np.inf, np.float32))
        if self.tsdf.size:
            off = np.rint((self.origin - new_origin) / r).astype(int)
            sl = tuple(slice(o, o + s) for o, s in zip(off, self.shape))
            for name, arr in arrays.items():
                arr[sl] = getattr(self, name)
        for name, arr in arrays.items():
            setattr(self, name, arr)
        self.origin = new_origin

    def ensure_contains(self, lo, hi, max_extent: float = 6.0) -> bool:
        """Grow the block (keeping voxel alignment) so it covers [lo, hi)."""
        cur_lo, cur_hi = self.extent
        lo = np.minimum(cur_lo, lo)
        hi = np.maximum(cur_hi, hi)
        if np.all(lo >= cur_lo) and np.all(hi <= cur_hi):
            return False
        if np.any(hi - lo > max_extent):
            lo = np.maximum(lo, cur_lo - max_extent / 2)
            hi = np.minimum(hi, cur_hi + max_extent / 2)
        self._allocate(lo, hi)
        return True

    def integrate(self, depth, colour, codes, T_WC: RigidTransform, cam: CameraModel,
                  fuse_fg: bool = True) -> int:
        rot_cw = T_WC.rotation.T.copy()
        t_cw = -rot_cw @ T_WC.translation
        cols = np.asarray(colour, dtype=np.float64)
        if cols.ndim == 2:
            cols = np.repeat(cols[..., None], 3, axis=2)
        return int(_integrate_tsdf(self.tsdf, self.weight, self.fg, self.colour, self.min_obs_dist,
                                   self.origin, self.resolution, self.truncation, rot_cw, t_cw,
                                   depth, codes, cols, cam.as_array()[2:6], fuse_fg))

    # -- queries --------------------------------------------------------------------

    def voxel_centers(self, ijk) -> np.ndarray:
        return self.origin + (np.asarray(ijk, float) + 0.5) * self.resolution

    def foreground_mask(self) -> np.ndarray:
        return (self.weight > 0) & (self.fg >= FG_GATE_CODE)

    def surface_mask(self) -> np.ndarray:
        """Observed foreground voxels within one voxel of the zero crossing."""
        limit = self.resolution / self.truncation
        return self.foreground_mask() & (np.abs(decode_tsdf(self.tsdf)) < limit)

    def surface_voxels(self) -> np.ndarray:
        return np.argwhere(self.surface_mask())

    def _window(self, other: "ObjectSubmap"):
        """Index slices of the shared lattice box in self and in other (None if disjoint)."""
        r = self.resolution
        off = np.rint((other.origin - self.origin) / r).astype(int)
        lo = np.maximum(off, 0)
        hi = np.minimum(np.array(self.shape), off + np.array(other.shape))
        if np.any(hi <= lo):
            return None
        return (tuple(slice(a, b) for a, b in zip(lo, hi)),
                tuple(slice(a - o, b - o) for a, b, o in zip(lo, hi, off)))

    def surface_box(self):
        """World box around the observed foreground surface, or None if there is none."""
        ijk = self.surface_voxels()
        if not len(ijk):
            return None
        return (self.origin + ijk.min(0) * self.resolution,
                self.origin + (ijk.max(0) + 1) * self.resolution)

    def absorb(self, other: "ObjectSubmap", max_extent: float = 6.0):
        """Weighted fusion of another submap on the same lattice into this one."""
        if abs(other.resolution - self.resolution) > 1e-12:
            raise ValueError("submaps differ in resolution")
        self.ensure_contains(*other.extent, max_extent=max_extent)
        win = self._window(other)
        if win is None:
            return
        mine, theirs = win
        wa = self.weight[mine].astype(np.float64)
        wb = other.weight[theirs].astype(np.float64)
        tot = wa + wb
        seen = tot > 0
        den = np.where(seen, tot, 1.0)
        tsdf = (decode_tsdf(self.tsdf[mine]) * wa + decode_tsdf(other.tsdf[theirs]) * wb) / den
        fg = (decode_fg(self.fg[mine]) * wa + decode_fg(other.fg[theirs]) * wb) / den
        col = (self.colour[mine] * wa[..., None] + other.colour[theirs] * wb[..., None]) \
            / den[..., None]
        self.tsdf[mine] = np.where(seen, encode_tsdf(tsdf), self.tsdf[mine])
        self.fg[mine] = np.where(seen, encode_fg(fg), self.fg[mine])
        self.colour[mine] = np.where(seen[..., None], np.clip(np.rint(col), 0, 255),
                                     self.colour[mine]).astype(np.uint8)
        self.weight[mine] = np.minimum(tot, WEIGHT_MAX).astype(np.uint8)
        self.min_obs_dist[mine] = np.minimum(self.min_obs_dist[mine], other.min_obs_dist[theirs])

    def extract_surface(self):
        """Marching-cubes mesh (vertices in world metres, faces) of the gated zero level."""
        from skimage.measure import marching_cubes

        fgm = self.foreground_mask()
        # a cube is meshed only if all eight corners are observed foreground
        mask = fgm.copy()
        mask[:-1] &= fgm[1:]
        mask[-1] = False
        mask[:, :-1] &= mask[:, 1:]
        mask[:, -1] = False
        mask[:, :, :-1] &= mask[:, :, 1:]
        mask[:, :, -1] = False
        # skimage indexes a cube by its upper corner
        mask = np.pad(mask[:-1, :-1, :-1], ((1, 0), (1, 0), (1, 0)))
        if not mask.any() or min(self.shape) < 2:
            return np.empty((0, 3)), np.empty((0, 3), dtype=np.int64)
        vol = np.where(self.weight > 0, decode_tsdf(self.tsdf), 1.0)
        if vol[mask].min() > 0 or vol[mask].max() < 0:
            return np.empty((0, 3)), np.empty((0, 3), dtype=np.int64)
        try:
            verts, faces, _, _ = marching_cubes(vol, level=0.0, mask=mask,
                                                allow_degenerate=False)
        except (ValueError, RuntimeError):
            return np.empty((0, 3)), np.empty((0, 3), dtype=np.int64)
        return self.origin + (verts + 0.5) * self.resolution, faces.astype(np.int64)

    def export_ply(self, directory) -> Path:
        verts, faces = self.extract_surface()
        cols = None
        if len(verts):
            ijk = np.clip(np.floor((verts - self.origin) / self.resolution).astype(int), 0,
                          np.array(self.shape) - 1)
            cols = self.colour[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
        name = f"object_{self.id}_{self.cls}.ply"
        return write_ply(Path(directory) / name, verts, cols, faces)

    def nbytes(self) -> int:
        return self.tsdf.nbytes + self.fg.nbytes + self.colour.nbytes + self.weight.nbytes


# ---------------------------------------------------------------------------
# matching


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


@dataclass
class MatchResult:
    assignments: list[tuple[int, int, float]]   # (detection index, object id, IoU)
    new: list[int]                              # detection indices without a match


def match_detections(detections, rendered_masks: dict, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching by descending IoU; ties go to the lower object id."""
    pairs = []
    for d, det in enumerate(detections):
        mask = det.mask if isinstance(det, Detection) else np.asarray(det, bool)
        for oid, rm in rendered_masks.items():
            if mask.shape != np.shape(rm):
                raise ValueError("detection and rendered mask sizes differ")
            iou = mask_iou(mask, rm)
            if iou > iou_threshold:
                pairs.append((-iou, oid, d))
    pairs.sort()
    used_d, used_o = set(), set()
    assignments = []
    for neg_iou, oid, d in pairs:
        if d in used_d or oid in used_o:
            continue
        used_d.add(d)
        used_o.add(oid)
        assignments.append((d, oid, -neg_iou))
    assignments.sort()
    new = [d for d in range(len(detections)) if d not in used_d]
    return MatchResult(assignments, new)


# ---------------------------------------------------------------------------
# store


@dataclass
class ObjectMapConfig:
    iou_threshold: float = 0.5
    min_mask_pixels: int = 50            # at 320x240, scaled by image area
    truncation_factor: float = 4.0
    fuse_fg_zero: bool = True            # fg observation 0 for rendered-but-undetected pixels
    occlusion_margin: float = 3.0        # in background voxels
    max_extent: float = 6.0
    create_from_border: bool = False     # truncated masks may seed new objects
    containment: float | None = 0.8      # fallback for objects emerging from occlusion
    merge_overlap: float = 0.5           # surface-box overlap above which submaps are merged


@dataclass
class FrameReport:
    matched: list[tuple[int, int, float]] = field(default_factory=list)
    created: list[int] = field(default_factory=list)
    undetected: list[int] = field(default_factory=list)
    truncated: list[int] = field(default_factory=list)   # unmatched detections at the border
    contained: list[tuple[int, int, float]] = field(default_factory=list)  # (d, oid, containment)


class ObjectStore:
    """All object submaps of a run."""

    def __init__(self, classes: ClassTable, config: ObjectMapConfig | None = None):
        self.classes = classes
        self.config = config or ObjectMapConfig()
        self.submaps: dict[int, ObjectSubmap] = {}
        self._next_id = 1

    def __len__(self):
        return len(self.submaps)

    def __iter__(self):
        return iter(self.submaps.values())

    # -- raycasting -------------------------------------------------------------------

    def raycast(self, origin, dirs, t_max: float, occupancy: OccupancyMap | None = None,
                margin: float | None = None, subsets: dict | None = None):
        """Nearest object surface per ray, hidden where the background is nearer.

        ``subsets`` optionally limits each object to the given ray indices.
        Returns (object id or -1, distance, min_obs_dist) arrays.
        """
        origin = np.asarray(origin, dtype=float)
        dirs = np.ascontiguousarray(np.asarray(dirs, dtype=float).reshape(-1, 3))
        n = len(dirs)
        best_t = np.full(n, np.inf)
        best_obs = np.full(n, np.inf)
        best_obj = np.full(n, -1, dtype=np.int64)
        ids = list(self.submaps)
        for k, oid in enumerate(ids):
            sm = self.submaps[oid]
            if subsets is None:
                _object_raycast(origin, dirs, float(t_max), sm.tsdf, sm.weight, sm.fg,
                                sm.min_obs_dist, sm.origin, sm.resolution, FG_GATE_CODE, k,
                                best_t, best_obs, best_obj)
                continue
            sub = subsets.get(oid)
            if sub is None or not len(sub):
                continue
            bt, bo, bj = best_t[sub], best_obs[sub], best_obj[sub]
            _object_raycast(origin, np.ascontiguousarray(dirs[sub]), float(t_max), sm.tsdf,
                            sm.weight, sm.fg, sm.min_obs_dist, sm.origin, sm.resolution,
                            FG_GATE_CODE, k, bt, bo, bj)
            best_t[sub], best_obs[sub], best_obj[sub] = bt, bo, bj
        hit = best_obj >= 0
        if occupancy is not None and hit.any():
            if margin is None:
                margin = self.config.occlusion_margin * occupancy.resolution
            sel = np.flatnonzero(hit)
            bidx, bt, _ = occupancy.raycast_first_hit(origin, dirs[sel], t_max)
            hidden = (bidx >= 0) & (bt + margin < best_t[sel])
            best_obj[sel[hidden]] = -1
        out_ids = np.where(best_obj >= 0, np.asarray(ids + [-1], dtype=np.int64)[best_obj], -1)
        best_t[out_ids < 0] = np.inf
        best_obs[out_ids < 0] = np.inf
        return out_ids, best_t, best_obs

    def render_masks(self, T_WC: RigidTransform, cam: CameraModel,
                     occupancy: OccupancyMap | None = None) -> dict[int, np.ndarray]:
        """Occlusion-aware binary mask of every known object in this view."""
        if not self.submaps:
            return {}
        feet = self._footprints(T_WC, cam)
        masks = {oid: np.zeros((cam.height, cam.width), dtype=bool) for oid in self.submaps}
        pix = np.zeros((cam.height, cam.width), dtype=bool)
        for f in feet.values():
            pix |= f
        if not pix.any():
            return masks
        flat = np.flatnonzero(pix)
        slot = np.full(pix.size, -1, dtype=np.int64)
        slot[flat] = np.arange(len(flat))
        subsets = {oid: slot[np.flatnonzero(f)] for oid, f in feet.items()}
        rays = cam.pixel_rays().reshape(-1, 3)[flat]
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        ids, _, _ = self.raycast(T_WC.translation, T_WC.rotate(rays), cam.d_max, occupancy,
                                 subsets=subsets)
        vv, uu = np.divmod(flat, cam.width)
        for oid in self.submaps:
            sel = ids == oid
            masks[oid][vv[sel], uu[sel]] = True
        return masks

    def _footprints(self, T_WC: RigidTransform, cam: CameraModel) -> dict[int, np.ndarray]:
        """Per object, a superset of the pixels whose rays can stop on its surface."""
        T_CW = T_WC.inverse()
        rot, t = np.ascontiguousarray(T_CW.rotation), np.ascontiguousarray(T_CW.translation)
        intr = np.array([cam.fx, cam.fy, cam.cx, cam.cy])
        out = {}
        for oid, sm in self.submaps.items():
            f = np.zeros((cam.height, cam.width), dtype=bool)
            if _footprint(sm.tsdf, sm.weight, sm.fg, sm.origin, sm.resolution, FG_GATE_CODE,
                          rot, t, intr, f):
                out[oid] = f
        return out

    # -- integration -------------------------------------------------------------------

    def _masked_bbox(self, depth, mask, T_WC, cam, pad):
        vv, uu = np.nonzero(mask & (depth > 0))
        if len(vv) == 0:
            return None
        d = depth[vv, uu]
        pc = np.stack([(uu - cam.cx) / cam.fx * d, (vv - cam.cy) / cam.fy * d, d], -1)
        pw = T_WC.apply(pc)
        return pw.min(0) - pad, pw.max(0) + pad

    def create(self, cls: str, depth, mask, T_WC, cam) -> ObjectSubmap | None:
        res = self.classes.resolution(cls)
        trunc = self.config.truncation_factor * res
        box = self._masked_bbox(depth, mask, T_WC, cam, trunc + res)
        if box is None:
            return None
        lo, hi = box
        if np.any(hi - lo > self.config.max_extent):
            return None
        sm = ObjectSubmap(self._next_id, cls, res, lo, hi, self.config.truncation_factor)
        self.submaps[sm.id] = sm
        self._next_id += 1
        return sm

    def integrate_object(self, submap: ObjectSubmap, depth, colour, mask, T_WC, cam,
                         detected: bool, rendered_mask=None) -> int:
        """TSDF/colour/min-distance update through ``mask``; fg fused only if detected.

        With ``detected`` and a ``rendered_mask``, pixels in the rendered mask but
        outside the detection contribute a foreground observation of 0.
        """
        depth = np.asarray(depth, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        if depth.shape != (cam.height, cam.width) or mask.shape != depth.shape:
            raise ValueError("depth/mask dimensions do not match the camera")
        if np.shape(colour)[:2] != depth.shape:
            raise ValueError("colour dimensions do not match the camera")
        valid = np.isfinite(depth) & (depth >= cam.d_min) & (depth <= cam.d_max)
        depth = np.where(valid, depth, 0.0)
        codes = np.zeros(depth.shape, dtype=np.uint8)
        if detected:
            box = self._masked_bbox(depth, mask, T_WC, cam, submap.truncation + submap.resolution)
            if box is not None:
                submap.ensure_contains(*box, max_extent=self.config.max_extent)
            if rendered_mask is not None and self.config.fuse_fg_zero:
                codes[np.asarray(rendered_mask, bool) & ~mask] = 2
            codes[mask] = 1
        else:
            codes[mask] = 3
        return submap.integrate(depth, colour, codes, T_WC, cam, fuse_fg=detected)

    def process_frame(self, depth, colour, detections, T_WC: RigidTransform,
                      cam: CameraModel, occupancy: OccupancyMap | None = None) -> FrameReport:
        """Match detections against rendered masks and fuse the frame into the submaps."""
        for det in detections:
            if det.cls not in self.classes:
                raise KeyError(f"detection of unknown class {det.cls!r}")
        min_px = max(1, int(round(self.config.min_mask_pixels * cam.width * cam.height
                                  / (320 * 240))))
        dets = filter_detections(detections, min_px)
        rendered = self.render_masks(T_WC, cam, occupancy)
        rendered = {oid: m for oid, m in rendered.items() if m.any()}
        result = match_detections(dets, rendered, self.config.iou_threshold)
        report = FrameReport(matched=result.assignments)
        new = result.new
        if self.config.containment is not None and new:
            report.contained = match_contained(
                dets, rendered, {o: self.submaps[o].cls for o in rendered}, new,
                {oid for _, oid, _ in result.assignments}, self.config.containment)
            new = [d for d in new if d not in {c[0] for c in report.contained}]
        seen = set()
        for d, oid, _ in result.assignments + report.contained:
            self.integrate_object(self.submaps[oid], depth, colour, dets[d].mask, T_WC, cam,
                                  True, rendered[oid])
            seen.add(oid)
        for oid, m in rendered.items():
            if oid not in seen:
                self.integrate_object(self.submaps[oid], depth, colour, m, T_WC, cam, False)
                report.undetected.append(oid)
        for d in new:
            if not self.config.create_from_border and touches_border(dets[d].mask):
                report.truncated.append(d)
                continue
            sm = self.create(dets[d].cls, depth, dets[d].mask, T_WC, cam)
            if sm is not None:
                self.integrate_object(sm, depth, colour, dets[d].mask, T_WC, cam, True)
                report.created.append(sm.id)
        return report

    # -- summaries ----------------------------------------------------------------------

    def merge_duplicates(self, ids=None) -> list[tuple[int, int]]:
        """Fold same-class submaps whose surfaces occupy the same space into the older one.

        Same-class objects are physically apart, so two surface boxes sharing most of
        the smaller one's volume mean one object reconstructed twice.

        Checks the given ids (default all) against every other same-class submap;
        returns (kept, removed) pairs.
        """
        merged = []
        todo = list(self.submaps) if ids is None else [i for i in ids if i in self.submaps]
        while todo:
            oid = todo.pop(0)
            if oid not in self.submaps:
                continue
            a = self.submaps[oid]
            box_a = a.surface_box()
            if box_a is None:
                continue
            for other in sorted(self.submaps):
                b = self.submaps.get(other)
                if other == oid or b is None or b.cls != a.cls:
                    continue
                box_b = b.surface_box()
                if box_b is not None and box_overlap(box_a, box_b) >= self.config.merge_overlap:
                    keep, drop = (a, b) if a.id < b.id else (b, a)
                    keep.absorb(drop, self.config.max_extent)
                    del self.submaps[drop.id]
                    merged.append((keep.id, drop.id))
                    todo.append(keep.id)
                    break
        return merged

    def surface_points(self):
        """(points, owner ids, min_obs_dist) of every object surface voxel."""
        pts, owners, obs = [], [], []
        for sm in self.submaps.values():
            ijk = sm.surface_voxels()
            pts.append(sm.voxel_centers(ijk))
            owners.append(np.full(len(ijk), sm.id))
            obs.append(sm.min_obs_dist[tuple(ijk.T)])
        if not pts:
            return np.empty((0, 3)), np.empty(0, dtype=np.int64), np.empty(0)
        return np.concatenate(pts), np.concatenate(owners), np.concatenate(obs)

    def export_ply(self, directory) -> list[Path]:
        return [sm.export_ply(directory) for sm in self.submaps.values()]
