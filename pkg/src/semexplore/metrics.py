"""Ground-truth evaluation of a run: coverage, object discovery, accuracy and completeness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .occmap import OccupancyMap
from .simulator import Scene

COMPLETENESS_RADIUS = 0.05


@njit(cache=True)
def _near_occupied(points, occ, bmin, res, radius):
    """For each point: is some occupied voxel centre within ``radius``?"""
    nx, ny, nz = occ.shape
    reach = int(math.ceil(radius / res))
    r2 = radius * radius
    out = np.zeros(points.shape[0], dtype=np.bool_)
    for p in range(points.shape[0]):
        ci = int(math.floor((points[p, 0] - bmin[0]) / res))
        cj = int(math.floor((points[p, 1] - bmin[1]) / res))
        ck = int(math.floor((points[p, 2] - bmin[2]) / res))
        found = False
        for i in range(max(0, ci - reach), min(nx, ci + reach + 1)):
            if found:
                break
            dx = bmin[0] + (i + 0.5) * res - points[p, 0]
            for j in range(max(0, cj - reach), min(ny, cj + reach + 1)):
                if found:
                    break
                dy = bmin[1] + (j + 0.5) * res - points[p, 1]
                for k in range(max(0, ck - reach), min(nz, ck + reach + 1)):
                    if occ[i, j, k]:
                        dz = bmin[2] + (k + 0.5) * res - points[p, 2]
                        if dx * dx + dy * dy + dz * dz <= r2:
                            found = True
                            break
        out[p] = found
    return out


def _visible_samples(scene: Scene, pts: np.ndarray, owner) -> np.ndarray:
    """Drop samples of ``owner`` buried in (or touching) other solids or lying on/outside V."""
    keep = np.all(pts > scene.bounds_min + 1e-6, axis=1) & np.all(pts < scene.bounds_max - 1e-6, axis=1)
    for b in scene.all_boxes():
        if b is not owner:
            keep &= ~b.contains(pts, tol=1e-6)
    return pts[keep]


@dataclass
class GroundTruth:
    scene: Scene
    spacing: float = 0.02
    bg_points: np.ndarray = field(init=False)
    obj_points: dict = field(init=False)

    def __post_init__(self):
        bg = []
        self.obj_points = {}
        for inst in self.scene.instances:
            pts = [_visible_samples(self.scene, b.surface_samples(self.spacing), b)
                   for b in inst.boxes]
            pts += [_visible_samples(self.scene, m.surface_samples(self.spacing), m)
                    for m in inst.meshes]
            if not pts:
                continue
            pts = np.concatenate(pts)
            if inst.is_object:
                self.obj_points[inst.id] = pts
            else:
                bg.append(pts)
        self.bg_points = np.concatenate(bg) if bg else np.empty((0, 3))
        all_pts = [self.bg_points] + list(self.obj_points.values())
        self.all_tree = cKDTree(np.concatenate(all_pts))
        self.obj_trees = {i: cKDTree(p) for i, p in self.obj_points.items() if len(p)}
        objs = [p for p in self.obj_points.values() if len(p)]
        self.obj_union_tree = cKDTree(np.concatenate(objs)) if objs else None
        self._free_cache = {}

    def free_volume(self, occupancy: OccupancyMap) -> float:
        """Volume of map voxels whose centres lie in V outside every solid."""
        key = (tuple(occupancy.bounds_min), occupancy.dims, occupancy.resolution)
        if key not in self._free_cache:
            solid = np.zeros(occupancy.dims, dtype=bool)
            res = occupancy.resolution
            for b in self.scene.all_boxes():
                r = float(np.linalg.norm(b.half))
                lo = np.maximum(np.floor((b.center - r - occupancy.bounds_min) / res), 0).astype(int)
                hi = np.minimum(np.ceil((b.center + r - occupancy.bounds_min) / res),
                                occupancy.dims).astype(int)
                if np.any(hi <= lo):
                    continue
                g = np.meshgrid(*[np.arange(a, c) for a, c in zip(lo, hi)], indexing="ij")
                centres = occupancy.bounds_min + (np.stack(g, -1) + 0.5) * res
                sl = tuple(slice(a, c) for a, c in zip(lo, hi))
                solid[sl] |= b.contains(centres)
            centres_ok = np.ones(occupancy.dims, dtype=bool)
            for a in range(3):
                c = occupancy.bounds_min[a] + (np.arange(occupancy.dims[a]) + 0.5) * res
                inside = (c >= self.scene.bounds_min[a]) & (c < self.scene.bounds_max[a])
                shape = [1, 1, 1]
                shape[a] = -1
                centres_ok &= inside.reshape(shape)
            self._free_cache[key] = float(np.count_nonzero(centres_ok & ~solid)) * res ** 3
        return self._free_cache[key]


@dataclass
class MetricsConfig:
    d_bg: float = 3.0
    d_obj: float = 1.0
    completeness_radius: float = COMPLETENESS_RADIUS
    match_factor: float = 2.0      # submap matches a GT object if median distance < factor * r_c


def _pct(num, den) -> float:
    return 100.0 * num / den if den else 0.0


def objects_found(gt: GroundTruth, objects, factor: float = 2.0) -> tuple[float, dict]:
    """Percentage of GT objects matched by some submap of the same class."""
    found = {}
    if objects is None:
        return 0.0, found
    for sm in objects:
        pts = sm.voxel_centers(sm.surface_voxels())
        if not len(pts):
            continue
        for gid, tree in gt.obj_trees.items():
            if gt.scene.instance(gid).cls != sm.cls:
                continue
            d, _ = tree.query(pts)
            if np.median(d) < factor * sm.resolution:
                found.setdefault(gid, []).append(sm.id)
    return _pct(len(found), len(gt.obj_points)), found


def cheap_metrics(gt: GroundTruth, occupancy: OccupancyMap, objects, cfg: MetricsConfig) -> dict:
    occ = occupancy.occupied_mask()
    n_occ = int(np.count_nonzero(occ))
    bg_within = _pct(int(np.count_nonzero(occupancy.min_obs_dist[occ] <= cfg.d_bg)), n_occ)
    obj_within = 0.0
    if objects is not None and len(objects):
        _, _, obs = objects.surface_points()
        obj_within = _pct(int(np.count_nonzero(obs <= cfg.d_obj)), len(obs))
    pct, _ = objects_found(gt, objects, cfg.match_factor)
    return {"explored_volume": occupancy.explored_volume(),
            "frontier_count": int(occupancy.frontier_count),
            "objects_found_pct": pct,
            "bg_within_dist_pct": bg_within,
            "obj_within_dist_pct": obj_within}


def reconstruction_metrics(gt: GroundTruth, occupancy: OccupancyMap, objects,
                           cfg: MetricsConfig) -> dict:
    """Accuracy (RMS, metres) and completeness (% within 5 cm) for background and objects."""
    out = {"bg_acc": 0.0, "obj_acc": 0.0, "bg_comp": 0.0, "obj_comp": 0.0}
    occ = occupancy.occupied_mask()
    flat = np.flatnonzero(occ)
    if len(flat):
        d, _ = gt.all_tree.query(occupancy.flat_to_center(flat))
        out["bg_acc"] = float(np.sqrt(np.mean(d ** 2)))
        if len(gt.bg_points):
            near = _near_occupied(gt.bg_points, occ, occupancy.bounds_min,
                                  occupancy.resolution, cfg.completeness_radius)
            out["bg_comp"] = _pct(int(near.sum()), len(near))
    verts = []
    if objects is not None:
        for sm in objects:
            v, _ = sm.extract_surface()
            if len(v):
                verts.append(v)
    if verts and gt.obj_union_tree is not None:
        v = np.concatenate(verts)
        d, _ = gt.obj_union_tree.query(v)
        out["obj_acc"] = float(np.sqrt(np.mean(d ** 2)))
        gt_obj = np.concatenate([p for p in gt.obj_points.values() if len(p)])
        d2, _ = cKDTree(v).query(gt_obj, distance_upper_bound=cfg.completeness_radius)
        out["obj_comp"] = _pct(int(np.count_nonzero(np.isfinite(d2))), len(gt_obj))
    return out


def object_accuracy(gt: GroundTruth, submap) -> float:
    """RMS distance of one submap's mesh vertices to its nearest GT object surface."""
    v, _ = submap.extract_surface()
    if not len(v) or gt.obj_union_tree is None:
        return float("nan")
    d, _ = gt.obj_union_tree.query(v)
    return float(np.sqrt(np.mean(d ** 2)))


def metrics(scene_or_gt, occupancy: OccupancyMap, objects, cfg: MetricsConfig | None = None) -> dict:
    """All metrics at once (see cheap_metrics and reconstruction_metrics)."""
    cfg = cfg or MetricsConfig()
    gt = scene_or_gt if isinstance(scene_or_gt, GroundTruth) else GroundTruth(scene_or_gt)
    out = cheap_metrics(gt, occupancy, objects, cfg)
    out.update(reconstruction_metrics(gt, occupancy, objects, cfg))
    out["free_volume"] = gt.free_volume(occupancy)
    return out
