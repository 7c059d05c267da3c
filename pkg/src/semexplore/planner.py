"""Next-best-view planning: candidate sampling, paths, panoramic gains and utility."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.ndimage import binary_dilation, maximum_filter
from scipy.spatial import cKDTree

from .geometry import CameraModel, PanoramaModel, wrap_angle
from .occmap import OccupancyMap


class PlanningError(RuntimeError):
    """No traversable free space around the start position."""


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 20
    p_frontier: float = 0.5
    alpha: tuple[float, float, float] = (0.34, 0.33, 0.33)   # entropy, background, object
    d_bg: float = 3.0
    d_obj: float = 1.0
    pano_width: int = 36
    pano_height: int = 10
    v_max: float = 1.5
    w_max: float = 0.75
    radius: float = 0.125
    eps_gain: float = 0.01
    time_floor: float = 0.1
    lattice_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        a = tuple(float(x) for x in self.alpha)
        object.__setattr__(self, "alpha", a)
        if len(a) != 3 or min(a) < 0 or abs(sum(a) - 1.0) > 1e-9:
            raise ValueError(f"alpha weights must be non-negative and sum to 1, got {a}")
        if not 0.0 <= self.p_frontier <= 1.0:
            raise ValueError("p_frontier must lie in [0, 1]")
        if not 0 < self.d_obj < self.d_bg:
            raise ValueError("need 0 < d_obj < d_bg")
        if self.n_candidates < 1 or self.pano_width < 1 or self.pano_height < 1:
            raise ValueError("candidate count and panorama size must be positive")
        if min(self.v_max, self.w_max, self.radius, self.time_floor) <= 0:
            raise ValueError("speeds, radius and time floor must be positive")
        if self.eps_gain < 0 or self.lattice_stride < 1:
            raise ValueError("invalid eps_gain or lattice stride")

    @classmethod
    def classic(cls, **kw) -> "PlannerConfig":
        """Entropy-only frontier exploration (the ablation baseline)."""
        kw.update(alpha=(1.0, 0.0, 0.0), p_frontier=1.0)
        return cls(**kw)


@dataclass
class Candidate:
    sample_point: np.ndarray
    eval_position: np.ndarray
    path: np.ndarray
    source: str = "frontier"
    gain_ent: np.ndarray | None = None
    gain_bg: np.ndarray | None = None
    gain_obj: np.ndarray | None = None
    gain: np.ndarray | None = None
    yaw: float = 0.0
    g: float = 0.0
    t: float = 0.0
    utility: float = 0.0

    def record(self) -> dict:
        return {"source": self.source, "sample": _r(self.sample_point),
                "eval": _r(self.eval_position), "path_vertices": int(len(self.path)),
                "path_length": round(path_length(self.path), 6), "yaw": round(self.yaw, 6),
                "g": round(self.g, 9), "t": round(self.t, 6), "utility": round(self.utility, 9)}


def _r(v):
    return [round(float(x), 6) for x in v]


# ---------------------------------------------------------------------------
# sampling


def sample_candidates(frontier_points, object_points, n: int, p_frontier: float,
                      rng: np.random.Generator):
    """Draw up to ``n`` sample points without replacement.

    ``frontier_points``: (F, 3) array. ``object_points``: list of (M_i, 3) arrays,
    one per known object. Returns a list of (point, source) pairs.
    """
    frontier_points = np.asarray(frontier_points, dtype=float).reshape(-1, 3)
    use_f = p_frontier > 0.0
    use_o = p_frontier < 1.0
    f_order = rng.permutation(len(frontier_points)) if use_f else np.empty(0, int)
    f_next = 0
    pools = []
    if use_o:
        for pts in object_points:
            pts = np.asarray(pts, dtype=float).reshape(-1, 3)
            if len(pts):
                pools.append([pts, rng.permutation(len(pts)), 0])
    out = []
    while len(out) < n:
        f_left = f_next < len(f_order)
        live = [p for p in pools if p[2] < len(p[1])]
        if not f_left and not live:
            break
        pick_frontier = f_left and (not live or rng.random() < p_frontier)
        if pick_frontier:
            out.append((frontier_points[f_order[f_next]], "frontier"))
            f_next += 1
        else:
            pool = live[int(rng.integers(len(live)))]
            out.append((pool[0][pool[1][pool[2]]], "object"))
            pool[2] += 1
    return out


# ---------------------------------------------------------------------------
# path planning


@njit(cache=True)
def _dijkstra(trav, start, spacing):
    nx, ny, nz = trav.shape
    n = nx * ny * nz
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    offs = []
    for a in range(-1, 2):
        for b in range(-1, 2):
            for c in range(-1, 2):
                if a != 0 or b != 0 or c != 0:
                    offs.append((a, b, c, math.sqrt(a * a + b * b + c * c) * spacing))
    dist[start] = 0.0
    heap = [(0.0, start)]
    while len(heap) > 0:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        i = u // (ny * nz)
        j = (u // nz) % ny
        k = u % nz
        for a, b, c, w in offs:
            ii, jj, kk = i + a, j + b, k + c
            if ii < 0 or jj < 0 or kk < 0 or ii >= nx or jj >= ny or kk >= nz:
                continue
            if not trav[ii, jj, kk]:
                continue
            v = (ii * ny + jj) * nz + kk
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, pred


def clearance_field(free, stride: int, clearance: float) -> np.ndarray:
    """Lattice nodes (every stride-th voxel) farther than ``clearance`` voxels from
    any non-free voxel centre, with everything outside ``free`` counting as non-free.

    Same answer as thresholding a Euclidean distance transform: the nearest
    non-free voxel to a free voxel centre always touches free space, so only
    that boundary shell is searched, with a bounded radius.
    """
    pad = np.pad(free, 1)
    shell = ~pad & binary_dilation(pad)          # 6-neighbourhood
    obst = np.argwhere(shell).astype(float)
    nodes = pad[1:-1:stride, 1:-1:stride, 1:-1:stride]
    # outside a box dilation of the shell every node is clear
    near = maximum_filter(shell, size=2 * int(math.floor(clearance)) + 1, mode="constant")
    near = near[1:-1:stride, 1:-1:stride, 1:-1:stride]
    out = nodes & ~near
    cand = np.argwhere(nodes & near)
    if len(cand):
        d, _ = cKDTree(obst).query(cand * stride + 1.0, distance_upper_bound=clearance + 1e-9)
        out[tuple(cand.T)] = d > clearance
    return np.ascontiguousarray(out)


class PathPlanner:
    """Deterministic lattice planner with approach-as-close semantics.

    Lattice nodes sit on every ``stride``-th voxel centre. A node is
    traversable when its clearance to the nearest non-free voxel centre
    exceeds R plus half a lattice diagonal, which makes every edge between
    neighbouring traversable nodes pass the map's segment collision check.
    One Dijkstra search from the start serves every candidate of a round.
    """

    def __init__(self, occupancy: OccupancyMap, start, radius: float, stride: int = 2):
        self.occ = occupancy
        self.radius = float(radius)
        self.start = np.asarray(start, dtype=float)
        res = occupancy.resolution
        self.spacing = stride * res
        self.clearance = self.radius + 0.5 * math.sqrt(3.0) * self.spacing
        free = occupancy.free_mask()
        nz = np.nonzero(free.any(axis=(1, 2)))[0], np.nonzero(free.any(axis=(0, 2)))[0], \
            np.nonzero(free.any(axis=(0, 1)))[0]
        if any(len(a) == 0 for a in nz):
            raise PlanningError("map has no free space")
        lo = np.array([a[0] for a in nz])
        lo -= lo % stride
        hi = np.array([a[-1] + 1 for a in nz])
        crop = free[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        self.node_idx0 = lo
        self.stride = stride
        self.trav = clearance_field(crop, stride, self.clearance / res)
        self._start_node = self._connect_start()
        self.dist, self.pred = _dijkstra(self.trav, self._start_node, self.spacing)
        reached = np.flatnonzero(np.isfinite(self.dist))
        self.reached = reached
        self._tree = cKDTree(self.node_centers(reached))

    def node_centers(self, flat) -> np.ndarray:
        ijk = np.stack(np.unravel_index(np.asarray(flat), self.trav.shape), -1)
        vox = self.node_idx0 + ijk * self.stride
        return self.occ.index_to_center(vox)

    def _connect_start(self) -> int:
        """Nearest traversable node joined to the start by a collision-free segment."""
        rel = (self.start - self.occ.index_to_center(self.node_idx0)) / self.spacing
        base = np.rint(rel).astype(int)
        best = None
        for reach in (2, 4, 8):
            rng_ = [np.arange(b - reach, b + reach + 1) for b in base]
            g = np.stack(np.meshgrid(*rng_, indexing="ij"), -1).reshape(-1, 3)
            ok = np.all((g >= 0) & (g < np.array(self.trav.shape)), axis=1)
            g = g[ok]
            g = g[self.trav[g[:, 0], g[:, 1], g[:, 2]]]
            if not len(g):
                continue
            centres = self.occ.index_to_center(self.node_idx0 + g * self.stride)
            d = np.linalg.norm(centres - self.start, axis=1)
            order = np.lexsort((np.ravel_multi_index(g.T, self.trav.shape), d))
            for o in order:
                if self.occ.segment_collision_free(self.start, centres[o], self.radius):
                    return int(np.ravel_multi_index(tuple(g[o]), self.trav.shape))
            if best is None:
                best = int(np.ravel_multi_index(tuple(g[order[0]]), self.trav.shape))
        if best is None:
            raise PlanningError(f"no traversable free space around start {self.start}")
        # start pose itself is cramped (noise speckle); fly out along the shortest link
        return best

    def plan_to(self, target) -> np.ndarray:
        """Path from the start to the reachable node closest to ``target``."""
        _, k = self._tree.query(np.asarray(target, dtype=float))
        node = int(self.reached[k])
        chain = []
        while node >= 0:
            chain.append(node)
            node = int(self.pred[node])
        chain.reverse()
        pts = self.node_centers(np.array(chain))
        if np.linalg.norm(pts[0] - self.start) > 1e-9:
            pts = np.vstack([self.start, pts])
        return self.shortcut(pts)

    def shortcut(self, pts, look_ahead: int = 64) -> np.ndarray:
        """Greedy line-of-sight smoothing; keeps every segment collision-free."""
        if len(pts) <= 2:
            return pts
        out = [pts[0]]
        i = 0
        n = len(pts)
        while i < n - 1:
            nxt = i + 1
            for j in range(min(n - 1, i + look_ahead), i + 1, -1):
                if self.occ.segment_collision_free(pts[i], pts[j], self.radius):
                    nxt = j
                    break
            out.append(pts[nxt])
            i = nxt
        return np.array(out)


def plan_to(occupancy: OccupancyMap, start, sample_point, radius: float, stride: int = 2):
    return PathPlanner(occupancy, start, radius, stride).plan_to(sample_point)


def path_length(path) -> float:
    p = np.asarray(path, dtype=float).reshape(-1, 3)
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0


# ---------------------------------------------------------------------------
# gains


def distance_gain(d_node, d_exp, d_des, d_max):
    """Reward for observing a surface closer than before and closer than desired."""
    d_node = np.asarray(d_node, dtype=float)
    d_exp = np.asarray(d_exp, dtype=float)
    g = (d_node - np.maximum(d_exp, d_des)) / d_max
    out = np.where((d_node <= d_des) | (d_node <= d_exp), 0.0, g)
    return float(out) if out.ndim == 0 else out


def gain_images(occupancy: OccupancyMap, objects, position, cfg: PlannerConfig,
                cam: CameraModel, pano: PanoramaModel, need=(True, True, True)):
    """Entropy, background-distance and object-distance panoramas at ``position``.

    Components whose ``need`` flag is False are returned as zeros.
    """
    pos = np.asarray(position, dtype=float)
    dirs = pano.directions().reshape(-1, 3)
    shape = (pano.height, pano.width)
    g_ent = np.zeros(shape)
    g_bg = np.zeros(shape)
    g_obj = np.zeros(shape)
    if need[0]:
        g_ent = occupancy.raycast_entropy(pos, dirs, cam).reshape(shape)
    if need[1]:
        idx, _, obs = occupancy.raycast_first_hit(pos, dirs, cam.d_max)
        hit = idx >= 0
        d_exp = np.full(len(dirs), np.inf)
        d_exp[hit] = np.linalg.norm(occupancy.flat_to_center(idx[hit]) - pos, axis=1)
        g = np.zeros(len(dirs))
        # leaves never seen by the sensor count as seen from the range limit
        g[hit] = distance_gain(np.minimum(obs[hit], cam.d_max), d_exp[hit], cfg.d_bg, cam.d_max)
        g_bg = g.reshape(shape)
    if need[2] and objects is not None and len(objects):
        ids, t, obs = objects.raycast(pos, dirs, cam.d_max, occupancy)
        hit = ids >= 0
        g = np.zeros(len(dirs))
        g[hit] = distance_gain(np.minimum(obs[hit], cam.d_max), t[hit], cfg.d_obj, cam.d_max)
        g_obj = g.reshape(shape)
    return g_ent, g_bg, g_obj


def combine_gains(g_ent, g_bg, g_obj, history_mask, alpha) -> np.ndarray:
    imgs = [np.asarray(x, dtype=float) for x in (g_ent, g_bg, g_obj)]
    mask = np.asarray(history_mask, dtype=float)
    if any(im.shape != mask.shape for im in imgs):
        raise ValueError("gain images and history mask must share dimensions")
    a = alpha
    g = (a[0] * imgs[0] + a[1] * imgs[1] + a[2] * imgs[2]) * mask
    return np.minimum(g, 1.0)


def window_width(hfov: float, pano_width: int) -> int:
    return max(1, min(pano_width, int(round(hfov / (2.0 * math.pi / pano_width)))))


def best_yaw(gain, hfov: float):
    """Best cyclic window over columns: (yaw of window centre, mean gain in window)."""
    gain = np.asarray(gain, dtype=float)
    h, w = gain.shape
    width = window_width(hfov, w)
    cols = gain.sum(axis=0)
    ext = np.concatenate([cols, cols[:width - 1]])
    sums = np.array([ext[k:k + width].sum() for k in range(w)])
    k = int(np.argmax(sums))
    step = 2.0 * math.pi / w
    psi = float(wrap_angle(-math.pi + (k + (width - 1) / 2.0) * step))
    return psi, float(sums[k] / (width * h))


def estimate_time(path, current_yaw: float, goal_yaw: float, cfg: PlannerConfig) -> float:
    turn = abs(float(wrap_angle(goal_yaw - current_yaw)))
    return path_length(path) / cfg.v_max + turn / cfg.w_max


def select_goal(candidates, time_floor: float = 0.1):
    """Index of the highest-utility candidate, or None if no candidate has gain."""
    best, best_u = None, -1.0
    for i, c in enumerate(candidates):
        c.utility = c.g / max(c.t, time_floor)
        if c.g > 0 and c.utility > best_u:
            best, best_u = i, c.utility
    return best


def assign_path_yaws(path, current_yaw: float, goal_yaw: float, yaw_at) -> np.ndarray:
    """Per-vertex yaws: current at the start, goal at the end, best local yaw between.

    ``yaw_at(position)`` returns the best yaw of the combined gain at a vertex.
    """
    path = np.asarray(path, dtype=float).reshape(-1, 3)
    if len(path) == 1:
        return np.array([goal_yaw])
    yaws = np.empty(len(path))
    yaws[0] = current_yaw
    yaws[-1] = goal_yaw
    for i in range(1, len(path) - 1):
        yaws[i] = yaw_at(path[i])
    return yaws


def exploration_complete(frontier_count: int, occupancy: OccupancyMap, objects,
                         last_best_gain, cfg: PlannerConfig, n_integrations: int = 1) -> bool:
    """Coverage-complete test with the low-gain fallback for unobservable residue."""
    if n_integrations <= 0:
        return False
    if last_best_gain is not None and last_best_gain < cfg.eps_gain:
        return True
    if frontier_count > 0:
        return False
    # distance conditions only apply to gains the planner actually optimises
    if cfg.alpha[1] > 0:
        occ = occupancy.occupied_mask()
        if np.any(occupancy.min_obs_dist[occ] > cfg.d_bg):
            return False
    if objects is not None and cfg.alpha[2] > 0:
        _, _, obs = objects.surface_points()
        if np.any(obs > cfg.d_obj):
            return False
    return True


# ---------------------------------------------------------------------------
# planning round


@dataclass
class RoundResult:
    candidates: list[Candidate]
    goal: int | None
    path: np.ndarray | None = None
    yaws: np.ndarray | None = None
    best_gain: float = 0.0

    @property
    def goal_candidate(self) -> Candidate | None:
        return None if self.goal is None else self.candidates[self.goal]


class Planner:
    def __init__(self, cfg: PlannerConfig, cam: CameraModel, pano: PanoramaModel):
        self.cfg = cfg
        self.cam = cam
        self.pano = pano
        self.rng = np.random.default_rng(cfg.seed)

    def _need(self):
        return tuple(a > 0 for a in self.cfg.alpha)

    def combined_gain(self, occupancy, objects, history, position):
        imgs = gain_images(occupancy, objects, position, self.cfg, self.cam, self.pano,
                           self._need())
        return imgs, combine_gains(*imgs, history.history_mask(position), self.cfg.alpha)

    def plan_round(self, occupancy: OccupancyMap, objects, history, position, yaw) -> RoundResult:
        cfg = self.cfg
        f_pts = occupancy.flat_to_center(occupancy.frontiers())
        o_pts = []
        if objects is not None and cfg.p_frontier < 1.0:
            for sm in objects:
                o_pts.append(sm.voxel_centers(sm.surface_voxels()))
        samples = sample_candidates(f_pts, o_pts, cfg.n_candidates, cfg.p_frontier, self.rng)
        if not samples:
            return RoundResult([], None)
        pp = PathPlanner(occupancy, position, cfg.radius, cfg.lattice_stride)
        cands = []
        for pt, src in samples:
            path = pp.plan_to(pt)
            c = Candidate(np.asarray(pt), path[-1].copy(), path, src)
            (c.gain_ent, c.gain_bg, c.gain_obj), c.gain = self.combined_gain(
                occupancy, objects, history, c.eval_position)
            c.yaw, c.g = best_yaw(c.gain, self.cam.hfov)
            c.t = estimate_time(path, yaw, c.yaw, cfg)
            cands.append(c)
        goal = select_goal(cands, cfg.time_floor)
        best_gain = max(c.g for c in cands)
        if goal is None:
            return RoundResult(cands, None, best_gain=best_gain)
        gc = cands[goal]

        def yaw_at(p):
            return best_yaw(self.combined_gain(occupancy, objects, history, p)[1],
                            self.cam.hfov)[0]

        yaws = assign_path_yaws(gc.path, yaw, gc.yaw, yaw_at)
        return RoundResult(cands, goal, gc.path, yaws, best_gain)

    def trace_record(self, round_idx: int, sim_time: float, result: RoundResult,
                     position, yaw) -> str:
        rec = {"round": round_idx, "sim_time": round(sim_time, 6), "position": _r(position),
               "yaw": round(float(yaw), 6), "p_frontier": self.cfg.p_frontier,
               "alpha": list(self.cfg.alpha), "goal": result.goal,
               "best_gain": round(result.best_gain, 9),
               "candidates": [c.record() for c in result.candidates]}
        if result.path is not None:
            rec["path"] = [_r(p) for p in result.path]
            rec["yaws"] = [round(float(y), 6) for y in result.yaws]
        return json.dumps(rec, sort_keys=True)
