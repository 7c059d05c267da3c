"""Synthetic RGB-D world: labelled boxes/meshes, rendering, depth noise, MAV kinematics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from numba import njit

from .geometry import CameraModel, RigidTransform, wrap_angle

SCENE_SCHEMA_VERSION = 1
BACKGROUND = None


@dataclass
class Box:
    """Solid box: centre, half extents and yaw about +z."""

    center: np.ndarray
    half: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.half = np.asarray(self.half, float)
        self.yaw = float(self.yaw)

    @classmethod
    def from_min_max(cls, lo, hi, yaw: float = 0.0) -> "Box":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls((lo + hi) / 2.0, (hi - lo) / 2.0, yaw)

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        local = self.to_local(pts)
        return np.all(np.abs(local) <= self.half + tol, axis=-1)

    def to_local(self, pts) -> np.ndarray:
        p = np.asarray(pts, float) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1], p[..., 2]], -1)

    def to_world(self, local) -> np.ndarray:
        q = np.asarray(local, float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * q[..., 0] - s * q[..., 1], s * q[..., 0] + c * q[..., 1], q[..., 2]], -1) \
            + self.center

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.half))

    def surface_samples(self, spacing: float) -> np.ndarray:
        pts = []
        for ax in range(3):
            u, v = [a for a in range(3) if a != ax]
            nu = max(1, int(math.ceil(2 * self.half[u] / spacing)))
            nv = max(1, int(math.ceil(2 * self.half[v] / spacing)))
            gu = (np.arange(nu) + 0.5) / nu * 2 * self.half[u] - self.half[u]
            gv = (np.arange(nv) + 0.5) / nv * 2 * self.half[v] - self.half[v]
            uu, vv = np.meshgrid(gu, gv, indexing="ij")
            for sign in (-1.0, 1.0):
                q = np.zeros((uu.size, 3))
                q[:, u] = uu.ravel()
                q[:, v] = vv.ravel()
                q[:, ax] = sign * self.half[ax]
                pts.append(q)
        return self.to_world(np.concatenate(pts))


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def triangles(self) -> np.ndarray:
        return np.asarray(self.vertices, float)[np.asarray(self.faces, int)]

    def surface_samples(self, spacing: float) -> np.ndarray:
        out = []
        for a, b, c in self.triangles():
            n = max(1, int(math.ceil(max(np.linalg.norm(b - a), np.linalg.norm(c - a)) / spacing)))
            ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
            keep = ii + jj <= n
            s, t = ii[keep] / n, jj[keep] / n
            out.append(a + s[:, None] * (b - a) + t[:, None] * (c - a))
        return np.concatenate(out) if out else np.empty((0, 3))


@dataclass
class Instance:
    id: int
    cls: str | None
    colour: tuple[int, int, int]
    boxes: list[Box] = field(default_factory=list)
    meshes: list[Mesh] = field(default_factory=list)
    unmeasurable: bool = False
    name: str = ""

    @property
    def is_object(self) -> bool:
        return self.cls is not None


@dataclass
class Scene:
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    instances: list[Instance]
    start_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_yaw: float = 0.0

    def __post_init__(self):
        ids = [inst.id for inst in self.instances]
        if len(ids) != len(set(ids)):
            raise ValueError("instance ids must be unique")
        self.bounds_min = np.asarray(self.bounds_min, float)
        self.bounds_max = np.asarray(self.bounds_max, float)
        self.start_position = np.asarray(self.start_position, float)
        self._packed = None

    @property
    def objects(self) -> list[Instance]:
        return [inst for inst in self.instances if inst.is_object]

    def instance(self, iid: int) -> Instance:
        for inst in self.instances:
            if inst.id == iid:
                return inst
        raise KeyError(iid)

    def all_boxes(self) -> list[Box]:
        return [b for inst in self.instances for b in inst.boxes]

    def inside_solid(self, pts, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, float)
        inside = np.zeros(pts.shape[:-1], dtype=bool)
        for b in self.all_boxes():
            inside |= b.contains(pts, tol)
        return inside

    def without(self, predicate) -> "Scene":
        return replace(self, instances=[i for i in self.instances if not predicate(i)])

    def packed(self):
        """Flat arrays for the render kernel."""
        if self._packed is None:
            centers, halves, rots, box_inst = [], [], [], []
            tris, tri_inst = [], []
            inst_ids, inst_cols, inst_unmeas = [], [], []
            for n, inst in enumerate(self.instances):
                inst_ids.append(inst.id)
                inst_cols.append(inst.colour)
                inst_unmeas.append(inst.unmeasurable)
                for b in inst.boxes:
                    centers.append(b.center)
                    halves.append(b.half)
                    rots.append((math.cos(b.yaw), math.sin(b.yaw)))
                    box_inst.append(n)
                for m in inst.meshes:
                    t = m.triangles()
                    tris.append(t)
                    tri_inst.extend([n] * len(t))
            self._packed = (
                np.array(centers, float).reshape(-1, 3), np.array(halves, float).reshape(-1, 3),
                np.array(rots, float).reshape(-1, 2), np.array(box_inst, np.int64),
                np.concatenate(tris).reshape(-1, 3, 3) if tris else np.zeros((0, 3, 3)),
                np.array(tri_inst, np.int64), np.array(inst_ids, np.int64),
                np.array(inst_cols, np.float64).reshape(-1, 3), np.array(inst_unmeas, np.bool_))
        return self._packed


# ---------------------------------------------------------------------------
# scene files


def _box_from_spec(spec: dict, pose: RigidTransform | None, pose_yaw: float) -> Box:
    if "min" in spec:
        box = Box.from_min_max(spec["min"], spec["max"], float(spec.get("yaw", 0.0)))
    else:
        box = Box(np.asarray(spec["center"], float), np.asarray(spec["size"], float) / 2.0,
                  float(spec.get("yaw", 0.0)))
    if pose is not None:
        box = Box(pose.apply(box.center), box.half, box.yaw + pose_yaw)
    return box


def _load_obj(path: Path) -> Mesh:
    verts, faces = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts), np.array(faces))


def _mesh_from_spec(spec: dict, base: Path) -> Mesh:
    if "path" in spec:
        return _load_obj(base / spec["path"])
    return Mesh(np.asarray(spec["vertices"], float), np.asarray(spec["faces"], int))


def scene_from_dict(data: dict, base: Path | None = None) -> Scene:
    version = int(data.get("version", 0))
    if version != SCENE_SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema version {version}")
    base = Path(base or ".")
    instances = []
    next_id = 1
    for group, cls_key in (("background", False), ("objects", True), ("unmeasurable", False)):
        for spec in data.get(group, []) or []:
            iid = int(spec.get("id", next_id))
            next_id = max(next_id, iid) + 1
            pose = None
            pose_yaw = 0.0
            if "pose" in spec:
                pose_yaw = float(spec["pose"].get("yaw", 0.0))
                from .geometry import yaw_matrix
                pose = RigidTransform(yaw_matrix(pose_yaw), spec["pose"].get("translation", [0, 0, 0]))
            box_specs = spec.get("boxes", []) + ([spec["box"]] if "box" in spec else [])
            mesh_specs = spec.get("meshes", []) + ([spec["mesh"]] if "mesh" in spec else [])
            instances.append(Instance(
                id=iid,
                cls=str(spec["class"]) if cls_key else None,
                colour=tuple(int(c) for c in spec.get("colour", (128, 128, 128))),
                boxes=[_box_from_spec(b, pose, pose_yaw) for b in box_specs],
                meshes=[_mesh_from_spec(m, base) for m in mesh_specs],
                unmeasurable=group == "unmeasurable",
                name=str(spec.get("name", "")),
            ))
    start = data.get("start", {})
    return Scene(np.asarray(data["bounds"]["min"], float), np.asarray(data["bounds"]["max"], float),
                 instances, np.asarray(start.get("position", [0, 0, 0]), float),
                 float(start.get("yaw", 0.0)))


def load_scene(path) -> Scene:
    path = Path(path)
    return scene_from_dict(yaml.safe_load(path.read_text()), path.parent)


# ---------------------------------------------------------------------------
# rendering


@njit(cache=True)
def _render(origin, dirs, centers, halves, rots, box_inst, tris, tri_inst, n_inst,
            d_min, d_max):
    n = dirs.shape[0]
    depth = np.zeros(n)
    inst = np.full(n, -1, dtype=np.int64)
    # per-instance AABB of triangles for early rejection
    lo = np.full((n_inst, 3), np.inf)
    hi = np.full((n_inst, 3), -np.inf)
    for t in range(tris.shape[0]):
        m = tri_inst[t]
        for v in range(3):
            for a in range(3):
                lo[m, a] = min(lo[m, a], tris[t, v, a])
                hi[m, a] = max(hi[m, a], tris[t, v, a])
    for r in range(n):
        best = np.inf
        best_i = -1
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for b in range(centers.shape[0]):
            c, s = rots[b, 0], rots[b, 1]
            ox = origin[0] - centers[b, 0]
            oy = origin[1] - centers[b, 1]
            lox = c * ox + s * oy
            loy = -s * ox + c * oy
            loz = origin[2] - centers[b, 2]
            ldx = c * dx + s * dy
            ldy = -s * dx + c * dy
            ldz = dz
            t0 = -np.inf
            t1 = np.inf
            ok = True
            for a in range(3):
                if a == 0:
                    o_, d_ = lox, ldx
                elif a == 1:
                    o_, d_ = loy, ldy
                else:
                    o_, d_ = loz, ldz
                h = halves[b, a]
                if d_ != 0.0:
                    ta = (-h - o_) / d_
                    tb = (h - o_) / d_
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = max(t0, ta)
                    t1 = min(t1, tb)
                elif o_ < -h or o_ > h:
                    ok = False
                    break
            if not ok or t0 > t1 or t1 <= 0.0:
                continue
            t = t0 if t0 > 0.0 else t1
            if t < best:
                best = t
                best_i = box_inst[b]
        for t in range(tris.shape[0]):
            m = tri_inst[t]
            # slab test against the instance AABB
            t0 = 0.0
            t1 = best
            ok = True
            for a in range(3):
                o_ = origin[a]
                d_ = dirs[r, a]
                if d_ != 0.0:
                    ta = (lo[m, a] - o_) / d_
                    tb = (hi[m, a] - o_) / d_
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = max(t0, ta)
                    t1 = min(t1, tb)
                elif o_ < lo[m, a] or o_ > hi[m, a]:
                    ok = False
            if not ok or t0 > t1:
                continue
            e1 = tris[t, 1] - tris[t, 0]
            e2 = tris[t, 2] - tris[t, 0]
            px = dy * e2[2] - dz * e2[1]
            py = dz * e2[0] - dx * e2[2]
            pz = dx * e2[1] - dy * e2[0]
            det = e1[0] * px + e1[1] * py + e1[2] * pz
            if abs(det) < 1e-12:
                continue
            inv = 1.0 / det
            sx = origin[0] - tris[t, 0, 0]
            sy = origin[1] - tris[t, 0, 1]
            sz = origin[2] - tris[t, 0, 2]
            u = (sx * px + sy * py + sz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = sy * e1[2] - sz * e1[1]
            qy = sz * e1[0] - sx * e1[2]
            qz = sx * e1[1] - sy * e1[0]
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            tt = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
            if tt > 0.0 and tt < best:
                best = tt
                best_i = m
        if best_i >= 0:
            inst[r] = best_i
            if d_min <= best <= d_max:
                depth[r] = best
    return depth, inst


@dataclass
class Frame:
    depth: np.ndarray        # z-depth in metres, 0 where invalid
    colour: np.ndarray       # (H, W, 3) uint8
    instance: np.ndarray     # (H, W) instance id, -1 where nothing was hit

    def masks(self) -> dict[int, np.ndarray]:
        return {int(i): self.instance == i for i in np.unique(self.instance) if i >= 0}


def render(scene: Scene, T_WC: RigidTransform, cam: CameraModel) -> Frame:
    """Ray-trace z-depth, flat colour and exact instance ids."""
    centers, halves, rots, box_inst, tris, tri_inst, ids, cols, unmeas = scene.packed()
    rays = cam.pixel_rays().reshape(-1, 3)
    dirs = np.ascontiguousarray(T_WC.rotate(rays))
    depth, inst = _render(np.asarray(T_WC.translation), dirs, centers, halves, rots, box_inst,
                          tris, tri_inst, len(ids), cam.d_min, cam.d_max)
    hit = inst >= 0
    depth[hit & unmeas[np.maximum(inst, 0)]] = 0.0
    colour = np.zeros((inst.size, 3), dtype=np.uint8)
    colour[hit] = cols[inst[hit]].astype(np.uint8)
    ids_img = np.where(hit, ids[np.maximum(inst, 0)], -1)
    shape = (cam.height, cam.width)
    return Frame(depth.reshape(shape), colour.reshape(shape + (3,)), ids_img.reshape(shape))


# ---------------------------------------------------------------------------
# depth noise


@dataclass(frozen=True)
class NoiseParams:
    sigma_min: float = 0.005
    sigma_max: float = 0.2
    slope: float = 0.002

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max or self.slope < 0:
            raise ValueError("need 0 < sigma_min <= sigma_max and slope >= 0")

    def sigma(self, d):
        return np.maximum(self.sigma_min, np.minimum(self.slope * np.asarray(d, float), self.sigma_max))


def apply_noise(depth, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian noise with distance-dependent sigma on valid pixels."""
    depth = np.asarray(depth, float)
    out = depth.copy()
    valid = np.isfinite(depth) & (depth > 0)
    d = depth[valid]
    out[valid] = d + rng.standard_normal(d.size) * params.sigma(d)
    return out


# ---------------------------------------------------------------------------
# kinematics


@dataclass(frozen=True)
class MavSimState:
    position: np.ndarray
    yaw: float
    progress: float = 0.0  # arc length travelled along the current path


class YawedPath:
    """Polyline with a yaw per vertex."""

    def __init__(self, vertices, yaws):
        self.vertices = np.asarray(vertices, float).reshape(-1, 3)
        self.yaws = np.asarray(yaws, float).reshape(-1)
        if len(self.vertices) == 0:
            raise ValueError("empty path")
        if len(self.yaws) != len(self.vertices):
            raise ValueError("need one yaw per vertex")
        seg = np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)
        self.cumlen = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumlen[-1])

    def at(self, s: float):
        """Position and target yaw at arc length ``s``."""
        s = min(max(s, 0.0), self.length)
        if len(self.vertices) == 1 or s >= self.length:
            return self.vertices[-1].copy(), float(self.yaws[-1])
        k = int(np.searchsorted(self.cumlen, s, side="right") - 1)
        k = min(k, len(self.vertices) - 2)
        seg = self.cumlen[k + 1] - self.cumlen[k]
        f = 0.0 if seg <= 0 else (s - self.cumlen[k]) / seg
        pos = self.vertices[k] + f * (self.vertices[k + 1] - self.vertices[k])
        dyaw = wrap_angle(self.yaws[k + 1] - self.yaws[k])
        return pos, float(wrap_angle(self.yaws[k] + f * dyaw))


def step_along(state: MavSimState, path: YawedPath, dt: float, v_max: float, w_max: float):
    """Advance at most v_max*dt along the path and w_max*dt in yaw.

    Returns (new_state, arrived).
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    s = min(state.progress + v_max * dt, path.length)
    pos, target = path.at(s)
    if s >= path.length:
        target = float(path.yaws[-1])
    dyaw = float(wrap_angle(target - state.yaw))
    max_turn = w_max * dt
    if abs(dyaw) > max_turn:
        dyaw = math.copysign(max_turn, dyaw)
    yaw = float(wrap_angle(state.yaw + dyaw))
    if dt == 0:
        pos, yaw, s = np.asarray(state.position, float), state.yaw, state.progress
    new = MavSimState(pos, yaw, s)
    final_yaw_err = abs(float(wrap_angle(path.yaws[-1] - yaw)))
    arrived = s >= path.length - 1e-12 and final_yaw_err <= 1e-6 \
        and np.linalg.norm(pos - path.vertices[-1]) <= 1e-6
    return new, bool(arrived)
