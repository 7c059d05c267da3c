"""Camera and panorama projection models, rigid transforms and ray helpers.

Frames: the world frame is z-up. The camera frame is x-right, y-down,
z-forward. The MAV body faces +x at zero yaw and the camera is mounted
looking along the body x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# body <- camera: cam z -> body x, cam x -> body -y, cam y -> body -z
_R_BODY_CAM = np.array([[0.0, 0.0, 1.0],
                        [-1.0, 0.0, 0.0],
                        [0.0, -1.0, 0.0]])


def wrap_angle(a):
    """Wrap an angle (or array of angles) into [-pi, pi)."""
    return (a + math.pi) % TWO_PI - math.pi


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping points from a source to a target frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        tr = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T


def camera_pose(position, yaw: float) -> RigidTransform:
    """T_WC for a MAV at ``position`` with heading ``yaw``."""
    return RigidTransform(yaw_matrix(yaw) @ _R_BODY_CAM, position)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole RGB-D camera. Principal point defaults to the image centre."""

    width: int = 320
    height: int = 240
    fx: float = 262.5
    fy: float = 262.5
    cx: float | None = None
    cy: float | None = None
    d_min: float = 0.1
    d_max: float = 10.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan(self.height / (2.0 * self.fy))

    def project(self, p):
        """Pixel coordinate (u, v) of camera-frame point ``p``, or None if out of view."""
        x, y, z = (float(c) for c in p)
        if not z > 0:
            return None
        u = self.fx * x / z + self.cx
        v = self.fy * y / z + self.cy
        if not (0.0 <= u < self.width and 0.0 <= v < self.height):
            return None
        return u, v

    def backproject(self, pixel, depth: float) -> np.ndarray:
        """Camera-frame point at z-depth ``depth`` along the ray through ``pixel``."""
        if not depth > 0:
            raise ValueError(f"depth must be positive, got {depth}")
        u, v = pixel
        return np.array([(u - self.cx) / self.fx * depth,
                         (v - self.cy) / self.fy * depth,
                         depth])

    def pixel_rays(self, stride: int = 1) -> np.ndarray:
        """(H', W', 3) camera-frame rays with unit z through pixel centres.

        Pixel (i, j) has its centre at continuous coordinate (i, j).
        """
        us = np.arange(0, self.width, stride, dtype=float)
        vs = np.arange(0, self.height, stride, dtype=float)
        uu, vv = np.meshgrid(us, vs)
        rays = np.empty(uu.shape + (3,))
        rays[..., 0] = (uu - self.cx) / self.fx
        rays[..., 1] = (vv - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays

    def as_array(self) -> np.ndarray:
        """Intrinsics packed for the numba kernels."""
        return np.array([self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                         self.d_min, self.d_max], dtype=np.float64)


@dataclass(frozen=True)
class PanoramaModel:
    """Low-resolution 360 degree equal-angle panorama.

    Column c looks at azimuth -pi + c*2pi/w, row r at elevation
    (h/2 - r) * span/h, so the centre pixel (w/2, h/2) looks along +x.
    """

    width: int = 36
    height: int = 10
    elevation_span: float = math.radians(79.1)

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.elevation_span <= 0:
            raise ValueError("invalid panorama dimensions")

    @classmethod
    def for_camera(cls, cam: CameraModel, width: int = 36, height: int = 10,
                   margin: float = math.radians(15.0)) -> "PanoramaModel":
        return cls(width, height, 2.0 * (cam.vfov / 2.0 + margin))

    @property
    def azimuth_step(self) -> float:
        return TWO_PI / self.width

    @property
    def elevation_step(self) -> float:
        return self.elevation_span / self.height

    def column_azimuth(self, col):
        return -math.pi + np.asarray(col, dtype=float) * self.azimuth_step

    def row_elevation(self, row):
        return (self.height / 2.0 - np.asarray(row, dtype=float)) * self.elevation_step

    def direction(self, col: int, row: int) -> np.ndarray:
        if not (0 <= col < self.width and 0 <= row < self.height):
            raise ValueError(f"panorama pixel ({col}, {row}) out of range")
        az = float(self.column_azimuth(col))
        el = float(self.row_elevation(row))
        return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])

    def directions(self) -> np.ndarray:
        """(h, w, 3) unit ray directions, row-major like an image."""
        az = self.column_azimuth(np.arange(self.width))[None, :]
        el = self.row_elevation(np.arange(self.height))[:, None]
        out = np.empty((self.height, self.width, 3))
        out[..., 0] = np.cos(el) * np.cos(az)
        out[..., 1] = np.cos(el) * np.sin(az)
        out[..., 2] = np.sin(el) * np.ones_like(az)
        return out

    def project(self, dirs):
        """Nearest (col, row) for each direction; row is -1 outside the elevation span.

        Accepts a single 3-vector (returns a tuple or None) or an (N, 3) array
        (returns two int arrays).
        """
        d = np.asarray(dirs, dtype=float)
        single = d.ndim == 1
        d = d.reshape(-1, 3)
        az = np.arctan2(d[:, 1], d[:, 0])
        el = np.arctan2(d[:, 2], np.hypot(d[:, 0], d[:, 1]))
        col = np.floor((az + math.pi) / self.azimuth_step + 0.5).astype(np.int64) % self.width
        row = np.floor(self.height / 2.0 - el / self.elevation_step + 0.5).astype(np.int64)
        row[(row < 0) | (row >= self.height)] = -1
        if single:
            return None if row[0] < 0 else (int(col[0]), int(row[0]))
        return col, row
