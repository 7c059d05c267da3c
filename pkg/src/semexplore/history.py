"""History of invalid depth directions on a coarse grid of panoramic images."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from .geometry import CameraModel, PanoramaModel, RigidTransform

log = logging.getLogger(__name__)


class HistoryGrid:
    """Coarse 3D grid over the volume; every cell holds a w x h binary panorama.

    Pixels start at 1 and are set to 0 once invalid depth has been seen in
    that direction from inside the cell. With ``extend_edges`` an invalid pixel
    on the top or bottom image row also zeroes the panorama rows beyond it in
    the same column, since a level camera can never look there.
    """

    def __init__(self, bounds_min, bounds_max, panorama: PanoramaModel,
                 cell_size: float = 0.5, dilate: bool = False, extend_edges: bool = True):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.bounds_min = np.asarray(bounds_min, dtype=float)
        self.bounds_max = np.asarray(bounds_max, dtype=float)
        self.panorama = panorama
        self.cell_size = float(cell_size)
        self.dilate = dilate
        self.extend_edges = extend_edges
        ext = self.bounds_max - self.bounds_min
        self.dims = tuple(max(1, int(math.ceil(e / cell_size - 1e-9))) for e in ext)
        self.images = np.ones(self.dims + (panorama.height, panorama.width), dtype=np.uint8)
        self.warnings = 0

    def cell_of(self, position):
        p = np.asarray(position, dtype=float)
        if np.any(p < self.bounds_min) or np.any(p >= self.bounds_max):
            return None
        idx = np.floor((p - self.bounds_min) / self.cell_size).astype(int)
        return tuple(int(min(i, d - 1)) for i, d in zip(idx, self.dims))

    def record_invalid(self, depth, T_WC: RigidTransform, cam: CameraModel) -> int:
        """Zero the panorama pixels hit by the rays of invalid depth pixels.

        Returns the number of pixels newly zeroed in the camera's cell.
        """
        depth = np.asarray(depth, dtype=float)
        cell = self.cell_of(T_WC.translation)
        if cell is None:
            self.warnings += 1
            log.warning("camera at %s outside history grid; frame ignored", T_WC.translation)
            return 0
        with np.errstate(invalid="ignore"):
            invalid = ~(np.isfinite(depth) & (depth >= cam.d_min) & (depth <= cam.d_max))
        if not invalid.any():
            return 0
        rays = cam.pixel_rays()[invalid]
        dirs = T_WC.rotate(rays)
        col, row = self.panorama.project(dirs)
        keep = row >= 0
        hit = np.zeros((self.panorama.height, self.panorama.width), dtype=bool)
        hit[row[keep], col[keep]] = True
        if self.extend_edges and T_WC.rotate([0.0, -1.0, 0.0])[2] > 0.9:
            rays_all = cam.pixel_rays()
            for v, outward in ((0, -1), (-1, 1)):
                edge = invalid[v]
                if not edge.any():
                    continue
                c, r = self.panorama.project(T_WC.rotate(rays_all[v][edge]))
                for ci, ri in set(zip(c[r >= 0].tolist(), r[r >= 0].tolist())):
                    if outward < 0:
                        hit[:ri, ci] = True
                    else:
                        hit[ri + 1:, ci] = True
        if self.dilate:
            grown = hit.copy()
            grown |= np.roll(hit, 1, axis=1) | np.roll(hit, -1, axis=1)
            grown[1:] |= hit[:-1]
            grown[:-1] |= hit[1:]
            hit = grown
        img = self.images[cell]
        newly = int(np.count_nonzero(hit & (img == 1)))
        img[hit] = 0
        return newly

    def history_mask(self, position) -> np.ndarray:
        """Copy of the panorama of the cell containing ``position`` (all ones outside V)."""
        cell = self.cell_of(position)
        if cell is None:
            self.warnings += 1
            log.warning("history query at %s outside grid; returning all ones", position)
            return np.ones((self.panorama.height, self.panorama.width), dtype=np.uint8)
        return self.images[cell].copy()

    def dump_pgm(self, directory) -> list[Path]:
        """Write every cell that has zeroed pixels as a binary PGM image."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for idx in zip(*np.nonzero((self.images == 0).any(axis=(-1, -2)))):
            img = (self.images[idx] * 255).astype(np.uint8)
            path = directory / ("history_%d_%d_%d.pgm" % idx)
            h, w = img.shape
            path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
            out.append(path)
        return out


class NullHistory:
    """Stand-in used when the history mechanism is disabled: never masks anything."""

    def __init__(self, panorama: PanoramaModel):
        self.panorama = panorama

    def record_invalid(self, depth, T_WC, cam) -> int:
        return 0

    def history_mask(self, position) -> np.ndarray:
        return np.ones((self.panorama.height, self.panorama.width), dtype=np.uint8)

    def dump_pgm(self, directory) -> list[Path]:
        return []
