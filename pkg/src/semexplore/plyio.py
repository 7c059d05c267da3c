"""Minimal binary PLY writer/reader for coloured point clouds and triangle meshes."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ply(path, vertices, colours=None, faces=None) -> Path:
    path = Path(path)
    v = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    f = None if faces is None else np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    if colours is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if f is not None:
        header += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    rec = np.zeros(len(v), dtype=fields)
    rec["x"], rec["y"], rec["z"] = v[:, 0], v[:, 1], v[:, 2]
    if colours is not None:
        c = np.asarray(colours, dtype=np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = c[:, 0], c[:, 1], c[:, 2]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
        if f is not None:
            frec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            frec["n"] = 3
            frec["i"] = f
            fh.write(frec.tobytes())
    return path


def read_ply(path):
    """Read back a file produced by write_ply: (vertices, colours or None, faces or None)."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    n_v = n_f = 0
    has_col = False
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        elif parts[:3] == ["property", "uchar", "red"]:
            has_col = True
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_col:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.frombuffer(data, dtype=fields, count=n_v, offset=end)
    verts = np.stack([rec["x"], rec["y"], rec["z"]], -1).astype(float)
    cols = np.stack([rec["red"], rec["green"], rec["blue"]], -1) if has_col else None
    faces = None
    if n_f:
        frec = np.frombuffer(data, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=n_f,
                             offset=end + rec.nbytes)
        faces = frec["i"].astype(np.int64)
    return verts, cols, faces
