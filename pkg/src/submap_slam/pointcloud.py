"""Point-cloud container, kd-tree queries, normals, downsampling, mesh sampling, PLY I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    valid_normals: Optional[np.ndarray] = None  # bool mask; None means all valid

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.positions):
                raise ValueError("normals length mismatch")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ValueError("colors length mismatch")
        if self.valid_normals is not None:
            self.valid_normals = np.asarray(self.valid_normals, dtype=bool).reshape(-1)

    def __len__(self):
        return len(self.positions)

    def transformed(self, pose) -> "PointCloud":
        normals = pose.rotate(self.normals) if self.normals is not None else None
        return PointCloud(pose.apply(self.positions), normals, self.colors,
                          None if self.valid_normals is None else self.valid_normals.copy())

    def select(self, idx) -> "PointCloud":
        return PointCloud(
            self.positions[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
            None if self.valid_normals is None else self.valid_normals[idx],
        )


class SpatialIndex:
    """Read-only kd-tree over one cloud's positions."""

    def __init__(self, cloud_or_points):
        pts = cloud_or_points.positions if isinstance(cloud_or_points, PointCloud) else cloud_or_points
        self._pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self._pts) if len(self._pts) else None

    def __len__(self):
        return len(self._pts)

    def radius(self, query, r):
        if self._tree is None:
            return []
        return self._tree.query_ball_point(np.asarray(query, dtype=np.float64), r)

    def knn(self, query, k):
        if self._tree is None:
            return np.zeros((0,), dtype=float), np.zeros((0,), dtype=int)
        d, i = self._tree.query(np.asarray(query, dtype=np.float64), k=min(k, len(self._pts)))
        return d, i

    def nearest(self, queries):
        """Distances and indices of the single nearest neighbor per query row."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return np.full(len(q), np.inf), np.full(len(q), -1, dtype=int)
        return self._tree.query(q, k=1)


def estimate_normals(cloud: PointCloud, radius: float, min_neighbors: int = 3,
                     viewpoint=None) -> PointCloud:
    """Covariance-eigenvector normals from radius neighborhoods.

    Points with fewer than ``min_neighbors`` neighbors get a zero normal and
    are flagged invalid. When ``viewpoint`` is given, normals are flipped to
    point toward it.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(cloud)
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return PointCloud(cloud.positions, normals, cloud.colors, valid)
    tree = cKDTree(cloud.positions)
    neighborhoods = tree.query_ball_point(cloud.positions, radius)
    for i, nbrs in enumerate(neighborhoods):
        if len(nbrs) < max(min_neighbors, 3):
            continue
        pts = cloud.positions[nbrs]
        cov = np.cov(pts.T)
        w, v = np.linalg.eigh(cov)
        normal = v[:, 0]
        nrm = np.linalg.norm(normal)
        if nrm == 0 or not np.isfinite(nrm):
            continue
        normals[i] = normal / nrm
        valid[i] = True
    if viewpoint is not None:
        to_vp = np.asarray(viewpoint, dtype=float) - cloud.positions
        flip = np.sum(normals * to_vp, axis=1) < 0
        normals[flip] *= -1
    return PointCloud(cloud.positions, normals, cloud.colors, valid)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel at the centroid; attributes averaged."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    m = counts.shape[0]

    def average(values):
        out = np.zeros((m, 3))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    positions = average(cloud.positions)
    normals = None
    valid = None
    if cloud.normals is not None:
        normals = average(cloud.normals)
        lengths = np.linalg.norm(normals, axis=1)
        valid = lengths > 1e-12
        normals[valid] /= lengths[valid, None]
    colors = average(cloud.colors) if cloud.colors is not None else None
    return PointCloud(positions, normals, colors, valid)


def sample_mesh_uniform(mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-proportional surface sampling with inherited face normals."""
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    v = mesh.vertices
    tri = v[mesh.triangles]  # (T, 3, 3)
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    a, b, c = tri[face_idx, 0], tri[face_idx, 1], tri[face_idx, 2]
    pts = a + u[:, None] * (b - a) + w[:, None] * (c - a)
    return PointCloud(pts, mesh.face_normals[face_idx])


# ---------------------------------------------------------------------------
# PLY I/O

def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    if cloud.normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
    if cloud.colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n" + "\n".join(props) + "\nend_header\n"
    )
    pos = cloud.positions.astype("<f4")
    nrm = cloud.normals.astype("<f4") if cloud.normals is not None else None
    col = (np.clip(cloud.colors, 0, 1) * 255 + 0.5).astype(np.uint8) if cloud.colors is not None else None
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            cols = [pos]
            if nrm is not None:
                cols.append(nrm)
            rec = np.concatenate(cols, axis=1).view("<f4")
            if col is not None:
                raw = np.empty(n, dtype=[("f", "<f4", rec.shape[1]), ("c", "u1", 3)])
                raw["f"], raw["c"] = rec, col
                f.write(raw.tobytes())
            else:
                f.write(rec.tobytes())
        else:
            for i in range(n):
                row = list(pos[i])
                if nrm is not None:
                    row += list(nrm[i])
                line = " ".join(f"{v:.6g}" for v in row)
                if col is not None:
                    line += " " + " ".join(str(int(v)) for v in col[i])
                f.write((line + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    body = data[end:]
    fmt = None
    count = 0
    names = []
    types = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property":
            types.append(parts[1])
            names.append(parts[2])
    type_map = {"float": "<f4", "float32": "<f4", "double": "<f8",
                "uchar": "u1", "uint8": "u1"}
    if fmt == "ascii":
        rows = [body.decode("ascii").splitlines()[i].split() for i in range(count)]
        table = {name: np.array([float(r[j]) for r in rows]) for j, name in enumerate(names)}
    else:
        dtype = np.dtype([(nm, type_map[tp]) for nm, tp in zip(names, types)])
        arr = np.frombuffer(body[: dtype.itemsize * count], dtype=dtype)
        table = {nm: arr[nm].astype(np.float64) for nm in names}
    positions = np.stack([table["x"], table["y"], table["z"]], axis=1)
    normals = None
    if "nx" in table:
        normals = np.stack([table["nx"], table["ny"], table["nz"]], axis=1)
    colors = None
    if "red" in table:
        colors = np.stack([table["red"], table["green"], table["blue"]], axis=1) / 255.0
    return PointCloud(positions, normals, colors)
