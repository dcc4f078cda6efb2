"""TSDF fusion of depth frames, marching-cubes extraction, submap surface sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from .geometry import Pose
from .pointcloud import PointCloud, sample_mesh_uniform


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def pixel_rays(self):
        """Unit-depth camera-frame ray directions, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones_like(u, dtype=np.float64)], axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    face_normals: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.face_normals = np.asarray(self.face_normals, dtype=np.float64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if np.isnan(self.vertices).any():
            raise ValueError("NaN vertices")

    def __len__(self):
        return len(self.triangles)

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))


class TsdfVolume:
    """Dense voxel grid of truncated signed distances with fusion weights."""

    def __init__(self, origin, voxel_size: float, dims, truncation: float):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.dims = tuple(int(d) for d in dims)
        self.sdf = np.zeros(self.dims, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)
        # voxel center world coordinates, flattened lazily per integration
        self._centers = None

    @staticmethod
    def from_bounds(lo, hi, voxel_size: float, truncation: float) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64) - 2 * truncation
        hi = np.asarray(hi, dtype=np.float64) + 2 * truncation
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
        return TsdfVolume(lo, voxel_size, dims, truncation)

    def voxel_centers(self) -> np.ndarray:
        if self._centers is None:
            ii, jj, kk = np.meshgrid(*[np.arange(d, dtype=np.float32) for d in self.dims],
                                     indexing="ij")
            idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
            idx += 0.5
            idx *= self.voxel_size
            idx += self.origin.astype(np.float32)
            self._centers = idx
        return self._centers

    def integrate_frame(self, depth: np.ndarray, intrinsics: Intrinsics, pose: Pose) -> None:
        """Weighted-average TSDF update from one depth frame.

        ``pose`` maps camera to world; invalid (non-positive / non-finite)
        depth pixels are skipped. Voxels behind the surface beyond the
        truncation band are left unchanged.
        """
        depth = np.asarray(depth, dtype=np.float32)
        inv = pose.inverse()
        rot = inv.rotation_matrix().astype(np.float32)
        centers = self.voxel_centers()
        pts_cam = centers @ rot.T
        pts_cam += inv.t.astype(np.float32)
        z = pts_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.floor(pts_cam[:, 0] / z * intrinsics.fx + intrinsics.cx + 0.5).astype(np.int32)
            v = np.floor(pts_cam[:, 1] / z * intrinsics.fy + intrinsics.cy + 0.5).astype(np.int32)
        ok = (z > 1e-6) & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
        idx = np.nonzero(ok)[0]
        d = depth[v[idx], u[idx]]
        sdf = d - z[idx]  # positive in front of the surface
        keep = np.isfinite(d) & (d > 0) & (sdf > -self.truncation)
        idx = idx[keep]
        sdf = np.minimum(sdf[keep], self.truncation).astype(np.float64)

        flat_sdf = self.sdf.reshape(-1)
        flat_w = self.weight.reshape(-1)
        w_old = flat_w[idx]
        flat_sdf[idx] = (flat_sdf[idx] * w_old + sdf) / (w_old + 1.0)
        flat_w[idx] = w_old + 1.0

    def extract_mesh(self) -> TriangleMesh:
        """Zero-isosurface via marching cubes, restricted to observed voxels.

        The full grid is marched (unobserved voxels hold sdf 0); triangles
        with any vertex bordering a never-observed voxel are discarded so
        only real crossings between observed voxels survive.
        """
        observed = self.weight > 0
        if not observed.any() or self.sdf[observed].min() > 0 or self.sdf[observed].max() < 0:
            return TriangleMesh.empty()
        try:
            verts, faces, _, _ = marching_cubes(self.sdf, level=0.0,
                                                allow_degenerate=False)
        except (ValueError, RuntimeError):
            return TriangleMesh.empty()
        if len(faces) == 0:
            return TriangleMesh.empty()
        # vertex validity: every voxel of its enclosing cell must be observed
        valid = np.ones(len(verts), dtype=bool)
        lo = np.floor(verts).astype(int)
        hi = np.ceil(verts).astype(int)
        dims = np.asarray(self.dims)
        for corner in range(8):
            pick = np.where([(corner >> a) & 1 for a in range(3)], hi, lo)
            pick = np.clip(pick, 0, dims - 1)
            valid &= observed[pick[:, 0], pick[:, 1], pick[:, 2]]
        keep_face = valid[faces].all(axis=1)
        faces = faces[keep_face]
        if len(faces) == 0:
            return TriangleMesh.empty()
        used = np.unique(faces)
        remap = np.full(len(verts), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        verts = verts[used] * self.voxel_size + self.origin + 0.5 * self.voxel_size
        faces = remap[faces]
        tri = verts[faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(cross, axis=1)
        norms[norms == 0] = 1.0
        return TriangleMesh(verts, faces, cross / norms[:, None])


@dataclass
class FusionParams:
    voxel_size: float = 0.01
    truncation: float = 0.04
    surface_samples: int = 8000
    seed: int = 0
    max_depth: float = 8.0


def _frustum_bounds(depth, intrinsics: Intrinsics, pose: Pose, max_depth):
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0) & (d <= max_depth)
    if not valid.any():
        return None
    rays = intrinsics.pixel_rays()[valid]
    pts = pose.apply(rays * d[valid][:, None])
    return pts.min(axis=0), pts.max(axis=0)


def fuse_submap_surface(frames, intrinsics: Intrinsics, params: FusionParams) -> PointCloud:
    """Integrate (depth, pose) frames into a TSDF and sample the extracted surface.

    Raises ValueError on zero frames or when fusion produces an empty mesh
    (degenerate submap).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for depth, pose in frames:
        bounds = _frustum_bounds(depth, intrinsics, pose, params.max_depth)
        if bounds is None:
            continue
        lo = np.minimum(lo, bounds[0])
        hi = np.maximum(hi, bounds[1])
    if not np.isfinite(lo).all():
        raise ValueError("degenerate submap: no valid depth")
    volume = TsdfVolume.from_bounds(lo, hi, params.voxel_size, params.truncation)
    for depth, pose in frames:
        volume.integrate_frame(depth, intrinsics, pose)
    mesh = volume.extract_mesh()
    if len(mesh) == 0:
        raise ValueError("degenerate submap: empty fused mesh")
    return sample_mesh_uniform(mesh, params.surface_samples, params.seed)
