"""Point-based submaps: projective init, data-driven growth, correction, fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose
from .fusion import Intrinsics

FEATURE_DIM = 32


@dataclass
class SubmapParams:
    rho_min: float = 0.02
    rho_max: float = 0.08
    gradient_percentile: float = 95.0
    depth_gate: float = 1.1  # occlusion gate on projective init
    samples_uniform: int = 1500
    samples_gradient: int = 500


@dataclass
class Submap:
    id: int
    keyframe_id: int
    keyframe_pose: Pose
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    feat_geo: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    feat_col: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frame_ids: list = field(default_factory=list)
    frame_poses: dict = field(default_factory=dict)   # frame id -> Pose
    links: dict = field(default_factory=dict)         # local index -> (prev submap id, prev index)
    local_keyframe_ids: list = field(default_factory=list)
    surface = None  # fused surface cloud, set at completion

    def __len__(self):
        return len(self.positions)


def _project(points_world, pose: Pose, intr: Intrinsics):
    """World points -> (u, v, z) in the camera of ``pose`` (world-from-camera)."""
    cam = pose.inverse().apply(points_world)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam[:, 0] / z * intr.fx + intr.cx
        v = cam[:, 1] / z * intr.fy + intr.cy
    return u, v, z


def create_submap(submap_id: int, keyframe_id: int, keyframe_pose: Pose,
                  depth: np.ndarray, intr: Intrinsics,
                  prev: Submap | None, params: SubmapParams) -> Submap:
    """New submap seeded by projecting the previous submap's visible points.

    A previous point is copied when it projects in-bounds with positive depth
    and is not occluded (its depth within ``depth_gate`` times the observed
    depth at that pixel). Copied points record a correspondence link.
    """
    sm = Submap(submap_id, keyframe_id, keyframe_pose)
    if prev is None or len(prev) == 0:
        return sm
    u, v, z = _project(prev.positions, keyframe_pose, intr)
    ui = np.rint(u).astype(int)
    vi = np.rint(v).astype(int)
    ok = (z > 1e-6) & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    d = np.zeros_like(z)
    d[ok] = np.asarray(depth, dtype=np.float64)[vi[ok], ui[ok]]
    ok &= (d > 0) & (z <= params.depth_gate * d)
    idx = np.nonzero(ok)[0]
    sm.positions = prev.positions[idx].copy()
    sm.feat_geo = prev.feat_geo[idx].copy()
    sm.feat_col = prev.feat_col[idx].copy()
    sm.radii = prev.radii[idx].copy()
    sm.links = {local: (prev.id, int(src)) for local, src in enumerate(idx)}
    return sm


def _depth_normals(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Per-pixel camera-frame normals from central differences on back-projections."""
    h, w = depth.shape
    rays = intr.pixel_rays()
    pts = rays * depth[..., None]
    dx = np.zeros_like(pts)
    dy = np.zeros_like(pts)
    dx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    dy[1:-1, :] = pts[2:, :] - pts[:-2, :]
    n = np.cross(dy.reshape(-1, 3), dx.reshape(-1, 3)).reshape(h, w, 3)
    norms = np.linalg.norm(n, axis=-1)
    norms[norms == 0] = 1.0
    n = n / norms[..., None]
    # orient toward the camera (origin): flip where n.p > 0
    flip = np.sum(n * pts, axis=-1) > 0
    n[flip] *= -1
    return n


def _image_gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(gray, dtype=np.float64))
    return np.hypot(gx, gy)


def add_points(submap: Submap, depth: np.ndarray, gray: np.ndarray,
               color: np.ndarray | None, pose: Pose, intr: Intrinsics,
               params: SubmapParams, seed: int = 0) -> int:
    """Grow the submap from one frame; returns the number of points added.

    Pixels are drawn uniformly plus biased toward high image gradient; each
    back-projected candidate is accepted only if no existing point lies
    within its dynamic radius rho (high gradient -> small rho).
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    flat_valid = np.nonzero(valid.reshape(-1))[0]
    if len(flat_valid) == 0:
        return 0
    rng = np.random.default_rng(seed)
    grad = _image_gradient_magnitude(gray).reshape(-1)
    uniform = rng.choice(flat_valid, size=min(params.samples_uniform, len(flat_valid)),
                         replace=False)
    order = flat_valid[np.argsort(-grad[flat_valid])]
    top = order[: params.samples_gradient]
    chosen = np.unique(np.concatenate([uniform, top]))

    h, w = depth.shape
    vs, us = np.divmod(chosen, w)
    rays = intr.pixel_rays()[vs, us]
    pts_world = pose.apply(rays * depth[vs, us][:, None])
    normals_world = pose.rotate(_depth_normals(depth, intr)[vs, us])

    scale = np.percentile(grad[flat_valid], params.gradient_percentile)
    gnorm = np.clip(grad[chosen] / max(scale, 1e-12), 0.0, 1.0)
    rho = params.rho_max + (params.rho_min - params.rho_max) * gnorm

    rgb = None
    if color is not None:
        c = np.asarray(color, dtype=np.float64)
        if c.max() > 1.0:
            c = c / 255.0
        rgb = c[vs, us]

    existing = cKDTree(submap.positions) if len(submap) else None
    new_pos, new_geo, new_col, new_rho = [], [], [], []
    added_pts = []
    added_tree_count = 0
    for i in range(len(chosen)):
        p = pts_world[i]
        r = rho[i]
        if existing is not None and len(existing.query_ball_point(p, r)) > 0:
            continue
        if added_pts:
            d = np.linalg.norm(np.asarray(added_pts) - p, axis=1)
            if (d < np.minimum(r, np.asarray(new_rho))).any():
                continue
        added_pts.append(p)
        new_pos.append(p)
        fg = np.zeros(FEATURE_DIM)
        fg[:3] = normals_world[i]
        new_geo.append(fg)
        fc = np.zeros(FEATURE_DIM)
        if rgb is not None:
            fc[:3] = rgb[i]
        new_col.append(fc)
        new_rho.append(r)
    if not new_pos:
        return 0
    submap.positions = np.concatenate([submap.positions, np.asarray(new_pos)])
    submap.feat_geo = np.concatenate([submap.feat_geo, np.asarray(new_geo)])
    submap.feat_col = np.concatenate([submap.feat_col, np.asarray(new_col)])
    submap.radii = np.concatenate([submap.radii, np.asarray(new_rho)])
    return len(new_pos)


def apply_correction(submap: Submap, transform: Pose) -> None:
    """Left-compose ``transform`` onto every pose and rigidly move all points."""
    if len(submap):
        submap.positions = transform.apply(submap.positions)
        rotated = transform.rotate(submap.feat_geo[:, :3])
        submap.feat_geo = submap.feat_geo.copy()
        submap.feat_geo[:, :3] = rotated
    submap.keyframe_pose = transform.compose(submap.keyframe_pose)
    submap.frame_poses = {fid: transform.compose(p) for fid, p in submap.frame_poses.items()}
    if submap.surface is not None:
        submap.surface = submap.surface.transformed(transform)


@dataclass
class GlobalMap:
    positions: np.ndarray
    feat_geo: np.ndarray
    feat_col: np.ndarray
    provenance: list  # per point: sorted list of contributing submap ids

    def __len__(self):
        return len(self.positions)


def fuse_features(submaps) -> GlobalMap:
    """Union-find over correspondence chains; each chain averages to one point."""
    submaps = list(submaps)
    offsets = {}
    total = 0
    for sm in submaps:
        offsets[sm.id] = total
        total += len(sm)
    parent = list(range(total))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for sm in submaps:
        for local, (prev_id, prev_idx) in sm.links.items():
            if prev_id not in offsets:
                raise ValueError(f"link to unknown submap {prev_id}")
            prev_sm = next(s for s in submaps if s.id == prev_id)
            if prev_idx >= len(prev_sm):
                raise ValueError("dangling correspondence link")
            a = offsets[sm.id] + local
            b = offsets[prev_id] + prev_idx
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

    groups: dict = {}
    for sm in submaps:
        base = offsets[sm.id]
        for local in range(len(sm)):
            groups.setdefault(find(base + local), []).append((sm, local))

    n = len(groups)
    positions = np.zeros((n, 3))
    fg = np.zeros((n, FEATURE_DIM))
    fc = np.zeros((n, FEATURE_DIM))
    provenance = []
    for out_i, members in enumerate(groups.values()):
        positions[out_i] = np.mean([sm.positions[j] for sm, j in members], axis=0)
        fg[out_i] = np.mean([sm.feat_geo[j] for sm, j in members], axis=0)
        fc[out_i] = np.mean([sm.feat_col[j] for sm, j in members], axis=0)
        provenance.append(sorted({sm.id for sm, j in members}))
    return GlobalMap(positions, fg, fc, provenance)


def export_links_csv(path, submaps) -> None:
    with open(path, "w") as f:
        f.write("submap,index,prev_submap,prev_index\n")
        for sm in submaps:
            for local, (prev_id, prev_idx) in sorted(sm.links.items()):
                f.write(f"{sm.id},{local},{prev_id},{prev_idx}\n")
