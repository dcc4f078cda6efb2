"""Frame-to-model tracking against the active submap, and keyframe triggering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .fusion import Intrinsics
from .geometry import Pose, se3_exp
from .submap import Submap


class TrackingLostError(RuntimeError):
    pass


@dataclass
class TrackerConfig:
    trans_trigger: float = 0.3        # meters
    rot_trigger_deg: float = 20.0     # degrees
    max_corr_dist: float = 0.15
    max_iterations: int = 10
    huber_delta: float = 0.05
    pixels_per_iteration: int = 1500
    damping: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.trans_trigger <= 0 or self.rot_trigger_deg <= 0:
            raise ValueError("trigger thresholds must be positive")


@dataclass
class Frame:
    id: int
    timestamp: float
    depth: np.ndarray
    gray: np.ndarray
    intrinsics: Intrinsics
    color: Optional[np.ndarray] = None
    pose: Optional[Pose] = None  # world-from-camera once estimated

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if (self.depth[np.isfinite(self.depth)] < 0).any():
            raise ValueError("negative depth")
        if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("depth resolution does not match intrinsics")


@dataclass
class TrackStats:
    rmse: float
    inliers: int
    iterations: int


def _huber_weights(r, delta):
    a = np.abs(r)
    w = np.ones_like(a)
    big = a > delta
    w[big] = delta / a[big]
    return w


def track_frame(submap: Submap, frame: Frame, init: Pose, cfg: TrackerConfig):
    """Refine the frame pose by projective point-to-plane ICP on the submap.

    The submap's per-point normals live in the first three geometric feature
    slots. Raises TrackingLostError with fewer than 6 inlier correspondences.
    """
    if len(submap) < 100:
        raise TrackingLostError("submap too small for tracking")
    depth = frame.depth
    valid = np.isfinite(depth) & (depth > 0)
    flat = np.nonzero(valid.reshape(-1))[0]
    if len(flat) < 6:
        raise TrackingLostError("no valid depth")
    rng = np.random.default_rng(cfg.seed + frame.id)
    n_px = min(cfg.pixels_per_iteration, len(flat))
    chosen = rng.choice(flat, size=n_px, replace=False)
    vs, us = np.divmod(chosen, depth.shape[1])
    rays = frame.intrinsics.pixel_rays()[vs, us]
    pts_cam = rays * depth[vs, us][:, None]

    normals = submap.feat_geo[:, :3]
    nlen = np.linalg.norm(normals, axis=1)
    usable = nlen > 0.5
    positions = submap.positions[usable]
    normals = normals[usable] / nlen[usable, None]
    if len(positions) < 100:
        raise TrackingLostError("submap lacks valid normals")
    tree = cKDTree(positions)

    pose = init
    rmse, inliers = 0.0, 0
    for it in range(cfg.max_iterations):
        pw = pose.apply(pts_cam)
        dist, nn = tree.query(pw, k=1)
        mask = dist <= cfg.max_corr_dist
        inliers = int(mask.sum())
        if inliers < 6:
            raise TrackingLostError("fewer than 6 inlier correspondences")
        p = pw[mask]
        q = positions[nn[mask]]
        n = normals[nn[mask]]
        r = np.sum((p - q) * n, axis=1)
        rmse = float(np.sqrt(np.mean(r ** 2)))
        w = _huber_weights(r, cfg.huber_delta)
        jac = np.concatenate([np.cross(p, n), n], axis=1)
        jw = jac * w[:, None]
        h = jw.T @ jac
        g = jw.T @ r
        # trace-scaled damping: under-constrained directions (e.g. a single
        # flat wall in view) stay at the motion-model initialization instead
        # of sliding freely
        damp = cfg.damping * np.trace(h) / 6.0 + 1e-12
        try:
            delta = np.linalg.solve(h + damp * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        pose = se3_exp(np.concatenate([delta[:3], delta[3:]])).compose(pose)
        if np.linalg.norm(delta) < 1e-10:
            break
    return pose, TrackStats(rmse, inliers, it + 1)


def should_trigger_keyframe(current: Pose, keyframe: Pose, cfg: TrackerConfig) -> bool:
    """True iff relative motion to the submap keyframe exceeds either trigger."""
    rel = keyframe.inverse().compose(current)
    return (math.degrees(rel.rotation_angle()) > cfg.rot_trigger_deg
            or rel.translation_norm() > cfg.trans_trigger)


def constant_velocity_init(last: Pose, prev_last: Pose) -> Pose:
    """init = last ∘ (prev_last⁻¹ ∘ last)."""
    return last.compose(prev_last.inverse().compose(last))
