"""Shared fixtures: synthetic scenes, the drift harness, and fused surfaces."""

import numpy as np
import pytest

from submap_slam.dataio import (SequenceData, SyntheticSceneSpec,
                                generate_synthetic)
from submap_slam.fusion import FusionParams, fuse_submap_surface
from submap_slam.geometry import Trajectory, ate_rmse
from submap_slam.pipeline import PipelineConfig, run
from submap_slam.registration import CoarseToFineParams
from submap_slam.tracking import TrackerConfig


def harness_spec(n_frames=160):
    """Square-loop room sequence with per-frame drift bias (0.05 deg, 1 mm)."""
    return SyntheticSceneSpec(n_frames=n_frames, drift_rot_deg=0.05,
                              drift_trans=0.001)


def harness_config(seed, loop_closure=True):
    """Backend-mode settings producing 8 submaps on the default square loop."""
    return PipelineConfig(
        mode="backend", seed=seed, loop_closure_enabled=loop_closure,
        tracker=TrackerConfig(trans_trigger=0.75),
        fusion=FusionParams(voxel_size=0.02),
        registration=CoarseToFineParams(fine_voxel=0.02),
    )


def make_sequence(frames, gt, odom):
    return SequenceData(frames=frames, ground_truth=gt, odometry=odom,
                        dropped=0, intrinsics=frames[0].intrinsics)


def run_backend_harness(seed, loop_closure=True):
    frames, gt, odom, scene = generate_synthetic(harness_spec(), seed=seed)
    cfg = harness_config(seed, loop_closure)
    result = run(cfg, make_sequence(frames, gt, odom))
    return {
        "result": result, "gt": gt, "odom": odom, "config": cfg,
        "odometry_ate": ate_rmse(odom, gt),
        "scene": scene,
    }


def corrected_ate(trajectory, gt, submaps, corrections):
    """ATE after composing per-submap corrections onto the trajectory poses."""
    owner = {}
    for sm in submaps:
        for fid in sm.frame_poses:
            owner[fid] = sm.id
    poses = [corrections[owner[fid]].compose(p)
             for fid, p in zip(trajectory.frame_ids, trajectory.poses)]
    fixed = Trajectory(list(trajectory.frame_ids), list(trajectory.timestamps),
                       poses)
    return ate_rmse(fixed, gt)


@pytest.fixture(scope="session")
def drift_harness():
    """One full backend harness run with loop closure (seed 7)."""
    return run_backend_harness(7)


@pytest.fixture(scope="session")
def small_scene():
    """Short noiseless drift-free loop for tracking/submap/fusion tests."""
    spec = SyntheticSceneSpec(n_frames=24)
    frames, gt, odom, scene = generate_synthetic(spec, seed=3)
    return {"spec": spec, "frames": frames, "gt": gt, "scene": scene}


def fuse_segment(frames, poses, voxel=0.02):
    params = FusionParams(voxel_size=voxel)
    return fuse_submap_surface(
        [(f.depth, p) for f, p in zip(frames, poses)],
        frames[0].intrinsics, params)


@pytest.fixture(scope="session")
def fused_pair():
    """Two fused surfaces of the same room region (loop start vs loop end).

    Rendered with 5 mm depth noise from the closed square loop so the first
    and last segments observe the same geometry from the same viewpoints.
    """
    spec = SyntheticSceneSpec(n_frames=96, depth_sigma=0.005)
    frames, gt, odom, scene = generate_synthetic(spec, seed=11)
    poses = {fid: p for fid, p in zip(gt.frame_ids, gt.poses)}
    seg_a = frames[0:12]
    seg_b = frames[84:96]
    surf_a = fuse_segment(seg_a, [poses[f.id] for f in seg_a])
    surf_b = fuse_segment(seg_b, [poses[f.id] for f in seg_b])
    return surf_a, surf_b
