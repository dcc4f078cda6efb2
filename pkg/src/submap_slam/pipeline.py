"""Per-frame SLAM loop: track, map, trigger submaps, close loops, correct globally."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import pose_graph as pg
from .dataio import SequenceData, f_score
from .fusion import FusionParams, fuse_submap_surface
from .geometry import Pose, Trajectory, ate_rmse, write_trajectory
from .place_recognition import FrameDescriber, KeyframeDatabase, dynamic_threshold
from .pointcloud import PointCloud, write_ply
from .registration import CoarseToFineParams, compute_loop_constraint, prefilter_loop_edges
from .submap import (GlobalMap, Submap, SubmapParams, add_points, create_submap,
                     fuse_features)
from .tracking import (Frame, TrackerConfig, TrackingLostError, constant_velocity_init,
                       should_trigger_keyframe, track_frame)


@dataclass
class LoopParams:
    k: int = 4
    sigma_min: float = 0.15
    f_min: float = 0.1
    min_distance: int = 2
    prefilter: bool = True


@dataclass
class PipelineConfig:
    mode: str = "backend"                 # "full" | "backend"
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    pgo: pg.PgoParams = field(default_factory=pg.PgoParams)
    loop: LoopParams = field(default_factory=LoopParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    submap: SubmapParams = field(default_factory=SubmapParams)
    registration: CoarseToFineParams = field(default_factory=CoarseToFineParams)
    mapping_stride: int = 5
    seed: int = 0
    loop_closure_enabled: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in ("full", "backend"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class SlamState:
    submaps: list = field(default_factory=list)
    active: Submap | None = None
    graph: pg.PoseGraph = field(default_factory=pg.PoseGraph)
    database: KeyframeDatabase = field(default_factory=KeyframeDatabase)
    describer: FrameDescriber = field(default_factory=FrameDescriber)
    events: list = field(default_factory=list)
    all_constraints: list = field(default_factory=list)
    submap_frame_vecs: dict = field(default_factory=dict)   # submap id -> [BoWVector]
    keyframe_vec: dict = field(default_factory=dict)        # submap id -> BoWVector
    submap_frames: dict = field(default_factory=dict)       # submap id -> [Frame]
    frame_records: list = field(default_factory=list)       # (id, ts, flagged)
    n_pgo: int = 0
    world_fix: Pose = field(default_factory=Pose.identity)  # accumulated odometry correction
    last_delta: Pose = field(default_factory=Pose.identity)  # newest-submap correction from last PGO

    def log(self, kind, **info):
        self.events.append({"type": kind, **info})


@dataclass
class SlamResult:
    trajectory: Trajectory
    global_map: GlobalMap
    metrics: dict
    events: list
    state: SlamState


def _start_submap(state: SlamState, config: PipelineConfig, frame: Frame) -> None:
    prev = state.active
    sm = create_submap(len(state.submaps), frame.id, frame.pose, frame.depth,
                       frame.intrinsics, prev, config.submap)
    state.submaps.append(sm)
    state.active = sm
    state.graph.add_node(sm.id)
    state.submap_frame_vecs[sm.id] = []
    state.submap_frames[sm.id] = []
    state.keyframe_vec[sm.id] = state.describer.describe(frame.gray)
    state.log("submap-start", submap=sm.id, keyframe=frame.id)


def _register_frame(state: SlamState, frame: Frame) -> None:
    sm = state.active
    sm.frame_poses[frame.id] = frame.pose
    state.submap_frames[sm.id].append(frame)
    state.submap_frame_vecs[sm.id].append(state.describer.describe(frame.gray))


def _map_frame(state: SlamState, config: PipelineConfig, frame: Frame) -> None:
    sm = state.active
    added = add_points(sm, frame.depth, frame.gray, frame.color, frame.pose,
                       frame.intrinsics, config.submap,
                       seed=config.seed + 7919 * frame.id)
    sm.local_keyframe_ids.append(frame.id)
    state.log("map", frame=frame.id, submap=sm.id, added=added)


def on_submap_complete(state: SlamState, config: PipelineConfig):
    """Fuse the active submap surface, detect/register loops, run PGO, correct."""
    sm = state.active
    frames = state.submap_frames[sm.id]
    if not frames:
        raise ValueError("active submap has no frames")
    try:
        sm.surface = fuse_submap_surface(
            [(f.depth, sm.frame_poses[f.id]) for f in frames],
            frames[0].intrinsics, config.fusion)
    except ValueError as exc:
        state.log("degenerate-submap", submap=sm.id, reason=str(exc))
        state.database.add(sm.keyframe_id, state.keyframe_vec[sm.id], sm.id)
        return

    # odometry edge to the previous submap (identity constraint)
    if sm.id > 0:
        prev = state.submaps[sm.id - 1]
        if prev.surface is not None:
            fwd = pg.build_correspondence_set(prev.surface, sm.surface,
                                              Pose.identity(), config.pgo.eps)
            bwd = pg.build_correspondence_set(sm.surface, prev.surface,
                                              Pose.identity(), config.pgo.eps)
        else:
            fwd = bwd = pg.CorrespondenceSet.empty()
        state.graph.add_odometry_edge(pg.OdometryEdge(prev.id, sm.id, fwd, bwd))

    new_edges = 0
    if config.loop_closure_enabled and len(state.database):
        vecs = state.submap_frame_vecs[sm.id] or [state.keyframe_vec[sm.id]]
        s_min = dynamic_threshold(state.keyframe_vec[sm.id], vecs)
        candidates = state.database.query(state.keyframe_vec[sm.id], config.loop.k,
                                          s_min, config.loop.min_distance, sm.id)
        state.log("loop-candidates", submap=sm.id, s_min=s_min,
                  candidates=[(int(k), float(v)) for k, v in candidates])
        new_constraints = []
        for kf_id, score in candidates:
            t_id = state.database.submap_of[kf_id]
            target = state.submaps[t_id]
            if target.surface is None:
                continue
            reg = config.registration
            reg.ransac.seed = config.seed + 104729 * sm.id + t_id
            constraint = compute_loop_constraint(sm.surface, target.surface, reg,
                                                 source_id=sm.id, target_id=t_id)
            state.log("loop-constraint", source=sm.id, target=t_id,
                      fitness=constraint.fitness, rmse=constraint.inlier_rmse,
                      translation=constraint.translation_magnitude)
            new_constraints.append(constraint)
        if config.loop.prefilter:
            pool = state.all_constraints + new_constraints
            kept, t_min = prefilter_loop_edges(pool, config.loop.sigma_min,
                                               config.loop.f_min)
            kept_ids = {id(c) for c in kept}
            accepted = [c for c in new_constraints if id(c) in kept_ids]
            rejected = [c for c in new_constraints if id(c) not in kept_ids]
            for c in rejected:
                state.log("loop-rejected", source=c.source_id, target=c.target_id,
                          fitness=c.fitness, t_min=t_min)
        else:
            accepted = [c for c in new_constraints if c.fitness > 0]
        state.all_constraints.extend(c for c in new_constraints if c.fitness >= config.loop.f_min)
        for c in accepted:
            target = state.submaps[c.target_id]
            fwd = pg.build_correspondence_set(sm.surface, target.surface,
                                              c.transform, config.pgo.eps)
            bwd = pg.build_correspondence_set(target.surface, sm.surface,
                                              c.transform.inverse(), config.pgo.eps)
            state.graph.add_loop_edge(pg.LoopEdge(sm.id, c.target_id, c.transform,
                                                  fwd, bwd, fitness=c.fitness))
            new_edges += 1
            state.log("loop-edge", source=sm.id, target=c.target_id,
                      fitness=c.fitness)

    if new_edges:
        _run_pgo(state, config)
    elif config.loop_closure_enabled:
        state.log("no-loop", submap=sm.id)

    state.database.add(sm.keyframe_id, state.keyframe_vec[sm.id], sm.id)


def _run_pgo(state: SlamState, config: PipelineConfig) -> None:
    corrections, weights, report = pg.optimize(state.graph, config.pgo)
    traj = _current_trajectory(state)
    pg.apply_corrections(state.submaps, traj, corrections)
    pg.rebase_graph(state.graph, corrections)
    # frames arriving after this point chain off the newest submap's correction
    state.last_delta = corrections[state.active.id]
    state.world_fix = state.last_delta.compose(state.world_fix)
    state.n_pgo += 1
    state.log("pgo", n=state.n_pgo,
              objective_start=report.objective_trace[0] if report.objective_trace else 0.0,
              objective_end=report.objective_trace[-1] if report.objective_trace else 0.0,
              objective_trace=[float(v) for v in report.objective_trace],
              stage2_trace=[float(v) for v in report.stage2_trace],
              pruned=report.pruned_edges, warning=report.warning)


def _current_trajectory(state: SlamState) -> Trajectory:
    frame_pose = {}
    for sm in state.submaps:
        frame_pose.update(sm.frame_poses)
    ids = [fid for fid, _, _ in state.frame_records if fid in frame_pose]
    stamps = [ts for fid, ts, _ in state.frame_records if fid in frame_pose]
    return Trajectory(ids, stamps, [frame_pose[fid] for fid in ids])


def run(config: PipelineConfig, sequence: SequenceData,
        initial_pose: Pose | None = None) -> SlamResult:
    """Run the SLAM loop over a frame sequence and export results."""
    frames = sequence.frames
    if not frames:
        raise ValueError("empty sequence")
    if config.mode == "backend" and sequence.odometry is None:
        raise ValueError("backend mode requires input odometry poses")

    state = SlamState()
    odom = {fid: p for fid, p in zip(sequence.odometry.frame_ids, sequence.odometry.poses)} \
        if sequence.odometry is not None else {}

    track_log = []
    pose_hist = []
    start = time.time()
    for idx, frame in enumerate(frames):
        flagged = False
        if config.mode == "backend":
            frame.pose = state.world_fix.compose(odom[frame.id])
        else:
            if state.active is None:
                frame.pose = initial_pose or (odom.get(frame.id) or Pose.identity())
            else:
                if len(pose_hist) >= 2:
                    init = constant_velocity_init(pose_hist[-1], pose_hist[-2])
                else:
                    init = pose_hist[-1]
                try:
                    frame.pose, stats = track_frame(state.active, frame, init,
                                                    config.tracker)
                    track_log.append((frame.id, stats.rmse, stats.inliers, False))
                except TrackingLostError:
                    frame.pose = init
                    flagged = True
                    track_log.append((frame.id, float("nan"), 0, True))
                    state.log("tracking-lost", frame=frame.id)
        pose_hist.append(frame.pose)
        state.frame_records.append((frame.id, frame.timestamp, flagged))

        if state.active is None:
            _start_submap(state, config, frame)
            _register_frame(state, frame)
            _map_frame(state, config, frame)
            continue

        if should_trigger_keyframe(frame.pose, state.active.keyframe_pose,
                                   config.tracker):
            state.last_delta = Pose.identity()
            on_submap_complete(state, config)
            if not state.last_delta.is_close(Pose.identity()):
                # PGO moved the just-completed submap; chain this frame off it
                frame.pose = state.last_delta.compose(frame.pose)
                pose_hist[-1] = frame.pose
                if len(pose_hist) >= 2:
                    pose_hist[-2] = state.last_delta.compose(pose_hist[-2])
            _start_submap(state, config, frame)
            _register_frame(state, frame)
            _map_frame(state, config, frame)
            continue

        _register_frame(state, frame)
        local_idx = len(state.submap_frames[state.active.id]) - 1
        if not flagged and local_idx % config.mapping_stride == 0:
            _map_frame(state, config, frame)

    on_submap_complete(state, config)

    trajectory = _current_trajectory(state)
    global_map = fuse_features(state.submaps)
    n_loop_edges = len(state.graph.loop_edges)

    metrics = {
        "n_submaps": len(state.submaps),
        "n_pgo": state.n_pgo,
        "n_loop_edges": n_loop_edges,
        "runtime_s": time.time() - start,
    }
    if sequence.ground_truth is not None:
        gt = sequence.ground_truth
        common = set(gt.frame_ids) & set(trajectory.frame_ids)
        if len(common) >= 3:  # alignment needs three pose pairs
            est_sub = _sub_trajectory(trajectory, common)
            gt_sub = _sub_trajectory(gt, common)
            metrics["ate_rmse_m"] = ate_rmse(est_sub, gt_sub, align=True)

    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        write_trajectory(os.path.join(config.out_dir, "trajectory.txt"), trajectory)
        cloud = PointCloud(global_map.positions, colors=np.clip(global_map.feat_col[:, :3], 0, 1))
        write_ply(os.path.join(config.out_dir, "global_map.ply"), cloud)
        with open(os.path.join(config.out_dir, "metrics.json"), "w") as f:
            json.dump(metrics, f, indent=2)
        with open(os.path.join(config.out_dir, "tracking.csv"), "w") as f:
            f.write("frame,rmse,inliers,lost\n")
            for fid, rmse, inl, lost in track_log:
                f.write(f"{fid},{rmse},{inl},{int(lost)}\n")

    return SlamResult(trajectory, global_map, metrics, state.events, state)


def _sub_trajectory(traj: Trajectory, ids) -> Trajectory:
    keep = [i for i, fid in enumerate(traj.frame_ids) if fid in ids]
    return Trajectory([traj.frame_ids[i] for i in keep],
                      [traj.timestamps[i] for i in keep],
                      [traj.poses[i] for i in keep])


def evaluate_reconstruction(global_map: GlobalMap, ground_truth: PointCloud,
                            tau: float = 0.01, pre_align: bool = True) -> dict:
    m = f_score(PointCloud(global_map.positions), ground_truth, tau, pre_align)
    return {"precision": m.precision, "recall": m.recall, "f_score": m.f1, "tau": m.tau}
