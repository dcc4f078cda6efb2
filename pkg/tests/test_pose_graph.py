"""Pose-graph terms, the line process, robust optimization, and persistence."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from submap_slam.geometry import Pose, se3_exp
from submap_slam.pointcloud import PointCloud
from submap_slam.pose_graph import (
    CorrespondenceSet,
    LoopEdge,
    OdometryEdge,
    PgoParams,
    PoseGraph,
    apply_corrections,
    build_correspondence_set,
    edge_residual,
    line_process_weight,
    load_graph,
    optimize,
    rebase_graph,
    save_graph,
)
from submap_slam.submap import FEATURE_DIM, Submap


def cloud_from(points) -> PointCloud:
    pts = np.asarray(points, dtype=np.float64)
    return PointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1)))


def dense_pairs(n, seed, spread=1.0) -> CorrespondenceSet:
    rng = np.random.default_rng(seed)
    p = spread * rng.standard_normal((n, 3))
    return CorrespondenceSet(p, p.copy())


class TestCorrespondenceSet:
    def test_identity_alignment_keeps_all(self):
        pts = np.random.default_rng(0).standard_normal((50, 3))
        corr = build_correspondence_set(cloud_from(pts), cloud_from(pts),
                                        Pose.identity(), eps=1e-6)
        assert len(corr) == 50
        np.testing.assert_allclose(corr.p, corr.q, atol=1e-12)

    def test_disjoint_clouds_empty(self):
        a = cloud_from([[0.0, 0.0, 0.0]])
        b = cloud_from([[10.0, 0.0, 0.0]])
        corr = build_correspondence_set(a, b, Pose.identity(), eps=0.1)
        assert len(corr) == 0

    def test_half_overlap(self):
        a = cloud_from([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        b = cloud_from([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        corr = build_correspondence_set(a, b, Pose.identity(), eps=0.1)
        assert len(corr) == 1
        np.testing.assert_allclose(corr.p[0], [0.0, 0.0, 0.0])

    def test_transform_applied_before_matching(self):
        a = cloud_from([[0.0, 0.0, 0.0]])
        b = cloud_from([[1.0, 0.0, 0.0]])
        x = Pose.from_rt(np.eye(3), np.array([1.0, 0.0, 0.0]))
        corr = build_correspondence_set(a, b, x, eps=0.01)
        assert len(corr) == 1
        # stored p is in the source frame (untransformed)
        np.testing.assert_allclose(corr.p[0], [0.0, 0.0, 0.0])

    def test_bad_eps_raises(self):
        a = cloud_from([[0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            build_correspondence_set(a, a, Pose.identity(), eps=0.0)

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            CorrespondenceSet(np.zeros((2, 3)), np.zeros((3, 3)))


class TestEdgeResidual:
    def test_consistent_poses_zero(self):
        corr = dense_pairs(30, seed=1)
        val, degenerate = edge_residual(Pose.identity(), Pose.identity(),
                                        Pose.identity(), corr)
        assert val == pytest.approx(0.0, abs=1e-24)
        assert not degenerate

    def test_pure_translation_value(self):
        # T_s = shift by d, T_t = X = identity: residual = n * d^2
        corr = dense_pairs(40, seed=2)
        d = np.array([0.3, -0.1, 0.2])
        t_s = Pose.from_rt(np.eye(3), d)
        val, _ = edge_residual(t_s, Pose.identity(), Pose.identity(), corr)
        assert val == pytest.approx(40 * float(d @ d), rel=1e-12)

    def test_empty_set_flagged(self):
        val, degenerate = edge_residual(Pose.identity(), Pose.identity(),
                                        Pose.identity(), CorrespondenceSet.empty())
        assert val == 0.0
        assert degenerate


class TestLineProcess:
    def test_zero_residual_full_weight(self):
        assert line_process_weight(0.0, mu=1.0) == pytest.approx(1.0)

    def test_residual_equals_mu(self):
        assert line_process_weight(2.0, mu=2.0) == pytest.approx(0.25)

    def test_monotone_decreasing(self):
        mu = 0.7
        vals = [line_process_weight(r, mu) for r in np.linspace(0, 10, 50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_matches_numeric_minimizer(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            r = float(rng.uniform(0.0, 5.0))
            mu = float(rng.uniform(0.1, 5.0))
            f = lambda l: l * r + mu * (np.sqrt(max(l, 0.0)) - 1.0) ** 2
            res = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded",
                                  options={"xatol": 1e-12})
            assert line_process_weight(r, mu) == pytest.approx(res.x, abs=1e-6)

    def test_invalid_inputs_raise(self):
        with pytest.raises(ValueError):
            line_process_weight(1.0, mu=0.0)
        with pytest.raises(ValueError):
            line_process_weight(-1.0, mu=1.0)


def chain_graph(n, loop=None, loop_constraint=None, n_pairs=60):
    """n-node graph with identity odometry edges and an optional loop edge."""
    g = PoseGraph()
    for i in range(n):
        g.add_node(i)
    for i in range(n - 1):
        g.add_odometry_edge(OdometryEdge(i, i + 1,
                                         dense_pairs(n_pairs, seed=i),
                                         dense_pairs(n_pairs, seed=100 + i)))
    if loop is not None:
        s, t = loop
        x = loop_constraint or Pose.identity()
        fwd = dense_pairs(n_pairs, seed=200)
        bwd = CorrespondenceSet(x.apply(fwd.p), fwd.p.copy())
        g.add_loop_edge(LoopEdge(s, t, x, fwd, bwd))
    return g


class TestGraphInvariants:
    def test_nonconsecutive_odometry_edge_raises(self):
        g = PoseGraph()
        g.add_node(0)
        g.add_node(2)
        with pytest.raises(ValueError):
            g.add_odometry_edge(OdometryEdge(0, 2, CorrespondenceSet.empty(),
                                             CorrespondenceSet.empty()))

    def test_adjacent_loop_edge_raises(self):
        g = PoseGraph()
        with pytest.raises(ValueError):
            g.add_loop_edge(LoopEdge(0, 1, Pose.identity(),
                                     CorrespondenceSet.empty(),
                                     CorrespondenceSet.empty()))

    def test_disconnected_graph_raises(self):
        g = PoseGraph()
        g.add_node(0)
        g.add_node(1)
        g.add_node(5)
        g.add_odometry_edge(OdometryEdge(0, 1, dense_pairs(30, 0), dense_pairs(30, 1)))
        with pytest.raises(ValueError):
            optimize(g, PgoParams())

    def test_empty_graph_raises(self):
        with pytest.raises(ValueError):
            optimize(PoseGraph(), PgoParams())


class TestOptimize:
    def test_consistent_graph_stays_identity(self):
        g = chain_graph(4, loop=(0, 3))
        corrections, weights, report = optimize(g, PgoParams())
        for nid in range(4):
            assert corrections[nid].rotation_angle() <= 1e-6
            assert corrections[nid].translation_norm() <= 1e-6
        assert weights[(0, 3)] >= 0.9
        assert report.converged

    def test_outlier_loop_pruned(self):
        g = chain_graph(5, loop=(0, 4))
        # a wildly wrong constraint: residual far above mu
        bogus = Pose.from_rt(np.eye(3), np.array([3.0, 0.0, 0.0]))
        fwd = dense_pairs(60, seed=300)
        bwd = CorrespondenceSet(bogus.apply(fwd.p), fwd.p.copy())
        g.add_loop_edge(LoopEdge(0, 2, bogus, fwd, bwd))
        corrections, weights, report = optimize(g, PgoParams())
        assert weights[(0, 2)] < 0.25
        assert weights[(0, 4)] >= 0.25
        assert any(e[:2] == (0, 2) for e in report.pruned_edges)
        for nid in range(5):
            assert corrections[nid].translation_norm() <= 0.05

    def test_degenerate_edge_zero_weight(self):
        g = chain_graph(4, loop=(0, 3))
        g.add_loop_edge(LoopEdge(0, 2, Pose.identity(),
                                 dense_pairs(3, seed=9), dense_pairs(3, seed=10)))
        _, weights, report = optimize(g, PgoParams(min_corr=25))
        assert weights[(0, 2)] == 0.0
        assert any(e[:2] == (0, 2) and "degenerate" in e[2]
                   for e in report.pruned_edges)

    def test_objective_traces_non_increasing(self):
        g = chain_graph(5, loop=(0, 4))
        bogus = Pose.from_rt(np.eye(3), np.array([1.0, 1.0, 0.0]))
        fwd = dense_pairs(60, seed=301)
        bwd = CorrespondenceSet(bogus.apply(fwd.p), fwd.p.copy())
        g.add_loop_edge(LoopEdge(1, 3, bogus, fwd, bwd))
        _, _, report = optimize(g, PgoParams())
        lm_steps = report.objective_trace
        assert all(a >= b - 1e-12 for a, b in zip(lm_steps, lm_steps[1:]))
        assert all(a >= b - 1e-12 for a, b in
                   zip(report.stage2_trace, report.stage2_trace[1:]))

    def test_gauge_node_fixed(self):
        g = chain_graph(3, loop=None)
        corrections, _, _ = optimize(g, PgoParams())
        assert corrections[0].is_close(Pose.identity())


def simple_submap(sid, positions) -> Submap:
    sm = Submap(sid, sid, Pose.identity())
    sm.positions = np.asarray(positions, dtype=np.float64)
    n = len(sm.positions)
    sm.feat_geo = np.zeros((n, FEATURE_DIM))
    sm.feat_col = np.zeros((n, FEATURE_DIM))
    sm.radii = np.full(n, 0.05)
    sm.frame_poses = {sid: Pose.identity()}
    return sm


class TestApplyCorrections:
    def test_identity_keeps_everything(self):
        from submap_slam.geometry import Trajectory
        sms = [simple_submap(0, [[0.0, 0.0, 1.0]]),
               simple_submap(1, [[1.0, 0.0, 1.0]])]
        traj = Trajectory([0, 1], [0.0, 1.0], [Pose.identity(), Pose.identity()])
        out = apply_corrections(sms, traj, {0: Pose.identity(), 1: Pose.identity()})
        for pose in out.poses:
            assert pose.is_close(Pose.identity())
        np.testing.assert_allclose(sms[0].positions, [[0.0, 0.0, 1.0]])

    def test_translation_moves_points_and_poses(self):
        from submap_slam.geometry import Trajectory
        sms = [simple_submap(0, [[0.0, 0.0, 1.0]])]
        traj = Trajectory([0], [0.0], [Pose.identity()])
        shift = Pose.from_rt(np.eye(3), np.array([0.0, 2.0, 0.0]))
        out = apply_corrections(sms, traj, {0: shift})
        np.testing.assert_allclose(sms[0].positions, [[0.0, 2.0, 1.0]])
        np.testing.assert_allclose(out.poses[0].t, [0.0, 2.0, 0.0])

    def test_unowned_frames_keep_pose(self):
        from submap_slam.geometry import Trajectory
        sms = [simple_submap(0, [[0.0, 0.0, 1.0]])]
        orphan = Pose.from_rt(np.eye(3), np.array([7.0, 0.0, 0.0]))
        traj = Trajectory([0, 99], [0.0, 1.0], [Pose.identity(), orphan])
        shift = Pose.from_rt(np.eye(3), np.array([0.0, 2.0, 0.0]))
        out = apply_corrections(sms, traj, {0: shift})
        np.testing.assert_allclose(out.poses[1].t, [7.0, 0.0, 0.0])

    def test_missing_correction_raises(self):
        from submap_slam.geometry import Trajectory
        sms = [simple_submap(0, [[0.0, 0.0, 1.0]])]
        traj = Trajectory([0], [0.0], [Pose.identity()])
        with pytest.raises(ValueError):
            apply_corrections(sms, traj, {})


class TestRebase:
    def test_residuals_preserved(self):
        rng = np.random.default_rng(11)
        g = chain_graph(4, loop=(0, 3),
                        loop_constraint=se3_exp(0.2 * rng.standard_normal(6)))
        corrections = {i: se3_exp(0.1 * rng.standard_normal(6)) for i in range(4)}
        # loop residuals with the corrections applied as node poses ...
        before = [edge_residual(corrections[e.s], corrections[e.t],
                                e.constraint, e.corr_fwd)[0]
                  for e in g.loop_edges]
        rebase_graph(g, corrections)
        # ... must equal loop residuals at identity after rebasing
        after = [edge_residual(Pose.identity(), Pose.identity(),
                               e.constraint, e.corr_fwd)[0]
                 for e in g.loop_edges]
        np.testing.assert_allclose(after, before, atol=1e-9)
        # odometry terms use only the (moved) source points, so the corrected
        # state becomes the new zero-residual baseline
        for e in g.odometry_edges:
            val, _ = edge_residual(Pose.identity(), Pose.identity(),
                                   Pose.identity(), e.corr_fwd)
            assert val == pytest.approx(0.0, abs=1e-18)
        for nid in g.node_ids:
            assert g.corrections[nid].is_close(Pose.identity())


class TestPersistence:
    def test_round_trip_with_sidecar(self, tmp_path):
        rng = np.random.default_rng(21)
        g = chain_graph(4, loop=(0, 3),
                        loop_constraint=se3_exp(0.2 * rng.standard_normal(6)))
        g.loop_edges[0].fitness = 0.625
        g.corrections[2] = se3_exp(0.1 * rng.standard_normal(6))
        path = tmp_path / "graph.txt"
        sidecar = tmp_path / "graph.npz"
        save_graph(path, g, sidecar_path=sidecar)
        loaded = load_graph(path, sidecar_path=sidecar)
        assert sorted(loaded.node_ids) == sorted(g.node_ids)
        for nid in g.node_ids:
            assert loaded.corrections[nid].is_close(g.corrections[nid],
                                                    rot_tol=1e-6, trans_tol=1e-6)
        assert len(loaded.odometry_edges) == len(g.odometry_edges)
        assert len(loaded.loop_edges) == 1
        le, ge = loaded.loop_edges[0], g.loop_edges[0]
        assert (le.s, le.t) == (ge.s, ge.t)
        assert le.constraint.is_close(ge.constraint, rot_tol=1e-6, trans_tol=1e-6)
        assert le.fitness == pytest.approx(ge.fitness, abs=1e-6)
        np.testing.assert_allclose(le.corr_fwd.p, ge.corr_fwd.p, atol=1e-12)
        np.testing.assert_allclose(le.corr_bwd.q, ge.corr_bwd.q, atol=1e-12)

    def test_unknown_record_raises(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("BOGUS 1 2\n")
        with pytest.raises(ValueError):
            load_graph(path)
