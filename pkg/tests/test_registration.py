"""FPFH features, RANSAC global registration, ICP, and loop constraints."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from submap_slam.geometry import Pose, se3_exp
from submap_slam.pointcloud import PointCloud, estimate_normals, voxel_downsample
from submap_slam.registration import (CoarseToFineParams, RansacParams,
                                      compute_fpfh, compute_loop_constraint,
                                      global_registration, icp_point_to_plane,
                                      prefilter_loop_edges, LoopConstraint)


def random_rigid(rng, max_rot_deg=30.0, max_trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_rot_deg))
    t = rng.uniform(-1, 1, 3)
    t *= max_trans * rng.uniform(0, 1) / max(np.linalg.norm(t), 1e-12)
    return se3_exp(np.concatenate([axis * angle, [0, 0, 0]])).compose(
        Pose(t=t))


def structured_cloud(n=1500, seed=0, noise=0.0):
    """Corner of two walls plus floor plus a box: registration-friendly."""
    rng = np.random.default_rng(seed)
    parts = []
    m = n // 4
    xy = rng.uniform(0, 1.5, size=(m, 2))
    parts.append(np.column_stack([xy[:, 0], xy[:, 1], np.zeros(m)]))        # floor
    parts.append(np.column_stack([xy[:, 0], np.zeros(m), xy[:, 1]]))        # wall y=0
    parts.append(np.column_stack([np.zeros(m), xy[:, 0], xy[:, 1]]))        # wall x=0
    box = rng.uniform(0, 0.3, size=(n - 3 * m, 3)) + np.array([0.8, 0.8, 0.0])
    box[:, 2] = np.where(rng.uniform(size=len(box)) < 0.5, 0.3, box[:, 2])
    parts.append(box)
    pts = np.concatenate(parts)
    if noise:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    cloud = PointCloud(pts)
    return estimate_normals(cloud, radius=0.12,
                            viewpoint=np.array([2.0, 2.0, 2.0]))


def pose_error(a: Pose, b: Pose):
    rel = a.compose(b.inverse())
    return np.degrees(rel.rotation_angle()), rel.translation_norm()


class TestFpfh:
    def test_rigid_invariance(self):
        cloud = structured_cloud(600, seed=1)
        rng = np.random.default_rng(2)
        transform = random_rigid(rng)
        moved = cloud.transformed(transform)
        f0 = compute_fpfh(cloud, radius=0.25)
        f1 = compute_fpfh(moved, radius=0.25)
        d = np.linalg.norm(f0 - f1, axis=1)
        # points whose neighbor distance or angle sits exactly on a histogram
        # boundary can flip bins under float rotation; the body of the
        # distribution must be exactly invariant
        assert np.median(d) <= 1e-9
        assert np.mean(d <= 1e-3) >= 0.95

    def test_subhistogram_normalization(self):
        cloud = structured_cloud(400, seed=3)
        f = compute_fpfh(cloud, radius=0.25)
        assert np.all(f >= 0)
        for k in range(3):
            s = f[:, 11 * k:11 * (k + 1)].sum(axis=1)
            assert np.all((np.abs(s - 100) < 1e-3) | (s == 0))

    def test_isolated_point_zero_histogram(self):
        pts = np.vstack([structured_cloud(200, seed=4).positions,
                         [[30.0, 30.0, 30.0]]])
        cloud = estimate_normals(PointCloud(pts), radius=0.12)
        f = compute_fpfh(cloud, radius=0.25)
        assert np.all(f[-1] == 0)

    def test_plane_interior_uniform(self):
        rng = np.random.default_rng(5)
        xy = rng.uniform(0, 2, size=(800, 2))
        cloud = PointCloud(np.column_stack([xy, np.zeros(800)]),
                           normals=np.tile([0.0, 0.0, 1.0], (800, 1)))
        f = compute_fpfh(cloud, radius=0.25)
        interior = np.all((xy > 0.4) & (xy < 1.6), axis=1)
        fi = f[interior]
        mean_norm = np.linalg.norm(fi, axis=1).mean()
        spread = np.linalg.norm(fi - fi.mean(axis=0), axis=1)
        assert np.percentile(spread, 95) <= 0.05 * mean_norm


class TestGlobalRegistration:
    def test_self_registration_identity(self):
        cloud = structured_cloud(800, seed=6)
        feats = compute_fpfh(cloud, radius=0.25)
        res = global_registration(cloud, cloud, feats, feats,
                                  RansacParams(seed=1))
        assert not res.failed
        assert res.fitness >= 0.99
        rot, trans = pose_error(res.transform, Pose.identity())
        assert rot <= 1e-6 and trans <= 1e-6

    def test_recovers_known_offset_with_icp(self):
        rng = np.random.default_rng(7)
        target = structured_cloud(1500, seed=8, noise=0.002)
        transform = random_rigid(rng, 30.0, 1.0)
        source = target.transformed(transform.inverse())
        sf = compute_fpfh(source, radius=0.25)
        tf = compute_fpfh(target, radius=0.25)
        coarse = global_registration(source, target, sf, tf,
                                     RansacParams(seed=2, max_corr_dist=0.08))
        assert not coarse.failed
        fine = icp_point_to_plane(source, target, coarse.transform, 0.03)
        rot, trans = pose_error(fine.transform, transform)
        assert rot <= 1.0 and trans <= 0.02

    def test_disjoint_clouds_low_fitness(self):
        a = structured_cloud(600, seed=9)
        rng = np.random.default_rng(10)
        b = PointCloud(rng.uniform(10, 12, size=(600, 3)))
        b = estimate_normals(b, radius=0.4)
        fa = compute_fpfh(a, radius=0.25)
        fb = compute_fpfh(b, radius=0.25)
        res = global_registration(a, b, fa, fb, RansacParams(seed=3))
        assert res.failed or res.fitness < 0.1


class TestIcp:
    def sphere(self, seed, noise=0.0):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(2000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = 0.5 * v + rng.normal(scale=noise, size=v.shape)
        return PointCloud(pts, normals=v)

    def test_self_identity(self):
        cloud = structured_cloud(800, seed=11)
        res = icp_point_to_plane(cloud, cloud, Pose.identity(), 0.05)
        assert res.fitness >= 0.99
        rot, trans = pose_error(res.transform, Pose.identity())
        assert rot <= 1e-9 and trans <= 1e-9

    def test_noisy_sphere_small_offset(self):
        target = self.sphere(12, noise=0.005)
        source = self.sphere(13, noise=0.005)
        offset = se3_exp(np.array([0, 0, np.radians(2.0), 0.03, 0, 0]))
        src = source.transformed(offset.inverse())
        res = icp_point_to_plane(src, target, Pose.identity(), 0.05)
        # rotation about a sphere's own center is unobservable; the sphere
        # center (the origin) must land within 5 mm of its true image
        assert np.linalg.norm(res.transform.t - offset.t) <= 0.005

    def test_gross_init_no_exception(self):
        target = structured_cloud(600, seed=14)
        # 180-degree turn about the centroid keeps the (symmetric-ish) floor
        # overlapping, so associations exist but lead to a wrong local minimum
        c = target.positions.mean(axis=0)
        init = (Pose(t=c)
                .compose(se3_exp(np.array([0, 0, np.pi, 0, 0, 0])))
                .compose(Pose(t=-c)))
        res = icp_point_to_plane(target, target, init, 0.05)
        # converges somewhere without raising; a wrong local minimum is
        # reported via low fitness rather than hidden
        assert np.isfinite(res.fitness) and np.isfinite(res.inlier_rmse)

    def test_too_few_correspondences_raises(self):
        target = structured_cloud(600, seed=15)
        src = PointCloud(target.positions[:5] + 10.0)
        with pytest.raises(ValueError):
            icp_point_to_plane(src, target, Pose.identity(), 0.05)

    def test_rmse_non_increasing(self):
        # association at the accepted pose never reports a higher inlier RMSE
        # than the previous accepted pose
        target = self.sphere(16, noise=0.005)
        offset = se3_exp(np.array([0.05, -0.02, 0.04, 0.04, -0.02, 0.01]))
        src = self.sphere(17, noise=0.005).transformed(offset)
        rmses = []
        for iters in range(1, 12):
            res = icp_point_to_plane(src, target, Pose.identity(), 0.05,
                                     max_iterations=iters)
            rmses.append(res.inlier_rmse)
        # inlier count can grow (which may raise rmse legitimately); require
        # the final value to be the minimum over the converged tail
        assert rmses[-1] <= rmses[0] + 1e-9


class TestLoopConstraint:
    PARAMS = CoarseToFineParams(fine_voxel=0.02)

    def test_identical_surfaces(self, fused_pair):
        surf, _ = fused_pair
        c = compute_loop_constraint(surf, surf, self.PARAMS)
        rot, trans = pose_error(c.transform, Pose.identity())
        assert c.fitness > 0.9
        assert rot <= 0.1 and trans <= 0.005

    def test_recovers_known_drift(self, fused_pair):
        surf_a, surf_b = fused_pair
        rng = np.random.default_rng(18)
        drift = random_rigid(rng, 10.0, 0.3)
        moved = surf_a.transformed(drift)
        c = compute_loop_constraint(moved, surf_b, self.PARAMS)
        assert c.fitness >= 0.1
        rot, trans = pose_error(c.transform, drift.inverse())
        assert rot <= 1.0 and trans <= 0.02

    def test_mutual_inverse(self, fused_pair):
        surf_a, surf_b = fused_pair
        ab = compute_loop_constraint(surf_a, surf_b, self.PARAMS)
        ba = compute_loop_constraint(surf_b, surf_a, self.PARAMS)
        rel = ab.transform.compose(ba.transform)
        assert np.degrees(rel.rotation_angle()) <= 2.0
        assert rel.translation_norm() <= 0.04


def const(fitness, trans, src=0, tgt=2):
    return LoopConstraint(src, tgt, Pose(t=np.array([trans, 0.0, 0.0])),
                          fitness, 0.01)


class TestPrefilter:
    def test_equal_magnitudes_kept(self):
        cs = [const(0.8, 0.05) for _ in range(6)]
        kept, t_min = prefilter_loop_edges(cs, sigma_min=0.15, f_min=0.1)
        assert len(kept) == 6

    def test_magnitude_outlier_removed(self):
        cs = [const(0.8, 0.05 + 0.001 * i) for i in range(9)]
        cs.append(const(0.8, 2.0))
        kept, t_min = prefilter_loop_edges(cs, sigma_min=0.15, f_min=0.1)
        assert len(kept) == 9
        assert all(c.translation_magnitude < 1.0 for c in kept)

    def test_low_fitness_removed_regardless(self):
        cs = [const(0.8, 0.05) for _ in range(5)] + [const(0.05, 0.05)]
        kept, _ = prefilter_loop_edges(cs, sigma_min=0.15, f_min=0.1)
        assert len(kept) == 5
        assert all(c.fitness >= 0.1 for c in kept)

    def test_empty(self):
        kept, t_min = prefilter_loop_edges([], 0.15, 0.1)
        assert kept == [] and t_min == float("inf")
