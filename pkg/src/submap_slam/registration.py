"""Coarse-to-fine surface registration: FPFH + RANSAC, then point-to-plane ICP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, se3_exp
from .pointcloud import PointCloud, estimate_normals, voxel_downsample


# ---------------------------------------------------------------------------
# FPFH

_N_BINS = 11


def _pair_features(p_s, n_s, p_t, n_t):
    """Darboux-frame angle triple (alpha, phi, theta) for point pairs."""
    d = p_t - p_s
    dist = np.linalg.norm(d, axis=1)
    dist[dist == 0] = 1.0
    d_unit = d / dist[:, None]
    # choose source = point with smaller angle between normal and line
    dot_s = np.abs(np.sum(n_s * d_unit, axis=1))
    dot_t = np.abs(np.sum(n_t * d_unit, axis=1))
    swap = dot_t > dot_s
    ns = np.where(swap[:, None], n_t, n_s)
    nt = np.where(swap[:, None], n_s, n_t)
    du = np.where(swap[:, None], -d_unit, d_unit)
    u = ns
    v = np.cross(du, u)
    vn = np.linalg.norm(v, axis=1)
    vn[vn == 0] = 1.0
    v = v / vn[:, None]
    w = np.cross(u, v)
    alpha = np.sum(v * nt, axis=1)
    phi = np.sum(u * du, axis=1)
    theta = np.arctan2(np.sum(w * nt, axis=1), np.sum(u * nt, axis=1))
    return alpha, phi, theta


def _bin_indices(alpha, phi, theta):
    ia = np.clip(((alpha + 1.0) * 0.5 * _N_BINS).astype(int), 0, _N_BINS - 1)
    ip = np.clip(((phi + 1.0) * 0.5 * _N_BINS).astype(int), 0, _N_BINS - 1)
    it = np.clip(((theta + np.pi) / (2 * np.pi) * _N_BINS).astype(int), 0, _N_BINS - 1)
    return ia, ip, it


def compute_fpfh(cloud: PointCloud, radius: float) -> np.ndarray:
    """33-bin FPFH per point (3 sub-histograms of 11 bins, each summing to 100).

    Two passes: SPFH from radius neighborhoods, then distance-weighted
    neighbor accumulation. Neighborless points get all-zero histograms.
    """
    if cloud.normals is None:
        raise ValueError("FPFH requires normals")
    n = len(cloud)
    spfh = np.zeros((n, 3 * _N_BINS))
    if n == 0:
        return spfh
    valid = cloud.valid_normals if cloud.valid_normals is not None else np.ones(n, dtype=bool)
    tree = cKDTree(cloud.positions)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs):
        ok = valid[pairs[:, 0]] & valid[pairs[:, 1]]
        pairs = pairs[ok]
    counts = np.zeros(n)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        alpha, phi, theta = _pair_features(
            cloud.positions[i], cloud.normals[i], cloud.positions[j], cloud.normals[j])
        ia, ip, it = _bin_indices(alpha, phi, theta)
        for src in (i, j):
            np.add.at(spfh, (src, ia), 1.0)
            np.add.at(spfh, (src, _N_BINS + ip), 1.0)
            np.add.at(spfh, (src, 2 * _N_BINS + it), 1.0)
            np.add.at(counts, src, 1.0)
    # normalize each sub-histogram of the SPFH before weighting
    has = counts > 0
    spfh[has] /= counts[has, None]

    fpfh = spfh.copy()
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        dist = np.linalg.norm(cloud.positions[i] - cloud.positions[j], axis=1)
        dist = np.maximum(dist, 1e-12)
        inv = 1.0 / dist
        acc = np.zeros_like(spfh)
        wsum = np.zeros(n)
        np.add.at(acc, i, spfh[j] * inv[:, None])
        np.add.at(acc, j, spfh[i] * inv[:, None])
        np.add.at(wsum, i, inv)
        np.add.at(wsum, j, inv)
        contrib = wsum > 0
        fpfh[contrib] += acc[contrib] / wsum[contrib, None]
    # percentage normalization per 11-bin sub-histogram
    for k in range(3):
        block = fpfh[:, k * _N_BINS:(k + 1) * _N_BINS]
        sums = block.sum(axis=1)
        nz = sums > 0
        block[nz] *= 100.0 / sums[nz, None]
    return fpfh


# ---------------------------------------------------------------------------
# Registration results

@dataclass
class RegistrationResult:
    transform: Pose
    fitness: float
    inlier_rmse: float
    correspondence_count: int
    failed: bool = False


@dataclass
class LoopConstraint:
    source_id: int
    target_id: int
    transform: Pose
    fitness: float
    inlier_rmse: float

    @property
    def translation_magnitude(self) -> float:
        return self.transform.translation_norm()


def _kabsch(src, tgt):
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    h = (src - cs).T @ (tgt - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose.from_rt(rot, ct - rot @ cs)


def _evaluate(src_pts, tgt_tree, transform: Pose, max_corr_dist: float, n_target: int):
    moved = transform.apply(src_pts)
    dist, _ = tgt_tree.query(moved, k=1)
    inlier = dist <= max_corr_dist
    count = int(inlier.sum())
    fitness = min(1.0, count / max(n_target, 1))
    rmse = float(np.sqrt(np.mean(dist[inlier] ** 2))) if count else 0.0
    return fitness, rmse, count


@dataclass
class RansacParams:
    max_iterations: int = 100000
    confidence: float = 0.95
    max_corr_dist: float = 0.075
    edge_length_ratio: float = 0.9
    seed: int = 0
    batch: int = 512
    mutual_filter: bool = True
    min_iterations: int = 1024


def global_registration(source: PointCloud, target: PointCloud,
                        src_feats: np.ndarray, tgt_feats: np.ndarray,
                        params: RansacParams) -> RegistrationResult:
    """RANSAC over 3-point feature correspondences with pruning checks.

    Correspondences come from nearest neighbors in FPFH space; candidate
    samples must pass edge-length-ratio and post-transform distance checks
    before a full inlier evaluation. Stops at max_iterations or when the
    confidence bound on having seen an all-inlier sample is met.
    """
    if len(source) == 0 or len(target) == 0:
        return RegistrationResult(Pose.identity(), 0.0, 0.0, 0, failed=True)
    feat_tree = cKDTree(tgt_feats)
    _, corr = feat_tree.query(src_feats, k=1)
    pool = np.arange(len(source))
    if params.mutual_filter and len(source) > 10 and len(target) > 10:
        _, back = cKDTree(src_feats).query(tgt_feats[corr], k=1)
        mutual = back == pool
        if mutual.sum() >= 10:
            pool = pool[mutual]
    src_pts = source.positions[pool]
    tgt_pts = target.positions[corr[pool]]
    tgt_tree = cKDTree(target.positions)
    n_src, n_tgt = len(pool), len(target)
    full_src = source.positions
    rng = np.random.default_rng(params.seed)

    best = RegistrationResult(Pose.identity(), 0.0, 0.0, 0, failed=True)
    best_pool_count = 0
    max_dist = params.max_corr_dist
    ratio = params.edge_length_ratio
    iters_done = 0
    needed = params.max_iterations
    while iters_done < min(max(needed, params.min_iterations), params.max_iterations):
        b = min(params.batch, params.max_iterations - iters_done)
        idx = rng.integers(0, n_src, size=(b, 3))
        iters_done += b
        ok = (idx[:, 0] != idx[:, 1]) & (idx[:, 1] != idx[:, 2]) & (idx[:, 0] != idx[:, 2])
        p = src_pts[idx]      # (b, 3, 3)
        q = tgt_pts[idx]
        # edge-length check: corresponding edge lengths must agree within ratio
        for a_i, b_i in ((0, 1), (1, 2), (0, 2)):
            ep = np.linalg.norm(p[:, a_i] - p[:, b_i], axis=1)
            eq = np.linalg.norm(q[:, a_i] - q[:, b_i], axis=1)
            lo = np.minimum(ep, eq)
            hi = np.maximum(ep, eq)
            ok &= (hi > 1e-12) & (lo >= ratio * hi)
        for ci in np.nonzero(ok)[0]:
            transform = _kabsch(p[ci], q[ci])
            # distance check on the sample correspondences
            if np.any(np.linalg.norm(transform.apply(p[ci]) - q[ci], axis=1) > max_dist):
                continue
            # cheap screen: inliers among the putative correspondences
            pool_count = int(np.sum(np.linalg.norm(
                transform.apply(src_pts) - tgt_pts, axis=1) <= max_dist))
            if pool_count <= best_pool_count:
                continue
            fitness, rmse, count = _evaluate(full_src, tgt_tree, transform, max_dist, n_tgt)
            if count > best.correspondence_count or (
                    count == best.correspondence_count and rmse < best.inlier_rmse):
                best = RegistrationResult(transform, fitness, rmse, count, failed=False)
                best_pool_count = pool_count
                w = pool_count / n_src
                if w >= 1.0:
                    needed = 0
                elif w > 0:
                    needed = int(np.ceil(np.log(max(1e-12, 1.0 - params.confidence))
                                         / np.log(1.0 - w ** 3)))
        if iters_done >= max(needed, params.min_iterations):
            break
    return best


def icp_point_to_plane(source: PointCloud, target: PointCloud, init: Pose,
                       max_corr_dist: float, max_iterations: int = 30,
                       rel_tol: float = 1e-6) -> RegistrationResult:
    """Gauss-Newton point-to-plane ICP with per-iteration re-association.

    Steps that would increase the inlier RMSE are backtracked and, failing
    that, rejected, so the reported RMSE is non-increasing over iterations.
    """
    if target.normals is None:
        raise ValueError("target normals required")
    valid = target.valid_normals if target.valid_normals is not None else np.ones(len(target), dtype=bool)
    tgt = target.select(np.nonzero(valid)[0])
    if len(tgt) == 0 or len(source) == 0:
        raise ValueError("empty cloud in ICP")
    tree = cKDTree(tgt.positions)

    def associate(transform):
        moved = transform.apply(source.positions)
        dist, nn = tree.query(moved, k=1)
        mask = dist <= max_corr_dist
        count = int(mask.sum())
        rmse = float(np.sqrt(np.mean(dist[mask] ** 2))) if count else 0.0
        return moved, nn, mask, count, rmse

    transform = init
    moved, nn, mask, count, rmse = associate(transform)
    if count < 6:
        raise ValueError("under-determined: fewer than 6 ICP correspondences")
    fitness = min(1.0, count / len(tgt))
    for _ in range(max_iterations):
        p = moved[mask]
        q = tgt.positions[nn[mask]]
        n = tgt.normals[nn[mask]]
        r = np.sum((p - q) * n, axis=1)
        # J row: [cross(p, n), n] for increment [omega, v], residual n.(p - q)
        jac = np.concatenate([np.cross(p, n), n], axis=1)
        h = jac.T @ jac
        g = jac.T @ r
        try:
            delta = np.linalg.solve(h + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        step = 1.0
        for _ in range(6):
            cand = se3_exp(step * delta).compose(transform)
            c_moved, c_nn, c_mask, c_count, c_rmse = associate(cand)
            better = c_count > count or (c_count >= count and c_rmse <= rmse + 1e-9)
            if c_count >= 6 and better:
                new = (cand, c_moved, c_nn, c_mask, c_count, c_rmse)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        transform, moved, nn, mask, count, new_rmse = new
        new_fitness = min(1.0, count / len(tgt))
        converged = (abs(new_fitness - fitness) < rel_tol
                     and abs(new_rmse - rmse) < rel_tol * max(rmse, 1e-12))
        fitness, rmse = new_fitness, new_rmse
        if converged:
            break
    return RegistrationResult(transform, fitness, rmse, count, failed=False)


@dataclass
class CoarseToFineParams:
    coarse_voxel: float = 0.05
    fine_voxel: float = 0.01
    normal_radius_factor: float = 2.0
    fpfh_radius_factor: float = 5.0
    coarse_corr_factor: float = 1.5
    fine_corr_factor: float = 2.0
    ransac: RansacParams = field(default_factory=RansacParams)
    min_fitness: float = 0.1

    @property
    def fine_corr_dist(self) -> float:
        return self.fine_corr_factor * self.fine_voxel


def compute_loop_constraint(source_surface: PointCloud, target_surface: PointCloud,
                            params: CoarseToFineParams,
                            source_id: int = 0, target_id: int = 0) -> LoopConstraint:
    """Coarse-to-fine alignment of two fused submap surfaces.

    Downsampled FPFH + RANSAC gives the coarse transform; full-resolution
    point-to-plane ICP refines it. Any stage failure yields fitness 0.
    """
    cv = params.coarse_voxel
    src_coarse = voxel_downsample(source_surface, cv)
    tgt_coarse = voxel_downsample(target_surface, cv)
    # keep orientation-consistent surface normals when carried through the
    # downsample; sign-ambiguous re-estimation would corrupt FPFH matching
    nr = params.normal_radius_factor * cv
    if src_coarse.normals is None:
        src_coarse = estimate_normals(src_coarse, nr)
    if tgt_coarse.normals is None:
        tgt_coarse = estimate_normals(tgt_coarse, nr)
    fr = params.fpfh_radius_factor * cv
    src_feats = compute_fpfh(src_coarse, fr)
    tgt_feats = compute_fpfh(tgt_coarse, fr)
    ransac = RansacParams(**{**params.ransac.__dict__,
                             "max_corr_dist": params.coarse_corr_factor * cv})
    coarse = global_registration(src_coarse, tgt_coarse, src_feats, tgt_feats, ransac)
    if coarse.failed or coarse.fitness <= 0:
        return LoopConstraint(source_id, target_id, Pose.identity(), 0.0, 0.0)
    tgt_fine = target_surface
    if tgt_fine.normals is None:
        tgt_fine = estimate_normals(tgt_fine, nr)
    try:
        # bridge the coarse->fine association gap before the tight pass
        mid = icp_point_to_plane(source_surface, tgt_fine, coarse.transform,
                                 params.coarse_corr_factor * cv, max_iterations=15)
        fine = icp_point_to_plane(source_surface, tgt_fine, mid.transform,
                                  params.fine_corr_dist)
    except ValueError:
        return LoopConstraint(source_id, target_id, Pose.identity(), 0.0, 0.0)
    if fine.failed:
        return LoopConstraint(source_id, target_id, Pose.identity(), 0.0, 0.0)
    return LoopConstraint(source_id, target_id, fine.transform, fine.fitness, fine.inlier_rmse)


def prefilter_loop_edges(constraints, sigma_min: float, f_min: float):
    """Drop low-fitness edges, then cut by translation-magnitude percentile.

    Scans percentile cuts from 100 down in steps of 5 and picks the first
    whose surviving magnitudes have standard deviation below ``sigma_min``;
    that percentile value becomes t_min. Returns (kept, t_min).
    """
    kept = [c for c in constraints if c.fitness >= f_min]
    if not kept:
        return [], float("inf")
    mags = np.array([c.translation_magnitude for c in kept])
    t_min = float("inf")
    for p in range(100, -1, -5):
        cut = float(np.percentile(mags, p))
        remaining = mags[mags <= cut]
        if len(remaining) == 0:
            continue
        if float(np.std(remaining)) < sigma_min:
            t_min = cut
            break
    return [c for c in kept if c.translation_magnitude <= t_min], t_min
