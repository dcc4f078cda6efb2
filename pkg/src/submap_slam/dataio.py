"""TUM-RGBD ingestion, synthetic RGB-D sequence generation, reconstruction metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .fusion import Intrinsics
from .geometry import Pose, Trajectory
from .pointcloud import PointCloud
from .tracking import Frame

DEPTH_SCALE = 5000.0  # TUM convention: 16-bit value / 5000 = meters
ASSOC_TOLERANCE = 0.02

TUM_DEFAULT_INTRINSICS = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


# ---------------------------------------------------------------------------
# TUM-RGBD reading/writing

def _read_index(path):
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            entries.append((float(parts[0]), parts[1]))
    return entries


def _associate(stamps_a, stamps_b, tol):
    """Greedy nearest-timestamp association within tol; returns index pairs."""
    pairs = []
    used = set()
    b = np.asarray(stamps_b)
    for i, ta in enumerate(stamps_a):
        if len(b) == 0:
            break
        j = int(np.argmin(np.abs(b - ta)))
        if abs(b[j] - ta) <= tol and j not in used:
            pairs.append((i, j))
            used.add(j)
    return pairs


@dataclass
class SequenceData:
    frames: list
    ground_truth: Trajectory | None
    odometry: Trajectory | None
    dropped: int
    intrinsics: Intrinsics


def _read_intrinsics(directory) -> Intrinsics:
    path = os.path.join(directory, "intrinsics.txt")
    if not os.path.exists(path):
        return TUM_DEFAULT_INTRINSICS
    vals = {}
    with open(path) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                vals[k.strip()] = float(v)
    return Intrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"],
                      int(vals["width"]), int(vals["height"]))


def _read_pose_file(path) -> Trajectory | None:
    if not os.path.exists(path):
        return None
    ids, stamps, poses = [], [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            ids.append(len(ids))
            stamps.append(v[0])
            poses.append(Pose(v[4:8], v[1:4]))
    return Trajectory(ids, stamps, poses)


def read_tum_sequence(directory) -> SequenceData:
    """Load a TUM-RGBD-layout sequence, associating rgb/depth/gt by timestamp."""
    rgb_index = os.path.join(directory, "rgb.txt")
    depth_index = os.path.join(directory, "depth.txt")
    if not os.path.exists(rgb_index) or not os.path.exists(depth_index):
        raise FileNotFoundError("missing rgb.txt or depth.txt index")
    rgb = _read_index(rgb_index)
    depth = _read_index(depth_index)
    pairs = _associate([t for t, _ in rgb], [t for t, _ in depth], ASSOC_TOLERANCE)
    dropped = len(rgb) - len(pairs)
    intr = _read_intrinsics(directory)

    gt = _read_pose_file(os.path.join(directory, "groundtruth.txt"))
    odom = _read_pose_file(os.path.join(directory, "odometry.txt"))

    frames = []
    gt_ids, gt_stamps, gt_poses = [], [], []
    odo_poses = []
    for i, j in pairs:
        ts = rgb[i][0]
        img = cv2.imread(os.path.join(directory, rgb[i][1]), cv2.IMREAD_COLOR)
        dimg = cv2.imread(os.path.join(directory, depth[j][1]), cv2.IMREAD_UNCHANGED)
        if img is None or dimg is None:
            dropped += 1
            continue
        d = dimg.astype(np.float64) / DEPTH_SCALE
        gray = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
        fid = len(frames)
        frames.append(Frame(fid, ts, d, gray, intr, color=img[..., ::-1]))
        if gt is not None:
            stamps = np.asarray(gt.timestamps)
            k = int(np.argmin(np.abs(stamps - ts)))
            if abs(stamps[k] - ts) <= ASSOC_TOLERANCE:
                gt_ids.append(fid)
                gt_stamps.append(ts)
                gt_poses.append(gt.poses[k])
        if odom is not None:
            stamps = np.asarray(odom.timestamps)
            k = int(np.argmin(np.abs(stamps - ts)))
            odo_poses.append(odom.poses[k])
    gt_traj = Trajectory(gt_ids, gt_stamps, gt_poses) if gt is not None and gt_ids else None
    odo_traj = None
    if odom is not None and odo_poses:
        odo_traj = Trajectory([f.id for f in frames], [f.timestamp for f in frames], odo_poses)
    return SequenceData(frames, gt_traj, odo_traj, dropped, intr)


def write_tum_sequence(directory, frames, ground_truth: Trajectory | None = None,
                       odometry: Trajectory | None = None,
                       intrinsics: Intrinsics | None = None) -> None:
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines, depth_lines = [], []
    for f in frames:
        name = f"{f.timestamp:.6f}.png"
        gray = f.gray
        if gray.dtype != np.uint8:
            gray = np.clip(gray * 255.0 if gray.max() <= 1.0 else gray, 0, 255).astype(np.uint8)
        cv2.imwrite(os.path.join(directory, "rgb", name), gray)
        d16 = np.clip(np.round(f.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
        cv2.imwrite(os.path.join(directory, "depth", name), d16)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
    with open(os.path.join(directory, "rgb.txt"), "w") as fh:
        fh.write("\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w") as fh:
        fh.write("\n".join(depth_lines) + "\n")
    intr = intrinsics or frames[0].intrinsics
    with open(os.path.join(directory, "intrinsics.txt"), "w") as fh:
        for k, v in [("fx", intr.fx), ("fy", intr.fy), ("cx", intr.cx),
                     ("cy", intr.cy), ("width", intr.width), ("height", intr.height)]:
            fh.write(f"{k} = {v}\n")
    from .geometry import write_trajectory
    if ground_truth is not None:
        write_trajectory(os.path.join(directory, "groundtruth.txt"), ground_truth)
    if odometry is not None:
        write_trajectory(os.path.join(directory, "odometry.txt"), odometry)


# ---------------------------------------------------------------------------
# Synthetic scene generation

@dataclass
class SyntheticSceneSpec:
    room: tuple = (3.0, 3.0, 2.2)          # width (x), depth (y), height (z)
    texture_cell: float = 0.12
    n_clutter: int = 12
    waypoints: list | None = None            # closed loop; default square
    n_frames: int = 96
    fps: float = 10.0
    depth_sigma: float = 0.0
    drift_rot_deg: float = 0.0              # per-frame rotational bias about z
    drift_trans: float = 0.0                # per-frame translational bias (x, camera frame)
    width: int = 120
    height: int = 90
    focal: float = 60.0
    look_dir: tuple = (0.0, 1.0, 0.0)        # fixed horizontal view direction
    look_at: tuple | None = None             # world point to face (overrides look_dir)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2.0,
                          (self.height - 1) / 2.0, self.width, self.height)

    def default_waypoints(self):
        w, d, _ = self.room
        cx, cy = w / 2.0, d / 2.0
        r = 0.25 * min(w, d)
        return [(cx - r, cy - r), (cx + r, cy - r), (cx + r, cy + r),
                (cx - r, cy + r), (cx - r, cy - r)]


def _look_dir_pose(position, direction) -> Pose:
    """World-from-camera pose: z forward along direction, y down (world -z up)."""
    f = np.asarray(direction, dtype=np.float64)
    f = f / np.linalg.norm(f)
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    rot = np.stack([x, y, f], axis=1)
    return Pose.from_rt(rot, position)


def _cell_gray(face, i, j, seed):
    """Deterministic pseudo-random gray level per texture cell."""
    with np.errstate(over="ignore"):
        h = (np.uint64(np.uint64(face) * np.uint64(0x9E3779B97F4A7C15))
             ^ (i.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9))
             ^ (j.astype(np.uint64) * np.uint64(0x94D049BB133111EB))
             ^ np.uint64((seed * 0x2545F4914F6CDD1D) & 0xFFFFFFFFFFFFFFFF))
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
    return 0.15 + 0.7 * (h % np.uint64(4096)).astype(np.float64) / 4096.0


class SyntheticScene:
    """Axis-aligned room with clutter boxes; exact ray-cast depth and texture."""

    def __init__(self, spec: SyntheticSceneSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        w, d, h = spec.room
        self.room_lo = np.zeros(3)
        self.room_hi = np.array([w, d, h])
        self.boxes = []
        # keep clutter clear of the default square camera ring so the sensor
        # never starts inside a box
        cx, cy = 0.5 * w, 0.5 * d
        ring_r = 0.25 * min(w, d)
        margin = 0.30
        for _ in range(spec.n_clutter):
            for _attempt in range(200):
                size = rng.uniform([0.25, 0.25, 0.3], [0.6, 0.6, 1.0])
                lo = np.array([rng.uniform(0.12, w - 0.12 - size[0]),
                               rng.uniform(0.12, d - 0.12 - size[1]), 0.0])
                hi = lo + size
                dx = (0.0 if lo[0] <= cx <= hi[0]
                      else min(abs(lo[0] - cx), abs(hi[0] - cx)))
                dy = (0.0 if lo[1] <= cy <= hi[1]
                      else min(abs(lo[1] - cy), abs(hi[1] - cy)))
                dmin = max(dx, dy)
                dmax = max(max(abs(lo[0] - cx), abs(hi[0] - cx)),
                           max(abs(lo[1] - cy), abs(hi[1] - cy)))
                if dmax < ring_r - margin or dmin > ring_r + margin:
                    self.boxes.append((lo, hi))
                    break

    def _ray_depth(self, origin, dirs):
        """First-hit parameter t per ray (room interior walls and clutter)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            # exit of room box (origin inside)
            t1 = (self.room_lo - origin) * inv
            t2 = (self.room_hi - origin) * inv
            t_room = np.min(np.maximum(t1, t2), axis=-1)
            best = t_room.copy()
            for lo, hi in self.boxes:
                a = (lo - origin) * inv
                b = (hi - origin) * inv
                t_near = np.max(np.minimum(a, b), axis=-1)
                t_far = np.min(np.maximum(a, b), axis=-1)
                hit = (t_near <= t_far) & (t_near > 1e-9)
                best = np.where(hit & (t_near < best), t_near, best)
        return best

    def _shade(self, points):
        """Texture gray at surface points: random cell gray keyed by position."""
        cell = self.spec.texture_cell
        i = np.floor(points[..., 0] / cell).astype(np.int64)
        j = np.floor(points[..., 1] / cell).astype(np.int64)
        k = np.floor(points[..., 2] / cell).astype(np.int64)
        # fold the three cell indices into two to key the hash
        return _cell_gray(7, i * np.int64(73856093) ^ k, j * np.int64(19349663) ^ k,
                          self.seed)

    def render(self, pose: Pose, intr: Intrinsics, noise_rng=None):
        """Exact depth (z along optical axis) and procedural grayscale image."""
        rays_cam = intr.pixel_rays()
        dirs = pose.rotate(rays_cam.reshape(-1, 3)).reshape(rays_cam.shape)
        t = self._ray_depth(pose.t, dirs)
        depth = t  # camera-frame z equals t because ray z-component is 1
        points = pose.t + dirs * t[..., None]
        gray = self._shade(points)
        if noise_rng is not None and self.spec.depth_sigma > 0:
            depth = depth + noise_rng.normal(0.0, self.spec.depth_sigma, depth.shape)
            depth = np.maximum(depth, 1e-3)
        return depth, gray

    def ground_truth_poses(self):
        spec = self.spec
        wps = spec.waypoints or spec.default_waypoints()
        wps = np.asarray(wps, dtype=np.float64)
        seg = np.linalg.norm(np.diff(wps, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        z = 0.45 * spec.room[2]
        poses = []
        for i in range(spec.n_frames):
            s = total * i / max(spec.n_frames - 1, 1)
            k = int(np.searchsorted(cum, s, side="right")) - 1
            k = min(k, len(seg) - 1)
            frac = (s - cum[k]) / max(seg[k], 1e-12)
            xy = wps[k] + frac * (wps[k + 1] - wps[k])
            position = np.array([xy[0], xy[1], z])
            if spec.look_at is not None:
                direction = np.asarray(spec.look_at, dtype=np.float64) - position
            else:
                direction = np.asarray(spec.look_dir, dtype=np.float64)
            poses.append(_look_dir_pose(position, direction))
        return poses

    def surface_cloud(self, n: int = 40000, seed: int = 0) -> PointCloud:
        """Uniform samples of the true visible geometry (walls + clutter)."""
        rng = np.random.default_rng(seed)
        faces = []
        lo, hi = self.room_lo, self.room_hi
        # room interior faces
        for axis in range(3):
            for side, val in ((0, lo[axis]), (1, hi[axis])):
                faces.append(("room", axis, val, lo, hi))
        for blo, bhi in self.boxes:
            for axis in range(3):
                for val in (blo[axis], bhi[axis]):
                    faces.append(("box", axis, val, blo, bhi))
        areas = []
        for _, axis, _, flo, fhi in faces:
            other = [i for i in range(3) if i != axis]
            areas.append((fhi[other[0]] - flo[other[0]]) * (fhi[other[1]] - flo[other[1]]))
        areas = np.asarray(areas)
        counts = rng.multinomial(n, areas / areas.sum())
        pts = []
        for (kind, axis, val, flo, fhi), c in zip(faces, counts):
            if c == 0:
                continue
            p = rng.uniform(flo, fhi, size=(c, 3))
            p[:, axis] = val
            pts.append(p)
        return PointCloud(np.concatenate(pts))


def generate_synthetic(spec: SyntheticSceneSpec, seed: int = 0):
    """Render a full sequence; returns (frames, gt_trajectory, odom_trajectory, scene)."""
    scene = SyntheticScene(spec, seed)
    intr = spec.intrinsics()
    noise_rng = np.random.default_rng(seed + 1)
    gt_poses = scene.ground_truth_poses()
    frames = []
    for i, pose in enumerate(gt_poses):
        depth, gray = scene.render(pose, intr, noise_rng)
        frames.append(Frame(i, i / spec.fps, depth, gray, intr,
                            color=np.repeat(gray[..., None], 3, axis=2)))
    stamps = [f.timestamp for f in frames]
    ids = [f.id for f in frames]
    gt = Trajectory(ids, stamps, gt_poses)

    odom = None
    if spec.drift_rot_deg > 0 or spec.drift_trans > 0:
        bias = Pose(Rotation.from_euler("z", spec.drift_rot_deg, degrees=True).as_quat(),
                    [spec.drift_trans, 0.0, 0.0])
        poses = [gt_poses[0]]
        for i in range(1, len(gt_poses)):
            rel = gt_poses[i - 1].inverse().compose(gt_poses[i])
            poses.append(poses[-1].compose(rel.compose(bias)))
        odom = Trajectory(ids, stamps, poses)
    return frames, gt, odom, scene


# ---------------------------------------------------------------------------
# Reconstruction metrics

@dataclass
class ReconMetrics:
    precision: float
    recall: float
    f1: float
    tau: float


def _icp_point_to_point(source: np.ndarray, target: np.ndarray, iterations=20,
                        max_dist=0.05) -> Pose:
    tree = cKDTree(target)
    transform = Pose.identity()
    for _ in range(iterations):
        moved = transform.apply(source)
        dist, nn = tree.query(moved, k=1)
        mask = dist <= max_dist
        if mask.sum() < 3:
            break
        src = moved[mask]
        tgt = target[nn[mask]]
        cs, ct = src.mean(axis=0), tgt.mean(axis=0)
        h = (src - cs).T @ (tgt - ct)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        step = Pose.from_rt(rot, ct - rot @ cs)
        transform = step.compose(transform)
        if step.rotation_angle() < 1e-10 and step.translation_norm() < 1e-12:
            break
    return transform


def f_score(predicted: PointCloud, ground_truth: PointCloud, tau: float = 0.01,
            pre_align: bool = False) -> ReconMetrics:
    """Precision/recall/F1 (percent) at distance threshold tau."""
    if len(predicted) == 0 or len(ground_truth) == 0:
        raise ValueError("empty cloud")
    pred = predicted.positions
    if pre_align:
        pred = _icp_point_to_point(pred, ground_truth.positions, max_dist=5 * tau).apply(pred)
    d_pred, _ = cKDTree(ground_truth.positions).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(ground_truth.positions, k=1)
    precision = 100.0 * float(np.mean(d_pred <= tau))
    recall = 100.0 * float(np.mean(d_gt <= tau))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ReconMetrics(precision, recall, f1, tau)
