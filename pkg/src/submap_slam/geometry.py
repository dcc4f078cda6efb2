"""SE(3) poses, twists, trajectories, Horn alignment and ATE metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


class InsufficientDataError(ValueError):
    pass


def _normalized_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign: w >= 0
    if q[3] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform stored as unit quaternion (x, y, z, w) + translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", _normalized_quat(self.quat))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        q = Rotation.from_matrix(m[:3, :3]).as_quat()
        return Pose(q, m[:3, 3])

    @staticmethod
    def from_rt(rotation_matrix, translation) -> "Pose":
        q = Rotation.from_matrix(np.asarray(rotation_matrix, dtype=np.float64)).as_quat()
        return Pose(q, translation)

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other (apply other first, then self)."""
        ra = Rotation.from_quat(self.quat)
        rb = Rotation.from_quat(other.quat)
        return Pose((ra * rb).as_quat(), ra.apply(other.t) + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = Rotation.from_quat(self.quat).inv()
        return Pose(rinv.as_quat(), -rinv.apply(self.t))

    def apply(self, points) -> np.ndarray:
        """Transform one point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return Rotation.from_quat(self.quat).apply(p) + self.t

    def rotate(self, vectors) -> np.ndarray:
        """Rotate vectors without translating (for normals)."""
        return Rotation.from_quat(self.quat).apply(np.asarray(vectors, dtype=np.float64))

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        return float(np.linalg.norm(Rotation.from_quat(self.quat).as_rotvec()))

    def translation_norm(self) -> float:
        return float(np.linalg.norm(self.t))

    def is_close(self, other: "Pose", rot_tol=1e-9, trans_tol=1e-9) -> bool:
        d = self.inverse().compose(other)
        return d.rotation_angle() <= rot_tol and d.translation_norm() <= trans_tol


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def se3_exp(xi) -> Pose:
    """Exponential map from a 6-twist (rx, ry, rz, tx, ty, tz) to a Pose.

    Rotation follows Rodrigues' formula; translation is coupled through
    the left Jacobian V so that exp is the true SE(3) exponential.
    """
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    r, v = xi[:3], xi[3:]
    theta = np.linalg.norm(r)
    rot = Rotation.from_rotvec(r)
    if theta < 1e-10:
        vmat = np.eye(3) + 0.5 * _skew(r)
    else:
        k = _skew(r)
        vmat = (
            np.eye(3)
            + (1.0 - math.cos(theta)) / theta**2 * k
            + (theta - math.sin(theta)) / theta**3 * (k @ k)
        )
    return Pose(rot.as_quat(), vmat @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp; valid for rotation magnitude < pi."""
    r = Rotation.from_quat(pose.quat).as_rotvec()
    theta = np.linalg.norm(r)
    if theta < 1e-10:
        vinv = np.eye(3) - 0.5 * _skew(r)
    else:
        k = _skew(r)
        half = 0.5 * theta
        cot = half / math.tan(half)
        vinv = np.eye(3) - 0.5 * k + (1.0 - cot) / theta**2 * (k @ k)
    return np.concatenate([r, vinv @ pose.t])


@dataclass
class Trajectory:
    """Ordered (frame id, timestamp, Pose) triples with unique ids."""

    frame_ids: list
    timestamps: list
    poses: list

    def __post_init__(self):
        if len({*self.frame_ids}) != len(self.frame_ids):
            raise ValueError("duplicate frame ids")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frame_ids)

    def translations(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def transformed(self, transform: Pose) -> "Trajectory":
        return Trajectory(
            list(self.frame_ids),
            list(self.timestamps),
            [transform.compose(p) for p in self.poses],
        )


def horn_align(source: Trajectory, target: Trajectory):
    """Closed-form rigid transform mapping source translations onto target's.

    Returns (Pose, degenerate_flag). The flag is set when the points are
    (near-)collinear, in which case the rotation is not unique but the
    least-squares solution is still returned.
    """
    if len(source) < 3 or len(target) < 3:
        raise InsufficientDataError("horn_align needs at least 3 pose pairs")
    if len(source) != len(target):
        raise InsufficientDataError("trajectories must pair by index")
    a = source.translations()
    b = target.translations()
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    degenerate = bool(s[1] <= 1e-12 * max(s[0], 1e-300))
    t = cb - rot @ ca
    return Pose.from_rt(rot, t), degenerate


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory, align: bool = True) -> float:
    """Root-mean-square translational error, optionally after Horn alignment.

    Pairs are matched by frame id; the id sets must be identical.
    """
    if set(estimated.frame_ids) != set(ground_truth.frame_ids):
        raise ValueError("frame id sets differ")
    order = {fid: i for i, fid in enumerate(ground_truth.frame_ids)}
    idx = [order[fid] for fid in estimated.frame_ids]
    est = estimated.translations()
    gt = ground_truth.translations()[idx]
    if align:
        transform, _ = horn_align(estimated, Trajectory(
            list(estimated.frame_ids),
            list(estimated.timestamps),
            [ground_truth.poses[i] for i in idx],
        ))
        est = transform.apply(est)
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


def write_trajectory(path, traj: Trajectory) -> None:
    """TUM convention: 'timestamp tx ty tz qx qy qz qw', 6 decimals."""
    with open(path, "w") as f:
        for ts, pose in zip(traj.timestamps, traj.poses):
            vals = [ts, *pose.t, *pose.quat]
            f.write(" ".join(f"{v:.6f}" for v in vals) + "\n")


def read_trajectory(path) -> Trajectory:
    ids, stamps, poses = [], [], []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise ValueError(f"bad trajectory line: {line!r}")
            ids.append(i)
            stamps.append(vals[0])
            poses.append(Pose(vals[4:8], vals[1:4]))
    return Trajectory(ids, stamps, poses)
