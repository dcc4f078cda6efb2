"""Submap-based dense RGB-D SLAM backend with loop closure and robust PGO."""

from .geometry import Pose, Trajectory, ate_rmse, horn_align, se3_exp, se3_log
from .pointcloud import PointCloud, SpatialIndex

__all__ = [
    "Pose", "Trajectory", "ate_rmse", "horn_align", "se3_exp", "se3_log",
    "PointCloud", "SpatialIndex",
]

__version__ = "0.1.0"
