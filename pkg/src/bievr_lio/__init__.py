"""Bump-image voxel map LiDAR-inertial odometry."""
from .geometry import ImuData, Scan, SE3Pose, exp_se3, log_se3

__version__ = "0.1.0"

__all__ = ["ImuData", "Scan", "SE3Pose", "exp_se3", "log_se3", "__version__"]
