"""legvio: fixed-lag factor-graph odometry for legged robots.

Fuses preintegrated inertial measurements, tightly-coupled visual landmark
observations, and leg-odometry relative-pose constraints in a sliding-window
smoother. Ships with a synthetic dataset simulator and ATE/RPE evaluation
tooling; see the ``legvio`` CLI (``simulate``, ``run``, ``eval``).
"""

from .geometry import Pose3, Rotation3, pose_interpolate, se3_lift, se3_retract, so3_exp, so3_log

__version__ = "0.1.0"

__all__ = [
    "Pose3",
    "Rotation3",
    "pose_interpolate",
    "se3_lift",
    "se3_retract",
    "so3_exp",
    "so3_log",
    "__version__",
]
