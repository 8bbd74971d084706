"""Relative-pose constraints from the external kinematic-inertial filter.

The filter stream is consumed as timestamped poses with covariance; only
relative motion between keyframe times enters the graph, which makes the
constraint immune to drift of the filter's own world frame. Zero-velocity
constraints reuse the same residual with the identity as the measured
relative pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    Pose3,
    se3_lift,
    skew,
    so3_right_jacobian_inv,
)
from .sensors import LegOdomHistory, interpolate_leg_odom
from .state import NavState

# Tight by design: a fired zero-velocity constraint should pin the pair.
ZERO_VELOCITY_SIGMA_ROT = 1e-3   # rad
ZERO_VELOCITY_SIGMA_POS = 1e-3   # m
COVARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class RelativePoseMeasurement:
    """Measured relative pose between two consecutive keyframes."""

    keyframes: tuple[int, int]
    relative_pose: Pose3
    covariance: np.ndarray          # 6x6 over (rotation, translation)
    kind: str = "leg_odom"          # leg_odom | zero_velocity

    def __post_init__(self):
        if self.keyframes[1] != self.keyframes[0] + 1:
            raise ValueError("relative pose links consecutive keyframes")
        cov = 0.5 * (self.covariance + self.covariance.T)
        if np.min(np.linalg.eigvalsh(cov)) <= 0.0:
            raise ValueError("relative pose covariance must be SPD")
        object.__setattr__(self, "covariance", cov)


def make_leg_odom_measurement(history: LegOdomHistory, k_prev: int,
                              t_prev: float, t_curr: float
                              ) -> RelativePoseMeasurement:
    """Interpolate the filter at both keyframe times and form the relative
    constraint.

    The filter reports per-pose covariance; the relative covariance uses
    the independence approximation (sum of both endpoints) with a small
    diagonal floor.
    """
    pose_a, cov_a = interpolate_leg_odom(history, t_prev)
    pose_b, cov_b = interpolate_leg_odom(history, t_curr)
    rel = pose_a.inverse() @ pose_b
    cov = cov_a + cov_b + COVARIANCE_FLOOR * np.eye(6)
    return RelativePoseMeasurement((k_prev, k_prev + 1), rel, cov, "leg_odom")


def zero_velocity_measurement(k_prev: int) -> RelativePoseMeasurement:
    cov = np.diag([ZERO_VELOCITY_SIGMA_ROT ** 2] * 3
                  + [ZERO_VELOCITY_SIGMA_POS ** 2] * 3)
    return RelativePoseMeasurement((k_prev, k_prev + 1), Pose3.identity(),
                                   cov, "zero_velocity")


def relative_pose_residual(x_prev: NavState, x_curr: NavState,
                           meas: RelativePoseMeasurement):
    """Lifted discrepancy between estimated and measured relative pose.

    Returns the 6-vector (rotation, translation) residual and its Jacobians
    w.r.t. the 15-dim local perturbations of both states (velocity and bias
    columns are zero).
    """
    R_a = x_prev.rotation
    R_b = x_curr.rotation
    R_m = meas.relative_pose.rotation
    t_m = meas.relative_pose.translation

    # E = (T_prev^-1 T_curr)^-1 * T_meas = T_curr^-1 T_prev T_meas
    E_rot = R_b.inverse() @ R_a @ R_m
    s = R_a.rotate(t_m) + x_prev.position - x_curr.position
    E_trans = R_b.inverse().rotate(s)
    r = np.empty(6)
    r[:3] = E_rot.log()
    r[3:] = E_trans

    Jr_inv = so3_right_jacobian_inv(r[:3])
    J_prev = np.zeros((6, 15))
    J_curr = np.zeros((6, 15))

    J_prev[0:3, 0:3] = Jr_inv @ R_m.matrix().T
    J_curr[0:3, 0:3] = -Jr_inv @ E_rot.matrix().T

    R_b_T = R_b.matrix().T
    J_prev[3:6, 0:3] = -R_b_T @ R_a.matrix() @ skew(t_m)
    J_prev[3:6, 3:6] = R_b_T
    J_curr[3:6, 0:3] = skew(E_trans)
    J_curr[3:6, 3:6] = -R_b_T
    return r, J_prev, J_curr
