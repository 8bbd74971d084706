"""IMU preintegration between keyframes and the associated residual.

Measurements are compounded with the usual forward scheme: exact exponential
on the rotation, first-order Euler on velocity and position, zero-order hold
between samples. Covariance is propagated through the linearized error state
(ordered rotation, position, velocity) and bias Jacobians are accumulated so
the residual can re-correct the delta when the bias estimate moves away from
the linearization point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Rotation3,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .sensors import ImuSlice
from .state import ImuBias, NavState

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time noise densities from an offline Allan analysis."""

    gyro_noise: float = 1.7e-4       # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3      # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9e-5        # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3       # m/s^3/sqrt(Hz)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    # Small extra position noise per step; keeps the 9x9 full rank even for
    # a single-sample delta where accel noise enters rank-deficiently.
    integration_noise: float = 1.0e-8

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "gravity",
                           np.asarray(self.gravity, dtype=float))


@dataclass
class PreintegratedImuDelta:
    """Compounded IMU motion between two keyframes at a fixed bias."""

    delta_R: Rotation3
    delta_p: np.ndarray
    delta_v: np.ndarray
    dt_total: float
    covariance: np.ndarray          # 9x9 over (rotation, position, velocity)
    dR_dbg: np.ndarray
    dp_dbg: np.ndarray
    dp_dba: np.ndarray
    dv_dbg: np.ndarray
    dv_dba: np.ndarray
    bias_lin: ImuBias

    def corrected(self, bias: ImuBias):
        """First-order re-correction of (deltaR, deltaP, deltaV) at ``bias``."""
        db = bias - self.bias_lin
        dbg, dba = db[:3], db[3:]
        dR = self.delta_R @ so3_exp(self.dR_dbg @ dbg)
        dp = self.delta_p + self.dp_dbg @ dbg + self.dp_dba @ dba
        dv = self.delta_v + self.dv_dbg @ dbg + self.dv_dba @ dba
        return dR, dp, dv


def preintegrate(imu: ImuSlice, bias_lin: ImuBias,
                 noise: ImuNoiseModel) -> PreintegratedImuDelta:
    """Compound an integration plan into a single relative-motion delta."""
    if len(imu.samples) < 1:
        raise ValueError("need at least one integration interval")
    dts = np.asarray(imu.dts, dtype=float)
    if np.any(dts <= 0.0):
        raise ValueError("integration intervals must be positive")

    dR = Rotation3.identity()
    dp = np.zeros(3)
    dv = np.zeros(3)
    cov = np.zeros((9, 9))
    dR_dbg = np.zeros((3, 3))
    dp_dbg = np.zeros((3, 3))
    dp_dba = np.zeros((3, 3))
    dv_dbg = np.zeros((3, 3))
    dv_dba = np.zeros((3, 3))
    t_total = 0.0

    for sample, dt in zip(imu.samples, dts):
        w = sample.omega - bias_lin.gyro
        a = sample.accel - bias_lin.accel
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
            raise ValueError(f"non-finite IMU sample at t={sample.t}")

        Rk = dR.matrix()
        inc = w * dt
        R_inc = so3_exp(inc)
        Jr = so3_right_jacobian(inc)
        a_hat = skew(a)

        # Error-state transition, ordering (rotation, position, velocity).
        A = np.eye(9)
        A[0:3, 0:3] = R_inc.matrix().T
        A[3:6, 0:3] = -0.5 * Rk @ a_hat * dt * dt
        A[3:6, 6:9] = np.eye(3) * dt
        A[6:9, 0:3] = -Rk @ a_hat * dt

        Bg = np.zeros((9, 3))
        Bg[0:3, :] = Jr * dt
        Ba = np.zeros((9, 3))
        Ba[3:6, :] = 0.5 * Rk * dt * dt
        Ba[6:9, :] = Rk * dt

        sg2 = noise.gyro_noise ** 2 / dt
        sa2 = noise.accel_noise ** 2 / dt
        cov = A @ cov @ A.T + sg2 * (Bg @ Bg.T) + sa2 * (Ba @ Ba.T)
        cov[3:6, 3:6] += noise.integration_noise ** 2 * dt * np.eye(3)

        # Bias Jacobians use the pre-update delta; order matters.
        dp_dbg = dp_dbg + dv_dbg * dt - 0.5 * Rk @ a_hat @ dR_dbg * dt * dt
        dp_dba = dp_dba + dv_dba * dt - 0.5 * Rk * dt * dt
        dv_dbg = dv_dbg - Rk @ a_hat @ dR_dbg * dt
        dv_dba = dv_dba - Rk * dt
        dR_dbg = R_inc.matrix().T @ dR_dbg - Jr * dt

        dp = dp + dv * dt + 0.5 * Rk @ a * dt * dt
        dv = dv + Rk @ a * dt
        dR = dR @ R_inc
        t_total += dt

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImuDelta(dR, dp, dv, t_total, cov, dR_dbg, dp_dbg,
                                 dp_dba, dv_dbg, dv_dba, bias_lin)


def delta_compose(a: PreintegratedImuDelta,
                  b: PreintegratedImuDelta) -> PreintegratedImuDelta:
    """Chain two contiguous deltas built at the same bias point."""
    if np.any(a.bias_lin.vector() != b.bias_lin.vector()):
        raise ValueError("deltas linearized at different biases")
    Ra = a.delta_R.matrix()
    Tb = b.dt_total
    dR = a.delta_R @ b.delta_R
    dv = a.delta_v + Ra @ b.delta_v
    dp = a.delta_p + a.delta_v * Tb + Ra @ b.delta_p

    Rb_T = b.delta_R.matrix().T
    pb_hat = skew(b.delta_p)
    vb_hat = skew(b.delta_v)
    F = np.eye(9)
    F[0:3, 0:3] = Rb_T
    F[3:6, 0:3] = -Ra @ pb_hat
    F[3:6, 6:9] = np.eye(3) * Tb
    F[6:9, 0:3] = -Ra @ vb_hat
    G = np.eye(9)
    G[3:6, 3:6] = Ra
    G[6:9, 6:9] = Ra
    cov = F @ a.covariance @ F.T + G @ b.covariance @ G.T

    dR_dbg = Rb_T @ a.dR_dbg + b.dR_dbg
    dv_dbg = a.dv_dbg - Ra @ vb_hat @ a.dR_dbg + Ra @ b.dv_dbg
    dv_dba = a.dv_dba + Ra @ b.dv_dba
    dp_dbg = (a.dp_dbg + a.dv_dbg * Tb - Ra @ pb_hat @ a.dR_dbg
              + Ra @ b.dp_dbg)
    dp_dba = a.dp_dba + a.dv_dba * Tb + Ra @ b.dp_dba

    return PreintegratedImuDelta(dR, dp, dv, a.dt_total + b.dt_total, cov,
                                 dR_dbg, dp_dbg, dp_dba, dv_dbg, dv_dba,
                                 a.bias_lin)


def predict_state(x_prev: NavState, delta: PreintegratedImuDelta,
                  gravity=GRAVITY) -> NavState:
    """Propagate a state through a delta (zero-residual inversion)."""
    g = np.asarray(gravity, dtype=float)
    dR, dp, dv = delta.corrected(x_prev.bias)
    dt = delta.dt_total
    R_prev = x_prev.rotation
    return NavState(
        R_prev @ dR,
        x_prev.position + x_prev.velocity * dt + 0.5 * g * dt * dt
        + R_prev.rotate(dp),
        x_prev.velocity + g * dt + R_prev.rotate(dv),
        x_prev.bias,
    )


def imu_residual(x_prev: NavState, x_curr: NavState,
                 delta: PreintegratedImuDelta, gravity=GRAVITY):
    """15-vector residual (rotation, position, velocity, bias) + Jacobians.

    Jacobians are with respect to the 15-dim local perturbations of the two
    states (see :meth:`NavState.retract`).
    """
    g = np.asarray(gravity, dtype=float)
    dt = delta.dt_total
    R_prev = x_prev.rotation
    R_prev_T = R_prev.matrix().T

    db = x_prev.bias - delta.bias_lin
    dbg = db[:3]
    bias_rot = delta.dR_dbg @ dbg
    dR_corr = delta.delta_R @ so3_exp(bias_rot)
    dp_corr = delta.delta_p + delta.dp_dbg @ dbg + delta.dp_dba @ db[3:]
    dv_corr = delta.delta_v + delta.dv_dbg @ dbg + delta.dv_dba @ db[3:]

    E = dR_corr.inverse() @ R_prev.inverse() @ x_curr.rotation
    r_R = so3_log(E)
    s_p = R_prev_T @ (x_curr.position - x_prev.position
                      - x_prev.velocity * dt - 0.5 * g * dt * dt)
    s_v = R_prev_T @ (x_curr.velocity - x_prev.velocity - g * dt)
    r = np.empty(15)
    r[0:3] = r_R
    r[3:6] = s_p - dp_corr
    r[6:9] = s_v - dv_corr
    r[9:15] = x_curr.bias - x_prev.bias

    Jr_inv = so3_right_jacobian_inv(r_R)
    E_T = E.matrix().T
    J_prev = np.zeros((15, 15))
    J_curr = np.zeros((15, 15))

    # rotation rows
    J_prev[0:3, 0:3] = -Jr_inv @ (x_curr.rotation.inverse() @ R_prev).matrix()
    J_prev[0:3, 9:12] = -Jr_inv @ E_T @ so3_right_jacobian(bias_rot) \
        @ delta.dR_dbg
    J_curr[0:3, 0:3] = Jr_inv

    # position rows
    J_prev[3:6, 0:3] = skew(s_p)
    J_prev[3:6, 3:6] = -R_prev_T
    J_prev[3:6, 6:9] = -R_prev_T * dt
    J_prev[3:6, 9:12] = -delta.dp_dbg
    J_prev[3:6, 12:15] = -delta.dp_dba
    J_curr[3:6, 3:6] = R_prev_T

    # velocity rows
    J_prev[6:9, 0:3] = skew(s_v)
    J_prev[6:9, 6:9] = -R_prev_T
    J_prev[6:9, 9:12] = -delta.dv_dbg
    J_prev[6:9, 12:15] = -delta.dv_dba
    J_curr[6:9, 6:9] = R_prev_T

    # bias rows
    J_prev[9:15, 9:15] = -np.eye(6)
    J_curr[9:15, 9:15] = np.eye(6)

    return r, J_prev, J_curr


def residual_covariance(delta: PreintegratedImuDelta,
                        noise: ImuNoiseModel) -> np.ndarray:
    """15x15 covariance: propagated 9x9 plus the bias random-walk block."""
    cov = np.zeros((15, 15))
    cov[0:9, 0:9] = delta.covariance
    dt = delta.dt_total
    cov[9:12, 9:12] = noise.gyro_walk ** 2 * dt * np.eye(3)
    cov[12:15, 12:15] = noise.accel_walk ** 2 * dt * np.eye(3)
    return cov
