"""Per-keyframe estimation variables: navigation state and IMU bias."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Rotation3, Pose3, so3_exp, so3_log


@dataclass(frozen=True)
class ImuBias:
    """Gyro (rad/s) and accelerometer (m/s^2) bias, stacked gyro-first."""

    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))
        if not (np.all(np.isfinite(self.gyro))
                and np.all(np.isfinite(self.accel))):
            raise ValueError("non-finite IMU bias")

    @staticmethod
    def zero() -> "ImuBias":
        return ImuBias(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(b) -> "ImuBias":
        b = np.asarray(b, dtype=float)
        return ImuBias(b[:3], b[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    def __sub__(self, other: "ImuBias") -> np.ndarray:
        return self.vector() - other.vector()


class NavState:
    """Rotation, position, velocity and IMU bias of the base at a keyframe.

    Local perturbations are 15-vectors ordered (rotation, position,
    velocity, gyro bias, accel bias); rotation retracts on the right,
    everything else adds.
    """

    DIM = 15

    __slots__ = ("rotation", "position", "velocity", "bias")

    def __init__(self, rotation: Rotation3, position, velocity, bias: ImuBias):
        self.rotation = rotation
        self.position = np.asarray(position, dtype=float).copy()
        self.velocity = np.asarray(velocity, dtype=float).copy()
        self.bias = bias

    @staticmethod
    def identity() -> "NavState":
        return NavState(Rotation3.identity(), np.zeros(3), np.zeros(3),
                        ImuBias.zero())

    def pose(self) -> Pose3:
        return Pose3(self.rotation, self.position)

    def retract(self, delta) -> "NavState":
        delta = np.asarray(delta, dtype=float)
        return NavState(
            self.rotation @ so3_exp(delta[0:3]),
            self.position + delta[3:6],
            self.velocity + delta[6:9],
            ImuBias.from_vector(self.bias.vector() + delta[9:15]),
        )

    def local_coords(self, other: "NavState") -> np.ndarray:
        """15-vector d with self.retract(d) == other (to first order exact)."""
        out = np.empty(15)
        out[0:3] = so3_log(self.rotation.inverse() @ other.rotation)
        out[3:6] = other.position - self.position
        out[6:9] = other.velocity - self.velocity
        out[9:15] = other.bias - self.bias
        return out

    def copy(self) -> "NavState":
        return NavState(self.rotation, self.position, self.velocity, self.bias)

    def __repr__(self):
        p = self.position
        return (f"NavState(p=({p[0]:.3f}, {p[1]:.3f}, {p[2]:.3f}), "
                f"|v|={np.linalg.norm(self.velocity):.3f})")
