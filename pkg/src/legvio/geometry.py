"""Rotation and rigid-transform algebra used by every residual.

Rotations are stored as unit quaternions (w, x, y, z) and realized as 3x3
matrices on demand. Tangent 6-vectors are ordered (rotation, translation):
the first three components are an axis-angle rotation in radians, the last
three are meters. The lifting map for poses is the pseudo-log
``(log R, t)``, matched by :func:`se3_retract`.
"""

from __future__ import annotations

import numpy as np

# Below this angle exp/log switch to a 2nd-order Taylor expansion.
SMALL_ANGLE = 1e-7
# Composition chains longer than this force a quaternion renormalization.
_RENORM_CHAIN = 100


def skew(v):
    """3x3 skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_multiply(q1, q2):
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


class Rotation3:
    """Element of SO(3), stored as a unit quaternion.

    Instances are immutable; all operations return new objects. A chain
    counter triggers renormalization once a composition chain exceeds
    ``_RENORM_CHAIN`` products, which keeps drift below 1e-9 in the
    orthonormality defect without paying for per-op normalization.
    """

    __slots__ = ("_q", "_chain")

    def __init__(self, q, _chain=0, _normalize=True):
        q = np.asarray(q, dtype=float)
        if _normalize:
            n = np.sqrt(q @ q)
            if not np.isfinite(n) or n == 0.0:
                raise ValueError("quaternion has zero or non-finite norm")
            q = q / n
            _chain = 0
        if q[0] < 0.0:
            q = -q
        self._q = q
        self._chain = _chain

    @staticmethod
    def identity():
        return Rotation3(np.array([1.0, 0.0, 0.0, 0.0]), _normalize=False)

    @staticmethod
    def from_quaternion(qw, qx, qy, qz):
        return Rotation3(np.array([qw, qx, qy, qz], dtype=float))

    @staticmethod
    def from_matrix(R):
        """Quaternion extraction branching on the largest diagonal term."""
        R = np.asarray(R, dtype=float)
        t = np.trace(R)
        if t > 0.0:
            s = np.sqrt(t + 1.0) * 2.0
            q = np.array([
                0.25 * s,
                (R[2, 1] - R[1, 2]) / s,
                (R[0, 2] - R[2, 0]) / s,
                (R[1, 0] - R[0, 1]) / s,
            ])
        elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array([
                (R[2, 1] - R[1, 2]) / s,
                0.25 * s,
                (R[0, 1] + R[1, 0]) / s,
                (R[0, 2] + R[2, 0]) / s,
            ])
        elif R[1, 1] >= R[2, 2]:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = np.array([
                (R[0, 2] - R[2, 0]) / s,
                (R[0, 1] + R[1, 0]) / s,
                0.25 * s,
                (R[1, 2] + R[2, 1]) / s,
            ])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = np.array([
                (R[1, 0] - R[0, 1]) / s,
                (R[0, 2] + R[2, 0]) / s,
                (R[1, 2] + R[2, 1]) / s,
                0.25 * s,
            ])
        return Rotation3(q)

    @property
    def quaternion(self):
        """Unit quaternion (w, x, y, z) with w >= 0."""
        return self._q.copy()

    def matrix(self):
        w, x, y, z = self._q
        xx, yy, zz = x * x, y * y, z * z
        xy, xz, yz = x * y, x * z, y * z
        wx, wy, wz = w * x, w * y, w * z
        return np.array([
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ])

    def compose(self, other):
        q = _quat_multiply(self._q, other._q)
        chain = max(self._chain, other._chain) + 1
        if chain > _RENORM_CHAIN:
            return Rotation3(q)
        return Rotation3(q, _chain=chain, _normalize=False)

    def __matmul__(self, other):
        if isinstance(other, Rotation3):
            return self.compose(other)
        return NotImplemented

    def inverse(self):
        w, x, y, z = self._q
        return Rotation3(np.array([w, -x, -y, -z]), _chain=self._chain,
                         _normalize=False)

    def rotate(self, v):
        """Apply to a 3-vector or an (n, 3) stack of vectors."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self.matrix() @ v
        return v @ self.matrix().T

    def log(self):
        return so3_log(self)

    def angle(self):
        """Rotation angle in [0, pi]."""
        w = min(abs(self._q[0]), 1.0)
        return 2.0 * np.arccos(w)

    def __repr__(self):
        w, x, y, z = self._q
        return f"Rotation3(qw={w:.6f}, qx={x:.6f}, qy={y:.6f}, qz={z:.6f})"


def so3_exp(omega):
    """Exponential map: axis-angle 3-vector to Rotation3."""
    omega = np.asarray(omega, dtype=float)
    theta2 = omega @ omega
    theta = np.sqrt(theta2)
    half = 0.5 * theta
    if theta < SMALL_ANGLE:
        # sin(t/2)/t = 1/2 - t^2/48, cos(t/2) = 1 - t^2/8
        s = 0.5 - theta2 / 48.0
        w = 1.0 - theta2 / 8.0
    else:
        s = np.sin(half) / theta
        w = np.cos(half)
    q = np.array([w, s * omega[0], s * omega[1], s * omega[2]])
    return Rotation3(q)


def so3_log(R: Rotation3):
    """Principal logarithm; norm <= pi, stable near 0 and near pi."""
    w, x, y, z = R._q  # w >= 0 by construction, so the log is principal
    s = np.sqrt(x * x + y * y + z * z)
    if s < 1e-12:
        scale = 2.0 / w
    else:
        scale = 2.0 * np.arctan2(s, w) / s
    return scale * np.array([x, y, z])


def so3_right_jacobian(omega):
    """Right Jacobian of the SO(3) exponential."""
    omega = np.asarray(omega, dtype=float)
    theta2 = omega @ omega
    theta = np.sqrt(theta2)
    W = skew(omega)
    if theta < SMALL_ANGLE:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * W + b * (W @ W)


def so3_right_jacobian_inv(omega):
    """Inverse right Jacobian; valid for angles below pi."""
    omega = np.asarray(omega, dtype=float)
    theta2 = omega @ omega
    theta = np.sqrt(theta2)
    W = skew(omega)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * W + c * (W @ W)


class Pose3:
    """Rigid transform: rotation plus translation, immutable."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation3, translation):
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation",
                           np.asarray(translation, dtype=float).copy())

    def __setattr__(self, name, value):
        raise AttributeError("Pose3 is immutable")

    @staticmethod
    def identity():
        return Pose3(Rotation3.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        return Pose3(Rotation3.from_matrix(T[:3, :3]), T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.rotation @ other.rotation,
                     self.translation + self.rotation.rotate(other.translation))

    def __matmul__(self, other):
        if isinstance(other, Pose3):
            return self.compose(other)
        return NotImplemented

    def inverse(self) -> "Pose3":
        rinv = self.rotation.inverse()
        return Pose3(rinv, -rinv.rotate(self.translation))

    def transform(self, p):
        """Map a point (or (n, 3) stack) from the local frame to the parent."""
        return self.rotation.rotate(p) + self.translation

    def __repr__(self):
        t = self.translation
        return f"Pose3(t=({t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}), {self.rotation!r})"


def se3_lift(T: Pose3):
    """Pose to local error coordinates: (log of rotation, raw translation)."""
    out = np.empty(6)
    out[:3] = so3_log(T.rotation)
    out[3:] = T.translation
    return out


def se3_retract(xi):
    """Inverse of :func:`se3_lift`."""
    xi = np.asarray(xi, dtype=float)
    return Pose3(so3_exp(xi[:3]), xi[3:].copy())


def slerp(Ra: Rotation3, Rb: Rotation3, alpha: float) -> Rotation3:
    """Spherical interpolation along the geodesic from Ra to Rb."""
    rel = so3_log(Ra.inverse() @ Rb)
    return Ra @ so3_exp(alpha * rel)


def pose_interpolate(T_a: Pose3, t_a: float, T_b: Pose3, t_b: float,
                     t: float) -> Pose3:
    """Interpolate between two timestamped poses.

    Translation is linear, rotation follows the geodesic. Endpoints are
    reproduced exactly. Raises ValueError when t falls outside [t_a, t_b].
    """
    if not t_a < t_b:
        raise ValueError(f"need t_a < t_b, got {t_a} >= {t_b}")
    if t < t_a or t > t_b:
        raise ValueError(f"t={t} outside interpolation range [{t_a}, {t_b}]")
    if t == t_a:
        return T_a
    if t == t_b:
        return T_b
    alpha = (t - t_a) / (t_b - t_a)
    trans = (1.0 - alpha) * T_a.translation + alpha * T_b.translation
    return Pose3(slerp(T_a.rotation, T_b.rotation, alpha), trans)
