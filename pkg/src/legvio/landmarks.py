"""Camera model, landmark lifecycle, and the visual residuals.

Pixels live in distorted image coordinates (that is where the 1 px noise
model applies); triangulation undistorts first and works on normalized
rays. Landmarks carry an online-generated position prior so that poorly
constrained geometry (e.g. motion along the optical axis) stays bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityError, TriangulationError
from .geometry import Pose3, Rotation3, skew
from .state import NavState

MIN_CAMERA_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with radial-tangential distortion and extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 640
    height: int = 480
    T_BC: Pose3 = field(default_factory=Pose3.identity)  # body-to-camera

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def distort(self, n):
        """Apply distortion to normalized coordinates (..., 2)."""
        n = np.asarray(n, dtype=float)
        x, y = n[..., 0], n[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def distort_jacobian(self, n):
        """2x2 Jacobian of :meth:`distort` at normalized coordinates n."""
        x, y = float(n[0]), float(n[1])
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        d_radial = 2.0 * self.k1 + 4.0 * self.k2 * r2
        J = np.empty((2, 2))
        J[0, 0] = radial + x * x * d_radial + 2.0 * self.p1 * y \
            + 6.0 * self.p2 * x
        J[0, 1] = x * y * d_radial + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        J[1, 0] = x * y * d_radial + 2.0 * self.p2 * y + 2.0 * self.p1 * x
        J[1, 1] = radial + y * y * d_radial + 2.0 * self.p2 * x \
            + 6.0 * self.p1 * y
        return J

    def undistort(self, d, iterations=20):
        """Invert :meth:`distort` by Newton iteration, (..., 2) in/out."""
        d = np.asarray(d, dtype=float)
        n = d.copy()
        for _ in range(iterations):
            err = self.distort(n) - d
            if np.max(np.abs(err)) < 1e-14:
                break
            if n.ndim == 1:
                n = n - np.linalg.solve(self.distort_jacobian(n), err)
            else:
                # Fixed-point fallback for batches; converges for the mild
                # distortion this model targets (|k1| <= 0.3).
                n = n - err
        return n

    def pixel_from_normalized(self, n):
        d = self.distort(n)
        return np.stack([self.fx * d[..., 0] + self.cx,
                         self.fy * d[..., 1] + self.cy], axis=-1)

    def normalized_from_pixel(self, uv):
        uv = np.asarray(uv, dtype=float)
        d = np.stack([(uv[..., 0] - self.cx) / self.fx,
                      (uv[..., 1] - self.cy) / self.fy], axis=-1)
        return self.undistort(d)

    def in_bounds(self, uv, margin=0.0) -> bool:
        u, v = uv[..., 0], uv[..., 1]
        return bool(np.all((u >= margin) & (u <= self.width - 1 - margin)
                           & (v >= margin) & (v <= self.height - 1 - margin)))


@dataclass
class Landmark:
    """World point with an online prior; ids are shared with feature tracks."""

    id: int
    position: np.ndarray
    prior: np.ndarray
    prior_covariance: np.ndarray
    status: str = "active"   # candidate | active | marginalized

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).copy()
        self.prior = np.asarray(self.prior, dtype=float).copy()


def camera_pose(pose_WB: Pose3, cam: CameraModel) -> Pose3:
    return pose_WB @ cam.T_BC


def project(pose_WB: Pose3, cam: CameraModel, m) -> np.ndarray:
    """World point to distorted pixel; raises CheiralityError behind camera."""
    T_WC = camera_pose(pose_WB, cam)
    p_C = T_WC.inverse().transform(np.asarray(m, dtype=float))
    if p_C[2] <= MIN_CAMERA_DEPTH:
        raise CheiralityError(f"point at camera depth {p_C[2]:.3g}")
    n = p_C[:2] / p_C[2]
    return cam.pixel_from_normalized(n)


def project_batch(R_WB: np.ndarray, p_WB: np.ndarray, cam: CameraModel,
                  m: np.ndarray, jacobians: bool = True):
    """Vectorized projection with Jacobians.

    Parameters are stacked per observation: ``R_WB`` is (n, 3, 3), ``p_WB``
    and ``m`` are (n, 3). Returns pixel coordinates (n, 2), a validity mask
    (camera-frame depth above the cheirality floor), and the Jacobians of
    the pixel w.r.t. the pose perturbation (n, 2, 6) ordered (rotation,
    translation) and w.r.t. the landmark (n, 2, 3); the Jacobians are None
    when ``jacobians`` is False.
    """
    R_BC = cam.T_BC.rotation.matrix()
    t_BC = cam.T_BC.translation
    y = np.einsum("nji,nj->ni", R_WB, m - p_WB)          # R_WB^T (m - p)
    p_C = (y - t_BC) @ R_BC                               # R_BC^T (y - t_BC)
    z = p_C[:, 2]
    valid = z > MIN_CAMERA_DEPTH
    z_safe = np.where(valid, z, 1.0)

    n = p_C[:, :2] / z_safe[:, None]
    x, yn = n[:, 0], n[:, 1]
    r2 = x * x + yn * yn
    radial = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    xd = x * radial + 2.0 * cam.p1 * x * yn + cam.p2 * (r2 + 2.0 * x * x)
    yd = yn * radial + cam.p1 * (r2 + 2.0 * yn * yn) + 2.0 * cam.p2 * x * yn
    uv = np.stack([cam.fx * xd + cam.cx, cam.fy * yd + cam.cy], axis=-1)
    if not jacobians:
        return uv, valid, None, None

    # d(pixel)/d(normalized)
    d_radial = 2.0 * cam.k1 + 4.0 * cam.k2 * r2
    J_dn = np.empty((len(z), 2, 2))
    J_dn[:, 0, 0] = radial + x * x * d_radial + 2.0 * cam.p1 * yn \
        + 6.0 * cam.p2 * x
    J_dn[:, 0, 1] = x * yn * d_radial + 2.0 * cam.p1 * x + 2.0 * cam.p2 * yn
    J_dn[:, 1, 0] = x * yn * d_radial + 2.0 * cam.p2 * yn + 2.0 * cam.p1 * x
    J_dn[:, 1, 1] = radial + yn * yn * d_radial + 2.0 * cam.p2 * x \
        + 6.0 * cam.p1 * yn
    J_dn[:, 0, :] *= cam.fx
    J_dn[:, 1, :] *= cam.fy

    # d(normalized)/d(p_C)
    inv_z = 1.0 / z_safe
    J_nc = np.zeros((len(z), 2, 3))
    J_nc[:, 0, 0] = inv_z
    J_nc[:, 0, 2] = -x * inv_z
    J_nc[:, 1, 1] = inv_z
    J_nc[:, 1, 2] = -yn * inv_z
    J_uc = J_dn @ J_nc                                    # (n, 2, 3)

    # p_C = R_BC^T (y - t_BC) with y = R_WB^T (m - p_WB):
    #   dy/drot = skew(y), dy/dpos = -R_WB^T, dy/dm = R_WB^T
    J_y_rot = np.zeros((len(z), 3, 3))
    J_y_rot[:, 0, 1] = -y[:, 2]
    J_y_rot[:, 0, 2] = y[:, 1]
    J_y_rot[:, 1, 0] = y[:, 2]
    J_y_rot[:, 1, 2] = -y[:, 0]
    J_y_rot[:, 2, 0] = -y[:, 1]
    J_y_rot[:, 2, 1] = y[:, 0]
    J_c_rot = np.einsum("ij,njk->nik", R_BC.T, J_y_rot)
    R_WB_T = np.swapaxes(R_WB, 1, 2)
    J_c_pos = -np.einsum("ij,njk->nik", R_BC.T, R_WB_T)

    J_pose = np.concatenate([J_uc @ J_c_rot, J_uc @ J_c_pos], axis=2)
    J_lm = J_uc @ (-J_c_pos)
    return uv, valid, J_pose, J_lm


def reprojection_residual(x: NavState, m, observation, cam: CameraModel):
    """(projected - measured) pixel residual with pose/landmark Jacobians.

    Raises CheiralityError when the landmark sits behind the camera; the
    caller is expected to skip the observation.
    """
    m = np.asarray(m, dtype=float)
    uv, valid, J_pose, J_lm = project_batch(
        x.rotation.matrix()[None], x.position[None], cam, m[None])
    if not valid[0]:
        raise CheiralityError("landmark behind camera")
    r = uv[0] - np.asarray(observation, dtype=float)
    return r, J_pose[0], J_lm[0]


def landmark_prior_residual(m, prior):
    """Difference to the online prior; weighted by its covariance upstream."""
    r = np.asarray(m, dtype=float) - np.asarray(prior, dtype=float)
    return r, np.eye(3)


def triangulate_dlt(observations, cam: CameraModel,
                    max_conditioning: float = 0.3):
    """Triangulate a world point from (pose_WB, pixel) pairs.

    Stacks the cross-product constraints of the undistorted rays into a
    homogeneous system solved by SVD. Returns the point and a conditioning
    diagnostic (ratio of the two smallest singular values; near 1 means the
    null space is ambiguous). Raises TriangulationError when the geometry
    is degenerate (zero baseline, point at infinity, or behind a camera).
    """
    if len(observations) < 2:
        raise TriangulationError("need at least two observations")
    rows = []
    cams = []
    for pose_WB, uv in observations:
        T_CW = camera_pose(pose_WB, cam).inverse()
        n = cam.normalized_from_pixel(np.asarray(uv, dtype=float))
        P = np.hstack([T_CW.rotation.matrix(), T_CW.translation[:, None]])
        ray = np.array([n[0], n[1], 1.0])
        rows.append(skew(ray) @ P)
        cams.append(T_CW)
    A = np.vstack(rows)
    _, s, Vt = np.linalg.svd(A)
    if s[0] <= 0.0:
        raise TriangulationError("degenerate constraint system")
    conditioning = s[-1] / max(s[-2], np.finfo(float).tiny)
    if s[-2] < 1e-9 * s[0] or conditioning > max_conditioning:
        raise TriangulationError(
            f"rank-deficient triangulation (conditioning {conditioning:.3g})")
    h = Vt[-1]
    if abs(h[3]) < 1e-12 * np.linalg.norm(h[:3]):
        raise TriangulationError("point at infinity")
    m = h[:3] / h[3]
    for T_CW in cams:
        if T_CW.transform(m)[2] <= MIN_CAMERA_DEPTH:
            raise TriangulationError("triangulated point behind a camera")
    return m, conditioning


@dataclass(frozen=True)
class PromotionConfig:
    min_observations: int = 30       # strictly more required before promotion
    max_depth: float = 50.0          # meters, in the newest observing camera
    prior_depth_sigma_ratio: float = 0.1


def promote_landmark(track, window_poses: dict[int, Pose3], cam: CameraModel,
                     cfg: PromotionConfig) -> Landmark | None:
    """Try to turn a feature track into an estimable landmark.

    Returns None while the track is still pending (too few observations) or
    when the geometry fails the depth/conditioning gates; the track then
    stays a candidate and is retried at the next keyframe. Depth
    measurements take priority for the prior location; otherwise the last
    ``min_observations`` keyframes are triangulated.
    """
    obs = [o for o in track.observations if o.keyframe in window_poses]
    if track.age <= cfg.min_observations or len(obs) < 2:
        return None

    recent = obs[-cfg.min_observations:]
    newest = recent[-1]
    newest_pose = window_poses[newest.keyframe]

    m = None
    with_depth = [o for o in recent if o.depth is not None and o.depth > 0.0]
    if with_depth:
        o = with_depth[-1]
        ray = cam.normalized_from_pixel(np.array([o.u, o.v]))
        p_C = np.array([ray[0], ray[1], 1.0]) * o.depth
        m = camera_pose(window_poses[o.keyframe], cam).transform(p_C)
    else:
        try:
            m, _ = triangulate_dlt(
                [(window_poses[o.keyframe], np.array([o.u, o.v]))
                 for o in recent], cam)
        except TriangulationError:
            return None

    depth = camera_pose(newest_pose, cam).inverse().transform(m)[2]
    if not (0.0 < depth <= cfg.max_depth):
        return None
    sigma = cfg.prior_depth_sigma_ratio * depth
    return Landmark(track.id, m, m.copy(),
                    np.eye(3) * sigma * sigma, status="active")
