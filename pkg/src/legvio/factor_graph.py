"""Sliding-window MAP estimation.

Variables are per-keyframe navigation states and world landmarks; factors
are the five residual families (state prior, preintegrated IMU, relative
pose from leg odometry or a zero-velocity constraint, reprojection, and
landmark prior) plus the linear Gaussian replacement left behind by
marginalization. The window is optimized with Levenberg-Marquardt over the
manifold, landmarks eliminated first by a Schur complement, and states
older than the lag get folded into a marginal prior at their current
linearization point.

Variable keys are ("x", keyframe_index) or ("l", landmark_id).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InitializationError, OptimizationFailedError
from .geometry import Pose3, Rotation3, skew, so3_exp, so3_log, so3_right_jacobian_inv
from .imu_preint import (
    GRAVITY,
    ImuNoiseModel,
    PreintegratedImuDelta,
    imu_residual,
    predict_state,
    residual_covariance,
)
from .landmarks import Landmark, project_batch
from .leg_odom import RelativePoseMeasurement, relative_pose_residual
from .state import ImuBias, NavState

__all__ = [
    "GraphConfig", "SlidingWindow", "KeyframeBundle", "ConvergenceReport",
    "StatePriorFactor", "ImuFactor", "RelativePoseFactor",
    "ReprojectionFactor", "LandmarkPriorFactor", "MarginalPriorFactor",
    "LinearFactor", "initialize", "state_prior_residual", "add_keyframe",
    "optimize", "marginalize", "NavState", "ImuBias",
]


@dataclass
class GraphConfig:
    lag: float = 10.0                 # seconds kept in the window
    min_states: int = 5               # nodes always retained
    pixel_sigma: float = 1.0          # px reprojection noise
    robust: bool = True               # Huber on reprojection factors
    huber_delta: float = 1.345        # in whitened units
    max_iterations: int = 50
    rel_cost_tol: float = 1e-6
    step_tol: float = 1e-8
    lambda_init: float = 0.0          # 0 = try a pure Gauss-Newton step
    lambda_max: float = 1e8
    dense_threshold: int = 200        # variable nodes; below this go dense
    prior_rot_sigma: float = 1e-2     # rad
    prior_pos_sigma: float = 1e-2     # m
    prior_vel_sigma: float = 1e-1     # m/s
    prior_bias_sigma: float = 1e-1
    init_duration: float = 0.5        # s of stationary IMU data
    init_max_accel_std: float = 0.3   # m/s^2 motion gate


def _sqrt_info(cov: np.ndarray) -> np.ndarray:
    """W with W^T W = cov^-1, via lower Cholesky."""
    L = np.linalg.cholesky(cov)
    return sla.solve_triangular(L, np.eye(cov.shape[0]), lower=True)


# ---------------------------------------------------------------------------
# Factors


class StatePriorFactor:
    """Anchors the unobservable modes of one state.

    Residual ordering: lifted pose error (rotation, translation), velocity,
    accel bias, gyro bias.
    """

    kind = "state_prior"
    dim = 15
    robust = False

    def __init__(self, key, prior: NavState, covariance: np.ndarray):
        self.keys = (key,)
        self.prior = prior
        self.covariance = covariance
        self.sqrt_info = _sqrt_info(covariance)

    def evaluate(self, values):
        x: NavState = values[self.keys[0]]
        prior = self.prior
        r_rot = so3_log(x.rotation.inverse() @ prior.rotation)
        r_trans = x.rotation.inverse().rotate(prior.position - x.position)
        r = np.empty(15)
        r[0:3] = r_rot
        r[3:6] = r_trans
        r[6:9] = x.velocity - prior.velocity
        r[9:12] = x.bias.accel - prior.bias.accel
        r[12:15] = x.bias.gyro - prior.bias.gyro

        J = np.zeros((15, 15))
        J[0:3, 0:3] = -so3_right_jacobian_inv(r_rot) \
            @ (prior.rotation.inverse() @ x.rotation).matrix()
        J[3:6, 0:3] = skew(r_trans)
        J[3:6, 3:6] = -x.rotation.matrix().T
        J[6:9, 6:9] = np.eye(3)
        J[9:12, 12:15] = np.eye(3)
        J[12:15, 9:12] = np.eye(3)
        return r, {self.keys[0]: J}


def state_prior_residual(x: NavState, prior: NavState) -> np.ndarray:
    """Stacked prior residual: pose error (6), velocity, accel and gyro bias."""
    factor = StatePriorFactor(("x", 0), prior, np.eye(15))
    r, _ = factor.evaluate({("x", 0): x})
    return r


class ImuFactor:
    kind = "imu"
    dim = 15
    robust = False

    def __init__(self, key_prev, key_curr, delta: PreintegratedImuDelta,
                 noise: ImuNoiseModel):
        self.keys = (key_prev, key_curr)
        self.delta = delta
        self.gravity = np.asarray(noise.gravity, dtype=float)
        self.covariance = residual_covariance(delta, noise)
        self.sqrt_info = _sqrt_info(self.covariance)

    def evaluate(self, values):
        r, J0, J1 = imu_residual(values[self.keys[0]], values[self.keys[1]],
                                 self.delta, self.gravity)
        return r, {self.keys[0]: J0, self.keys[1]: J1}


class RelativePoseFactor:
    dim = 6
    robust = False

    def __init__(self, key_prev, key_curr, meas: RelativePoseMeasurement):
        self.keys = (key_prev, key_curr)
        self.measurement = meas
        self.kind = meas.kind
        self.sqrt_info = _sqrt_info(meas.covariance)

    def evaluate(self, values):
        r, J0, J1 = relative_pose_residual(values[self.keys[0]],
                                           values[self.keys[1]],
                                           self.measurement)
        return r, {self.keys[0]: J0, self.keys[1]: J1}


class ReprojectionFactor:
    kind = "reprojection"
    dim = 2

    def __init__(self, state_key, landmark_key, uv, camera,
                 pixel_sigma: float = 1.0, robust: bool = True):
        self.keys = (state_key, landmark_key)
        self.uv = np.asarray(uv, dtype=float)
        self.camera = camera
        self.sqrt_info = np.eye(2) / pixel_sigma
        self.robust = robust

    def evaluate(self, values):
        x: NavState = values[self.keys[0]]
        m = values[self.keys[1]]
        uv, valid, J_pose, J_lm = project_batch(
            x.rotation.matrix()[None], x.position[None], self.camera,
            np.asarray(m, dtype=float)[None])
        if not valid[0]:
            return None
        r = uv[0] - self.uv
        J_state = np.zeros((2, 15))
        J_state[:, 0:6] = J_pose[0]
        return r, {self.keys[0]: J_state, self.keys[1]: J_lm[0]}


class LandmarkPriorFactor:
    kind = "landmark_prior"
    dim = 3
    robust = False

    def __init__(self, landmark_key, prior, covariance):
        self.keys = (landmark_key,)
        self.prior = np.asarray(prior, dtype=float)
        self.covariance = covariance
        self.sqrt_info = _sqrt_info(covariance)

    def evaluate(self, values):
        r = np.asarray(values[self.keys[0]], dtype=float) - self.prior
        return r, {self.keys[0]: np.eye(3)}


class LinearFactor:
    """r = sum_k A_k x_k - b over vector-valued variables (toy graphs)."""

    kind = "linear"
    robust = False

    def __init__(self, keys, blocks, b, covariance):
        self.keys = tuple(keys)
        self.blocks = [np.asarray(B, dtype=float) for B in blocks]
        self.b = np.asarray(b, dtype=float)
        self.dim = self.b.size
        self.covariance = covariance
        self.sqrt_info = _sqrt_info(covariance)

    def evaluate(self, values):
        r = -self.b.copy()
        for key, B in zip(self.keys, self.blocks):
            r = r + B @ np.asarray(values[key], dtype=float)
        return r, dict(zip(self.keys, self.blocks))


def _var_dim(key) -> int:
    return NavState.DIM if key[0] == "x" else 3


def _local_coords(key, lin, current) -> np.ndarray:
    if key[0] == "x":
        return lin.local_coords(current)
    return np.asarray(current, dtype=float) - np.asarray(lin, dtype=float)


class MarginalPriorFactor:
    """Linear Gaussian summary of eliminated variables.

    Lives in whitened units: residual is L * delta + c where delta stacks
    the local coordinates of the connected variables relative to the frozen
    linearization point (first-estimates style).
    """

    kind = "marginal_prior"
    robust = False

    def __init__(self, keys, lin_values, L, c):
        self.keys = tuple(keys)
        self.lin_values = dict(lin_values)
        self.L = L
        self.c = c
        self.dim = L.shape[0]
        self.sqrt_info = np.eye(self.dim)
        self._slices = {}
        off = 0
        for key in self.keys:
            d = _var_dim(key)
            self._slices[key] = slice(off, off + d)
            off += d

    def evaluate(self, values):
        delta = np.concatenate([
            _local_coords(key, self.lin_values[key], values[key])
            for key in self.keys])
        r = self.L @ delta + self.c
        return r, {key: self.L[:, self._slices[key]] for key in self.keys}


# ---------------------------------------------------------------------------
# Window


@dataclass
class KeyframeBundle:
    """Everything one new keyframe contributes to the graph."""

    keyframe: int
    t: float
    imu_delta: PreintegratedImuDelta
    relative_pose: RelativePoseMeasurement
    observations: list = field(default_factory=list)   # (landmark_id, (u, v))
    promotions: list = field(default_factory=list)     # new Landmark objects


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    rank_deficient: bool | None = None   # None when the check did not run


class SlidingWindow:
    def __init__(self, cfg: GraphConfig, noise: ImuNoiseModel, camera=None):
        self.cfg = cfg
        self.noise = noise
        self.camera = camera
        self.states: dict[int, NavState] = {}
        self.timestamps: dict[int, float] = {}
        self.landmarks: dict[int, Landmark] = {}
        self.factors: list = []
        self.marginal_prior: MarginalPriorFactor | None = None

    # -- bookkeeping --------------------------------------------------------

    def state_keys(self):
        return [("x", k) for k in sorted(self.states)]

    def landmark_keys(self):
        return [("l", j) for j in sorted(self.landmarks)]

    def values(self) -> dict:
        vals = {("x", k): s for k, s in self.states.items()}
        vals.update({("l", j): lm.position for j, lm in
                     self.landmarks.items()})
        return vals

    def newest(self) -> tuple[int, NavState]:
        k = max(self.states)
        return k, self.states[k]

    def anchor_count(self) -> int:
        return sum(1 for f in self.factors
                   if f.kind in ("state_prior", "marginal_prior"))

    # -- spec operations ----------------------------------------------------

    def add_keyframe(self, bundle: KeyframeBundle) -> "SlidingWindow":
        """Append a state plus the factors carried by the bundle."""
        k_prev, x_prev = self.newest()
        if bundle.keyframe != k_prev + 1:
            raise ValueError(
                f"bundle keyframe {bundle.keyframe} does not follow {k_prev}")
        if bundle.relative_pose.keyframes != (k_prev, bundle.keyframe):
            raise ValueError("relative pose links the wrong keyframes")

        x_new = predict_state(x_prev, bundle.imu_delta, self.noise.gravity)
        k = bundle.keyframe
        self.states[k] = x_new
        self.timestamps[k] = bundle.t
        self.factors.append(
            ImuFactor(("x", k_prev), ("x", k), bundle.imu_delta, self.noise))
        self.factors.append(
            RelativePoseFactor(("x", k_prev), ("x", k), bundle.relative_pose))

        for lm in bundle.promotions:
            if lm.id in self.landmarks:
                raise ValueError(f"landmark {lm.id} already active")
            self.landmarks[lm.id] = lm
            self.factors.append(LandmarkPriorFactor(("l", lm.id), lm.prior,
                                                    lm.prior_covariance))
        for lm_id, uv in bundle.observations:
            if lm_id not in self.landmarks:
                continue
            self.factors.append(ReprojectionFactor(
                ("x", k), ("l", lm_id), uv, self.camera,
                pixel_sigma=self.cfg.pixel_sigma, robust=self.cfg.robust))
        return self

    def optimize(self) -> ConvergenceReport:
        report, values = _levenberg_marquardt(self.factors, self.values(),
                                              self.cfg)
        for k in self.states:
            self.states[k] = values[("x", k)]
        for j in self.landmarks:
            self.landmarks[j].position = np.asarray(values[("l", j)])
        return report

    def marginalize(self, now: float) -> "SlidingWindow":
        """Fold variables older than the lag into a linear Gaussian prior."""
        if len(self.states) <= self.cfg.min_states:
            return self
        cutoff = now - self.cfg.lag
        old = [k for k in sorted(self.states) if self.timestamps[k] < cutoff]
        max_removable = len(self.states) - self.cfg.min_states
        old = old[:max_removable]
        if not old:
            return self
        elim_states = set(old)

        # Landmarks with no remaining tie to a retained state go too.
        landmark_states: dict[int, set[int]] = {j: set() for j in
                                                self.landmarks}
        for f in self.factors:
            if f.kind == "reprojection":
                landmark_states[f.keys[1][1]].add(f.keys[0][1])
        elim_landmarks = {j for j, observers in landmark_states.items()
                          if observers <= elim_states}

        elim_keys = [("x", k) for k in sorted(elim_states)]
        elim_keys += [("l", j) for j in sorted(elim_landmarks)]
        elim_set = set(elim_keys)

        consumed = [f for f in self.factors
                    if any(key in elim_set for key in f.keys)]
        consumed_ids = {id(f) for f in consumed}
        kept = [f for f in self.factors if id(f) not in consumed_ids]
        prior = eliminate(consumed, elim_keys, self.values(), self.cfg)

        for k in elim_states:
            del self.states[k]
            del self.timestamps[k]
        for j in elim_landmarks:
            self.landmarks[j].status = "marginalized"
            del self.landmarks[j]

        self.factors = kept
        if prior is not None:
            self.factors.append(prior)
            self.marginal_prior = prior
        return self


# ---------------------------------------------------------------------------
# Initialization


def initialize(imu_samples, cfg: GraphConfig, noise: ImuNoiseModel,
               t0: float = 0.0, camera=None) -> SlidingWindow:
    """Bootstrap the window from stationary IMU data.

    Roll and pitch come from aligning the mean specific force with gravity;
    yaw and position are unobservable and anchored at zero. Raises
    InitializationError when the data does not look stationary.
    """
    samples = list(imu_samples)
    if len(samples) < 2:
        raise InitializationError("no IMU data for initialization")
    span = samples[-1].t - samples[0].t
    covered = span * len(samples) / (len(samples) - 1)
    if covered < cfg.init_duration - 1e-9:
        raise InitializationError(
            f"need {cfg.init_duration} s of stationary data, "
            f"got {covered:.3f}")
    accels = np.array([s.accel for s in samples])
    omegas = np.array([s.omega for s in samples])
    if np.max(accels.std(axis=0)) > cfg.init_max_accel_std:
        raise InitializationError(
            "motion detected during initialization "
            f"(accel std {np.max(accels.std(axis=0)):.3f})")

    g = np.asarray(noise.gravity, dtype=float)
    mean_a = accels.mean(axis=0)
    up_world = -g / np.linalg.norm(g)
    up_body = mean_a / np.linalg.norm(mean_a)
    axis = np.cross(up_body, up_world)
    s = np.linalg.norm(axis)
    c = float(np.dot(up_body, up_world))
    if s < 1e-12:
        R0 = Rotation3.identity() if c > 0 else so3_exp([np.pi, 0.0, 0.0])
    else:
        R0 = so3_exp(axis / s * np.arctan2(s, c))

    accel_bias = mean_a - R0.matrix().T @ (-g)
    x0 = NavState(R0, np.zeros(3), np.zeros(3),
                  ImuBias(omegas.mean(axis=0), accel_bias))

    window = SlidingWindow(cfg, noise, camera=camera)
    window.states[0] = x0
    window.timestamps[0] = t0
    cov = np.diag([cfg.prior_rot_sigma ** 2] * 3
                  + [cfg.prior_pos_sigma ** 2] * 3
                  + [cfg.prior_vel_sigma ** 2] * 3
                  + [cfg.prior_bias_sigma ** 2] * 6)
    window.factors.append(StatePriorFactor(("x", 0), x0.copy(), cov))
    return window


# Spec-shaped module-level entry points.

def add_keyframe(window: SlidingWindow, bundle: KeyframeBundle):
    return window.add_keyframe(bundle)


def optimize(window: SlidingWindow, cfg: GraphConfig | None = None):
    if cfg is not None:
        window.cfg = cfg
    return window, window.optimize()


def marginalize(window: SlidingWindow, now: float,
                cfg: GraphConfig | None = None):
    if cfg is not None:
        window.cfg = cfg
    return window.marginalize(now)


# ---------------------------------------------------------------------------
# Nonlinear least squares


def _huber_weight_and_cost(s2: np.ndarray, delta: float):
    """IRLS weight and robust cost for squared whitened norms s2."""
    s = np.sqrt(np.maximum(s2, 0.0))
    w = np.ones_like(s)
    over = s > delta
    w[over] = delta / s[over]
    cost = np.where(over, 2.0 * delta * s - delta * delta, s2)
    return w, cost


class _Layout:
    def __init__(self, keys):
        self.keys = list(keys)
        self.offset = {}
        off = 0
        for key in self.keys:
            self.offset[key] = off
            off += _var_dim(key)
        self.dim = off


def _split_factors(factors):
    reproj = [f for f in factors if f.kind == "reprojection"]
    other = [f for f in factors if f.kind != "reprojection"]
    return reproj, other


def _reprojection_arrays(reproj, values, camera):
    n = len(reproj)
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    m = np.empty((n, 3))
    uv = np.empty((n, 2))
    for i, f in enumerate(reproj):
        x = values[f.keys[0]]
        R[i] = x.rotation.matrix()
        p[i] = x.position
        m[i] = np.asarray(values[f.keys[1]], dtype=float)
        uv[i] = f.uv
    return R, p, m, uv


def _evaluate_cost(factors, values, cfg: GraphConfig, camera=None) -> float:
    reproj, other = _split_factors(factors)
    cost = 0.0
    for f in other:
        ev = f.evaluate(values)
        if ev is None:
            continue
        r_w = f.sqrt_info @ ev[0]
        cost += float(r_w @ r_w)
    if reproj:
        cam = camera or reproj[0].camera
        R, p, m, uv = _reprojection_arrays(reproj, values, cam)
        pix, valid, _, _ = project_batch(R, p, cam, m, jacobians=False)
        inv_sigma = reproj[0].sqrt_info[0, 0]
        r_w = (pix - uv) * inv_sigma
        s2 = np.sum(r_w * r_w, axis=1)
        if cfg.robust:
            _, costs = _huber_weight_and_cost(s2, cfg.huber_delta)
        else:
            costs = s2
        cost += float(np.sum(costs[valid]))
    return cost


def _build_normal_equations(factors, values, layout: _Layout,
                            cfg: GraphConfig):
    """Assemble H = J^T J and b = -J^T r in whitened units (sparse COO)."""
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    b = np.zeros(layout.dim)

    reproj, other = _split_factors(factors)
    for f in other:
        ev = f.evaluate(values)
        if ev is None:
            continue
        r, jacs = ev
        W = f.sqrt_info
        r_w = W @ r
        whitened = {key: W @ J for key, J in jacs.items()}
        for key_a, Ja in whitened.items():
            off_a = layout.offset[key_a]
            da = Ja.shape[1]
            b[off_a:off_a + da] -= Ja.T @ r_w
            for key_b, Jb in whitened.items():
                off_b = layout.offset[key_b]
                db = Jb.shape[1]
                block = Ja.T @ Jb
                r_idx, c_idx = np.meshgrid(np.arange(off_a, off_a + da),
                                           np.arange(off_b, off_b + db),
                                           indexing="ij")
                rows.append(r_idx.ravel())
                cols.append(c_idx.ravel())
                vals.append(block.ravel())

    if reproj:
        cam = reproj[0].camera
        R, p, m, uv = _reprojection_arrays(reproj, values, cam)
        pix, valid, J_pose, J_lm = project_batch(R, p, cam, m)
        inv_sigma = reproj[0].sqrt_info[0, 0]
        r_w = (pix - uv) * inv_sigma
        J_pose = J_pose * inv_sigma
        J_lm = J_lm * inv_sigma
        if cfg.robust:
            w, _ = _huber_weight_and_cost(np.sum(r_w * r_w, axis=1),
                                          cfg.huber_delta)
            sw = np.sqrt(w)[:, None]
            r_w = r_w * sw
            J_pose = J_pose * sw[:, :, None]
            J_lm = J_lm * sw[:, :, None]
        idx = np.nonzero(valid)[0]
        if idx.size:
            Jp = J_pose[idx]
            Jl = J_lm[idx]
            rw = r_w[idx]
            Hpp = np.einsum("nki,nkj->nij", Jp, Jp)
            Hll = np.einsum("nki,nkj->nij", Jl, Jl)
            Hpl = np.einsum("nki,nkj->nij", Jp, Jl)
            gp = np.einsum("nki,nk->ni", Jp, rw)
            gl = np.einsum("nki,nk->ni", Jl, rw)
            pose_off = np.array([layout.offset[reproj[i].keys[0]]
                                 for i in idx])
            lm_off = np.array([layout.offset[reproj[i].keys[1]]
                               for i in idx])
            np.add.at(b, (pose_off[:, None] + np.arange(6)[None, :]), -gp)
            np.add.at(b, (lm_off[:, None] + np.arange(3)[None, :]), -gl)

            def block_indices(off_a, da, off_b, db):
                r_idx = (off_a[:, None, None]
                         + np.arange(da)[None, :, None])
                c_idx = (off_b[:, None, None]
                         + np.arange(db)[None, None, :])
                return (np.broadcast_to(r_idx, (len(off_a), da, db)).ravel(),
                        np.broadcast_to(c_idx, (len(off_a), da, db)).ravel())

            for off_a, off_b, blocks, da, db in (
                    (pose_off, pose_off, Hpp, 6, 6),
                    (lm_off, lm_off, Hll, 3, 3),
                    (pose_off, lm_off, Hpl, 6, 3),
                    (lm_off, pose_off, np.swapaxes(Hpl, 1, 2), 3, 6)):
                r_idx, c_idx = block_indices(off_a, da, off_b, db)
                rows.append(r_idx)
                cols.append(c_idx)
                vals.append(blocks.ravel())

    if rows:
        H = sp.coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(layout.dim, layout.dim)).tocsr()
    else:
        H = sp.csr_matrix((layout.dim, layout.dim))
    return H, b


def _retract_all(values, layout: _Layout, delta):
    out = dict(values)
    for key in layout.keys:
        off = layout.offset[key]
        d = _var_dim(key)
        if key[0] == "x":
            out[key] = values[key].retract(delta[off:off + d])
        else:
            out[key] = np.asarray(values[key], dtype=float) \
                + delta[off:off + d]
    return out


def _solve_damped(H: sp.csr_matrix, b, lam, n_simple: int, dense: bool):
    """Solve (H + lam*diag) d = b, eliminating the leading block-diagonal
    landmark block first (Schur trick)."""
    dim = H.shape[0]
    diag = H.diagonal()
    damp = lam * np.where(diag > 0, diag, 1.0)
    Hd = H + sp.diags(damp)

    if dense or n_simple == 0:
        Hfull = Hd.toarray() if sp.issparse(Hd) else Hd
        c, low = sla.cho_factor(Hfull, check_finite=False)
        return sla.cho_solve((c, low), b, check_finite=False)

    nl = n_simple * 3
    Hll = Hd[:nl, :nl]
    Hls = Hd[:nl, nl:].tocsr()
    Hss = Hd[nl:, nl:]
    bl, bs = b[:nl], b[nl:]

    blocks = np.zeros((n_simple, 3, 3))
    Hll_coo = Hll.tocoo()
    blocks[Hll_coo.row // 3, Hll_coo.row % 3, Hll_coo.col % 3] = Hll_coo.data
    # A landmark whose observations were all cheirality-skipped this
    # iteration carries no information; fix its step to zero.
    dets = np.abs(np.linalg.det(blocks))
    empty = dets < 1e-300
    if np.any(empty):
        blocks[empty] = np.eye(3)
    inv_blocks = np.linalg.inv(blocks)
    if np.any(empty):
        inv_blocks[empty] = 0.0
    Hll_inv = sp.block_diag(list(inv_blocks), format="csr") \
        if n_simple else sp.csr_matrix((0, 0))

    S = (Hss - Hls.T @ Hll_inv @ Hls).toarray()
    rhs = bs - Hls.T @ (Hll_inv @ bl)
    c, low = sla.cho_factor(S, check_finite=False)
    ds = sla.cho_solve((c, low), rhs, check_finite=False)
    dl = Hll_inv @ (bl - Hls @ ds)
    return np.concatenate([dl, ds])


def _levenberg_marquardt(factors, values, cfg: GraphConfig):
    # Landmarks first; those entangled with a marginal prior join the state
    # block so the leading block stays exactly block-diagonal.
    dense_landmarks = set()
    for f in factors:
        if f.kind == "marginal_prior":
            dense_landmarks |= {key for key in f.keys if key[0] == "l"}
    lm_keys = sorted({key for f in factors for key in f.keys
                      if key[0] == "l"})
    state_keys = sorted({key for f in factors for key in f.keys
                         if key[0] == "x"})
    simple = [key for key in lm_keys if key not in dense_landmarks]
    tail = [key for key in lm_keys if key in dense_landmarks] + state_keys
    layout = _Layout(simple + tail)
    n_nodes = len(layout.keys)
    dense = n_nodes < cfg.dense_threshold

    cost = _evaluate_cost(factors, values, cfg)
    initial_cost = cost
    lam = cfg.lambda_init
    rank_deficient = None
    termination = "max_iterations"
    iterations = 0

    for it in range(cfg.max_iterations):
        iterations = it + 1
        H, b = _build_normal_equations(factors, values, layout, cfg)
        if it == 0 and dense:
            # Jacobi-normalize before the eigenvalue test; raw VIO normal
            # matrices are ill-scaled by unit choice alone.
            Hd = H.toarray()
            d = np.diag(Hd).copy()
            if np.any(d <= 1e-300):
                rank_deficient = True
            else:
                s = 1.0 / np.sqrt(d)
                eigs = np.linalg.eigvalsh(Hd * np.outer(s, s))
                rank_deficient = bool(eigs[0] < 1e-8)

        accepted = False
        tiny_step = False
        while True:
            try:
                delta = _solve_damped(H, b, lam, len(simple), dense)
                if not np.all(np.isfinite(delta)):
                    raise np.linalg.LinAlgError("non-finite step")
                if np.linalg.norm(delta) < cfg.step_tol:
                    tiny_step = True
                    break
                candidate = _retract_all(values, layout, delta)
                new_cost = _evaluate_cost(factors, candidate, cfg)
                # Roundoff slack keeps a converged window from escalating.
                if np.isfinite(new_cost) \
                        and new_cost <= cost * (1.0 + 1e-12) + 1e-12:
                    accepted = True
                    break
            except (np.linalg.LinAlgError, RuntimeError):
                pass
            lam = max(lam * 10.0, 1e-4)
            if lam > cfg.lambda_max:
                break

        if tiny_step:
            termination = "step_converged"
            break
        if not accepted:
            raise OptimizationFailedError(
                "normal equations unusable after damping escalation "
                f"(lambda {lam:.1e})")

        step = float(np.linalg.norm(delta))
        drop = cost - new_cost
        values = candidate
        cost = min(new_cost, cost)
        lam = lam / 10.0 if lam > 1e-9 else 0.0
        if cost < 1e-18 or abs(drop) <= cfg.rel_cost_tol * max(cost, 1.0):
            termination = "cost_converged"
            break
        if step < cfg.step_tol:
            termination = "step_converged"
            break

    report = ConvergenceReport(
        converged=termination != "max_iterations",
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=cost,
        termination=termination,
        rank_deficient=rank_deficient,
    )
    return report, values


# ---------------------------------------------------------------------------
# Marginalization


def eliminate(consumed_factors, elim_keys, values,
              cfg: GraphConfig) -> MarginalPriorFactor | None:
    """Schur-complement the eliminated variables out of the consumed
    factors, returning the replacement prior over the boundary.

    Returns None when the consumed factors carry no information about any
    retained variable.
    """
    elim_set = set(elim_keys)
    boundary = sorted({key for f in consumed_factors for key in f.keys
                       if key not in elim_set})
    if not boundary:
        return None
    layout = _Layout(list(elim_keys) + boundary)
    ne = sum(_var_dim(key) for key in elim_keys)

    H, g = _build_normal_equations(consumed_factors, values, layout, cfg)
    H = H.toarray()
    g = -g   # builder returns b = -J^T r; we need the gradient J^T r

    H_ee = H[:ne, :ne]
    H_eb = H[:ne, ne:]
    H_bb = H[ne:, ne:]
    g_e = g[:ne]
    g_b = g[ne:]
    try:
        c, low = sla.cho_factor(H_ee, check_finite=False)
        X = sla.cho_solve((c, low), np.hstack([H_eb, g_e[:, None]]),
                          check_finite=False)
    except np.linalg.LinAlgError:
        X = np.linalg.pinv(H_ee) @ np.hstack([H_eb, g_e[:, None]])
    S = H_bb - H_eb.T @ X[:, :-1]
    s_vec = g_b - H_eb.T @ X[:, -1]
    S = 0.5 * (S + S.T)

    eigvals, eigvecs = np.linalg.eigh(S)
    tol = max(eigvals.max(), 0.0) * 1e-12
    keep = eigvals > tol
    if not np.any(keep):
        return None
    L = (np.sqrt(eigvals[keep])[:, None] * eigvecs[:, keep].T)
    c_vec = (eigvecs[:, keep] / np.sqrt(eigvals[keep])).T @ s_vec

    lin = {key: (values[key].copy() if key[0] == "x"
                 else np.asarray(values[key], dtype=float).copy())
           for key in boundary}
    return MarginalPriorFactor(boundary, lin, L, c_vec)
