"""Shared helpers: finite-difference Jacobians and random-state factories."""

import numpy as np

from legvio.geometry import Pose3, so3_exp
from legvio.state import ImuBias, NavState


def numeric_jacobian(f, x0, dim, retract, eps=1e-6):
    """Central finite differences of f along a retraction at x0.

    ``f`` maps a point to an (m,) residual, ``retract(x0, d)`` perturbs the
    point by a ``dim``-vector.
    """
    r0 = np.asarray(f(x0))
    J = np.zeros((r0.size, dim))
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = eps
        rp = np.asarray(f(retract(x0, d)))
        rm = np.asarray(f(retract(x0, -d)))
        J[:, k] = (rp - rm) / (2.0 * eps)
    return J


def nav_state_jacobian(f, x: NavState, eps=1e-6):
    return numeric_jacobian(f, x, NavState.DIM, lambda s, d: s.retract(d),
                            eps=eps)


def assert_jacobian_close(J_analytic, J_numeric, rtol=1e-5, label=""):
    scale = max(np.max(np.abs(J_numeric)), 1.0)
    err = np.max(np.abs(J_analytic - J_numeric)) / scale
    assert err < rtol, (
        f"{label} Jacobian mismatch: relative error {err:.3e} "
        f"(tolerance {rtol:.0e})")


def random_nav_state(rng, rot_scale=1.0, pos_scale=2.0, vel_scale=1.0,
                     bias_scale=0.05):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return NavState(
        so3_exp(axis * rng.uniform(0.0, rot_scale)),
        rng.normal(scale=pos_scale, size=3),
        rng.normal(scale=vel_scale, size=3),
        ImuBias(rng.normal(scale=bias_scale, size=3),
                rng.normal(scale=bias_scale, size=3)),
    )


def random_pose(rng, rot_scale=1.0, pos_scale=2.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose3(so3_exp(axis * rng.uniform(0.0, rot_scale)),
                 rng.normal(scale=pos_scale, size=3))
