import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import assert_jacobian_close, nav_state_jacobian, random_nav_state
from legvio.geometry import Rotation3, so3_exp, so3_log
from legvio.imu_preint import (
    GRAVITY,
    ImuNoiseModel,
    PreintegratedImuDelta,
    delta_compose,
    imu_residual,
    predict_state,
    preintegrate,
    residual_covariance,
)
from legvio.sensors import ImuSample, ImuSlice
from legvio.state import ImuBias, NavState


def make_slice(omegas, accels, dt):
    n = len(omegas)
    samples = [ImuSample(k * dt, np.asarray(omegas[k], dtype=float),
                         np.asarray(accels[k], dtype=float))
               for k in range(n)]
    return ImuSlice(samples, np.full(n, dt), 0.0, n * dt)


def constant_slice(omega, accel, duration, rate=400.0):
    n = int(round(duration * rate))
    dt = 1.0 / rate
    return make_slice([omega] * n, [accel] * n, dt)


NOISE = ImuNoiseModel()


class TestPreintegrate:
    def test_null_motion(self):
        sl = constant_slice([0, 0, 0], [0, 0, 0], 0.1)
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        assert_allclose(d.delta_R.matrix(), np.eye(3), atol=1e-12)
        assert_allclose(d.delta_v, np.zeros(3), atol=0)
        assert_allclose(d.delta_p, np.zeros(3), atol=0)
        assert d.dt_total == pytest.approx(0.1)

    def test_constant_acceleration(self):
        sl = constant_slice([0, 0, 0], [1, 0, 0], 1.0)
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        assert_allclose(d.delta_v, [1.0, 0.0, 0.0], atol=1e-6)
        # Euler discretization: 2e-3 slack on the 0.5 m closed form.
        assert_allclose(d.delta_p, [0.5, 0.0, 0.0], atol=2e-3)

    def test_constant_rotation_rate(self):
        n = 628
        sl = make_slice([[0, 0, 1.0]] * n, [[0, 0, 0]] * n, (np.pi / 2) / n)
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        expected = so3_exp([0.0, 0.0, np.pi / 2])
        err = so3_log(expected.inverse() @ d.delta_R)
        assert np.linalg.norm(err) < 1e-4

    def test_dt_total_is_interval_sum(self):
        rng = np.random.default_rng(1)
        dts = rng.uniform(2e-3, 3e-3, size=100)
        samples = [ImuSample(float(k), rng.normal(size=3),
                             rng.normal(size=3)) for k in range(100)]
        sl = ImuSlice(samples, dts, 0.0, float(dts.sum()))
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        assert d.dt_total == pytest.approx(dts.sum(), abs=1e-12)

    def test_covariance_spd_and_growing(self):
        rng = np.random.default_rng(2)
        traces = []
        for n in (1, 5, 20, 80):
            sl = make_slice(rng.normal(scale=0.3, size=(n, 3)),
                            rng.normal(scale=1.0, size=(n, 3)) + [0, 0, 9.81],
                            1.0 / 400.0)
            d = preintegrate(sl, ImuBias.zero(), NOISE)
            eigs = np.linalg.eigvalsh(d.covariance)
            assert np.min(eigs) > 0.0
            traces.append(np.trace(d.covariance))
        assert all(b > a for a, b in zip(traces, traces[1:]))

    def test_trace_monotone_per_sample(self):
        rng = np.random.default_rng(3)
        omegas = rng.normal(scale=0.3, size=(40, 3))
        accels = rng.normal(scale=1.0, size=(40, 3))
        prev = 0.0
        for n in range(1, 41):
            sl = make_slice(omegas[:n], accels[:n], 1.0 / 400.0)
            d = preintegrate(sl, ImuBias.zero(), NOISE)
            tr = np.trace(d.covariance)
            assert tr > prev
            prev = tr

    def test_rejects_nonfinite(self):
        sl = make_slice([[0, 0, np.nan]], [[0, 0, 0]], 0.0025)
        with pytest.raises(ValueError):
            preintegrate(sl, ImuBias.zero(), NOISE)

    def test_rejects_empty(self):
        sl = ImuSlice([], np.array([]), 0.0, 0.1)
        with pytest.raises(ValueError):
            preintegrate(sl, ImuBias.zero(), NOISE)

    def test_composition_of_contiguous_segments(self):
        rng = np.random.default_rng(4)
        bias = ImuBias(rng.normal(scale=0.01, size=3),
                       rng.normal(scale=0.05, size=3))
        omegas = rng.normal(scale=0.5, size=(120, 3))
        accels = rng.normal(scale=1.5, size=(120, 3)) + [0, 0, 9.81]
        dt = 1.0 / 400.0
        full = preintegrate(make_slice(omegas, accels, dt), bias, NOISE)
        first = preintegrate(make_slice(omegas[:70], accels[:70], dt), bias,
                             NOISE)
        second = preintegrate(make_slice(omegas[70:], accels[70:], dt), bias,
                              NOISE)
        combo = delta_compose(first, second)
        assert_allclose(combo.delta_R.matrix(), full.delta_R.matrix(),
                        atol=1e-8)
        assert_allclose(combo.delta_p, full.delta_p, atol=1e-8)
        assert_allclose(combo.delta_v, full.delta_v, atol=1e-8)
        assert_allclose(combo.covariance, full.covariance, rtol=1e-6,
                        atol=1e-18)
        assert_allclose(combo.dR_dbg, full.dR_dbg, atol=1e-8)
        assert_allclose(combo.dp_dbg, full.dp_dbg, atol=1e-8)
        assert_allclose(combo.dp_dba, full.dp_dba, atol=1e-8)
        assert_allclose(combo.dv_dbg, full.dv_dbg, atol=1e-8)
        assert_allclose(combo.dv_dba, full.dv_dba, atol=1e-8)


def zoh_reference_integration(x0: NavState, sl: ImuSlice, bias: ImuBias,
                              substeps=10, gravity=GRAVITY):
    """Dense integration of the held measurements, exact per-substep rotation.

    Independent of the preintegration code path: integrates the state
    directly, subdividing each hold interval.
    """
    R = x0.rotation
    p = x0.position.copy()
    v = x0.velocity.copy()
    g = np.asarray(gravity)
    for sample, dt in zip(sl.samples, sl.dts):
        w = sample.omega - bias.gyro
        a = sample.accel - bias.accel
        h = dt / substeps
        for _ in range(substeps):
            a_w = g + R.rotate(a)
            p = p + v * h + 0.5 * a_w * h * h
            v = v + a_w * h
            R = R @ so3_exp(w * h)
    return NavState(R, p, v, bias)


class TestPredictState:
    def test_stationary_equilibrium(self):
        x = NavState.identity()
        accel = -GRAVITY  # specific force measured at rest, level pose
        sl = constant_slice([0, 0, 0], accel, 0.5)
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        x1 = predict_state(x, d, GRAVITY)
        assert_allclose(x1.position, np.zeros(3), atol=1e-9)
        assert_allclose(x1.velocity, np.zeros(3), atol=1e-9)
        assert_allclose(x1.rotation.matrix(), np.eye(3), atol=1e-12)

    def test_stationary_any_duration(self):
        x = NavState.identity()
        for duration in (0.1, 1.0, 5.0):
            sl = constant_slice([0, 0, 0], -GRAVITY, duration)
            d = preintegrate(sl, ImuBias.zero(), NOISE)
            r, _, _ = imu_residual(x, x, d, GRAVITY)
            assert np.linalg.norm(r) < 1e-9

    def test_free_fall(self):
        x = NavState(Rotation3.identity(), np.zeros(3),
                     np.array([0.3, 0.0, 0.0]), ImuBias.zero())
        sl = constant_slice([0, 0, 0], [0, 0, 0], 1.0)
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        x1 = predict_state(x, d, GRAVITY)
        assert_allclose(x1.velocity, x.velocity + GRAVITY, atol=1e-9)
        assert_allclose(x1.position, x.velocity + 0.5 * GRAVITY, atol=1e-9)

    def test_matches_dense_integration_oracle(self):
        rng = np.random.default_rng(5)
        worst_p, worst_r = 0.0, 0.0
        for _ in range(10):
            x0 = random_nav_state(rng, bias_scale=0.0)
            n = 400
            t = np.arange(n) / 400.0
            omegas = np.stack([
                0.2 * np.sin(2 * np.pi * f * t + ph)
                for f, ph in zip(rng.uniform(0.3, 2.0, 3),
                                 rng.uniform(0, 2 * np.pi, 3))], axis=1)
            base = rng.normal(scale=1.0, size=3) + [0, 0, 9.81]
            accels = base + np.stack([
                1.0 * np.sin(2 * np.pi * f * t + ph)
                for f, ph in zip(rng.uniform(0.3, 2.0, 3),
                                 rng.uniform(0, 2 * np.pi, 3))], axis=1)
            sl = make_slice(omegas, accels, 1.0 / 400.0)
            d = preintegrate(sl, x0.bias, NOISE)
            xp = predict_state(x0, d, GRAVITY)
            ref = zoh_reference_integration(x0, sl, x0.bias)
            worst_p = max(worst_p,
                          float(np.linalg.norm(xp.position - ref.position)))
            worst_r = max(worst_r, float(np.linalg.norm(
                so3_log(ref.rotation.inverse() @ xp.rotation))))
        assert worst_p < 1e-3
        assert worst_r < 1e-4


class TestImuResidual:
    def test_zero_at_prediction(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            x0 = random_nav_state(rng)
            sl = make_slice(rng.normal(scale=0.5, size=(40, 3)),
                            rng.normal(scale=1.0, size=(40, 3)) + [0, 0, 9.81],
                            1.0 / 400.0)
            d = preintegrate(sl, x0.bias, NOISE)
            x1 = predict_state(x0, d, GRAVITY)
            r, _, _ = imu_residual(x0, x1, d, GRAVITY)
            assert np.linalg.norm(r) < 1e-10

    def test_bias_difference_block(self):
        rng = np.random.default_rng(7)
        x0 = random_nav_state(rng)
        sl = constant_slice([0, 0, 0], -GRAVITY, 0.1)
        d = preintegrate(sl, x0.bias, NOISE)
        x1 = predict_state(x0, d, GRAVITY)
        db = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.01])
        x1b = NavState(x1.rotation, x1.position, x1.velocity,
                       ImuBias.from_vector(x1.bias.vector() + db))
        r, _, _ = imu_residual(x0, x1b, d, GRAVITY)
        assert_allclose(r[9:15], db, atol=1e-15)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            x0 = random_nav_state(rng, rot_scale=1.5)
            x1 = random_nav_state(rng, rot_scale=1.5)
            lin_bias = ImuBias.from_vector(
                x0.bias.vector() + rng.normal(scale=2e-3, size=6))
            sl = make_slice(rng.normal(scale=0.5, size=(12, 3)),
                            rng.normal(scale=1.0, size=(12, 3)) + [0, 0, 9.81],
                            1.0 / 400.0)
            d = preintegrate(sl, lin_bias, NOISE)
            _, J0, J1 = imu_residual(x0, x1, d, GRAVITY)
            J0_fd = nav_state_jacobian(
                lambda s: imu_residual(s, x1, d, GRAVITY)[0], x0)
            J1_fd = nav_state_jacobian(
                lambda s: imu_residual(x0, s, d, GRAVITY)[0], x1)
            assert_jacobian_close(J0, J0_fd, rtol=1e-5, label="imu/prev")
            assert_jacobian_close(J1, J1_fd, rtol=1e-5, label="imu/curr")

    def test_residual_covariance_blocks(self):
        sl = constant_slice([0, 0, 0.1], [0.1, 0, 9.81], 0.1)
        d = preintegrate(sl, ImuBias.zero(), NOISE)
        cov = residual_covariance(d, NOISE)
        assert cov.shape == (15, 15)
        assert_allclose(cov[0:9, 0:9], d.covariance, atol=0)
        assert_allclose(np.diag(cov)[9:12],
                        np.full(3, NOISE.gyro_walk ** 2 * d.dt_total))
        assert np.min(np.linalg.eigvalsh(cov)) > 0
