import numpy as np
import pytest
from numpy.testing import assert_allclose

from legvio.errors import DataGapError, DatasetError
from legvio.geometry import Pose3, Rotation3, so3_exp
from legvio.sensors import (
    ImuSample,
    ImuStream,
    KeyframeClock,
    LegOdomHistory,
    LegOdomSample,
    interpolate_leg_odom,
    load_imu_csv,
    load_leg_odom_csv,
    load_observations_csv,
    read_depth_pgm,
    read_pgm,
    save_imu_csv,
    save_leg_odom_csv,
    save_observations_csv,
    slice_imu,
    write_depth_pgm,
    write_pgm,
    PixelObservation,
    slice_imu as _slice,
)


def make_stream(times):
    stream = ImuStream()
    for k, t in enumerate(times):
        stream.append(ImuSample(t, np.array([0.0, 0.0, 0.1 * k]),
                                np.array([0.1 * k, 0.0, 9.81])))
    return stream


class TestSliceImu:
    def test_aligned_400hz(self):
        period = 1.0 / 400.0
        stream = make_stream(np.arange(0, 200) * period)
        sl = slice_imu(stream, 40 * period, 80 * period)
        assert len(sl.samples) == 40
        assert sl.samples[0].t == pytest.approx(40 * period)
        assert_allclose(sl.dts, np.full(40, period), atol=1e-15)
        assert abs(sl.dts.sum() - 40 * period) < 1e-12
        assert sl.first_dt == pytest.approx(period)

    def test_misaligned_boundary_corrections(self):
        # Samples every 2.5 ms, keyframes 1.2 ms after a sample.
        period = 2.5e-3
        stream = make_stream(np.arange(0, 400) * period)
        t_prev = 10 * period + 1.2e-3
        t_curr = 50 * period + 1.2e-3
        sl = slice_imu(stream, t_prev, t_curr)
        assert sl.first_dt == pytest.approx(1.3e-3)
        assert sl.last_dt == pytest.approx(1.2e-3)
        # first applied measurement is the straddling one at sample 10
        assert sl.samples[0].t == pytest.approx(10 * period)
        assert abs(sl.dts.sum() - (t_curr - t_prev)) < 1e-12

    def test_durations_sum_exactly(self):
        rng = np.random.default_rng(0)
        times = np.cumsum(rng.uniform(2.0e-3, 3.0e-3, size=500))
        stream = make_stream(times)
        t0, t1 = times[5] + 1e-4, times[400] + 7e-4
        sl = slice_imu(stream, t0, t1)
        assert abs(sl.dts.sum() - (t1 - t0)) < 1e-9

    def test_empty_overlap_uses_nearest_sample_hold(self):
        stream = make_stream([0.0, 1.0])
        sl = slice_imu(stream, 0.2, 0.3)
        assert len(sl.samples) == 1
        assert sl.samples[0].t == 0.0
        assert_allclose(sl.dts, [0.1])

    def test_gap_raises(self):
        period = 2.5e-3
        times = list(np.arange(0, 100) * period)
        times += list(np.arange(110, 200) * period)  # 10-sample hole
        stream = make_stream(times)
        with pytest.raises(DataGapError):
            slice_imu(stream, 0.1, 0.4)

    def test_partition_no_shared_no_missed(self):
        period = 2.5e-3
        stream = make_stream(np.arange(0, 1000) * period)
        cuts = [0.0501, 0.1502, 0.2503, 0.3504, 0.4505]
        seen = []
        for a, b in zip(cuts, cuts[1:]):
            seen.extend(s.t for s in stream.in_window(a, b))
        expected = [s.t for s in stream.in_window(cuts[0], cuts[-1])]
        assert seen == expected
        assert len(seen) == len(set(seen))

    def test_bad_window_raises(self):
        stream = make_stream([0.0, 0.01])
        with pytest.raises(ValueError):
            slice_imu(stream, 0.5, 0.5)


class TestLegOdomInterpolation:
    def make_history(self):
        hist = LegOdomHistory()
        for k in range(5):
            pose = Pose3(Rotation3.identity(), np.array([0.1 * k, 0.0, 0.0]))
            cov = np.eye(6) * (1.0 + k)
            hist.append(LegOdomSample(0.5 * k, pose, cov))
        return hist

    def test_exact_sample_time(self):
        hist = self.make_history()
        pose, cov = interpolate_leg_odom(hist, 1.0)
        assert_allclose(pose.translation, [0.2, 0.0, 0.0], atol=0)
        assert_allclose(cov, np.eye(6) * 3.0, atol=0)

    def test_linear_midpoint_translation(self):
        hist = self.make_history()
        pose, _ = interpolate_leg_odom(hist, 0.25)
        assert_allclose(pose.translation, [0.05, 0.0, 0.0], atol=1e-12)

    def test_midpoint_covariance(self):
        hist = LegOdomHistory()
        hist.append(LegOdomSample(0.0, Pose3.identity(), np.eye(6) * 1.0))
        hist.append(LegOdomSample(1.0, Pose3.identity(), np.eye(6) * 3.0))
        _, cov = interpolate_leg_odom(hist, 0.5)
        assert_allclose(cov, np.eye(6) * 2.0, atol=1e-12)

    def test_out_of_span_raises(self):
        hist = self.make_history()
        with pytest.raises(ValueError):
            interpolate_leg_odom(hist, -0.1)
        with pytest.raises(ValueError):
            interpolate_leg_odom(hist, 99.0)

    def test_interpolated_covariance_symmetric_pd(self):
        rng = np.random.default_rng(3)
        hist = LegOdomHistory()
        for k in range(3):
            A = rng.normal(size=(6, 6))
            cov = A @ A.T + 1e-6 * np.eye(6)
            hist.append(LegOdomSample(float(k), Pose3.identity(), cov))
        _, cov = interpolate_leg_odom(hist, 0.37)
        assert_allclose(cov, cov.T, atol=0)
        assert np.min(np.linalg.eigvalsh(cov)) > 0


class TestKeyframeClock:
    def test_every_third_frame(self):
        clock = KeyframeClock(every=3)
        picks = [clock.tick(t) for t in np.arange(10) / 30.0]
        assert picks == [0, None, None, 1, None, None, 2, None, None, 3]
        assert_allclose(clock.times, [0.0, 0.1, 0.2, 0.3])

    def test_strictly_increasing(self):
        clock = KeyframeClock(every=1)
        clock.tick(0.0)
        with pytest.raises(ValueError):
            clock.tick(0.0)


class TestDatasetFiles:
    def test_imu_round_trip(self, tmp_path):
        samples = [ImuSample(0.1 * k, np.array([1.0, 2.0, 3.0]) * k,
                             np.array([-1.0, 0.5, 9.0]) * k)
                   for k in range(5)]
        path = tmp_path / "imu.csv"
        save_imu_csv(path, samples)
        stream = load_imu_csv(path)
        assert len(stream) == 5
        for orig, loaded in zip(samples, stream):
            assert loaded.t == pytest.approx(orig.t)
            assert_allclose(loaded.omega, orig.omega)
            assert_allclose(loaded.accel, orig.accel)

    def test_leg_odom_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        samples = []
        for k in range(4):
            A = rng.normal(size=(6, 6))
            samples.append(LegOdomSample(
                0.2 * k,
                Pose3(so3_exp(rng.normal(scale=0.3, size=3)),
                      rng.normal(size=3)),
                A @ A.T + np.eye(6)))
        path = tmp_path / "leg_odom.csv"
        save_leg_odom_csv(path, samples)
        hist = load_leg_odom_csv(path)
        for orig, loaded in zip(samples, hist):
            assert_allclose(loaded.pose.matrix(), orig.pose.matrix(),
                            atol=1e-9)
            assert_allclose(loaded.covariance, orig.covariance, rtol=1e-9)

    def test_observations_round_trip(self, tmp_path):
        obs = [
            PixelObservation(0.0, 3, 100.5, 200.25, 4.0),
            PixelObservation(0.1, 4, 50.0, 60.0, None),
        ]
        path = tmp_path / "observations.csv"
        save_observations_csv(path, obs)
        loaded = load_observations_csv(path)
        assert loaded[0].depth == pytest.approx(4.0)
        assert loaded[1].depth is None
        assert loaded[1].track_id == 4

    def test_malformed_reports_file_and_line(self, tmp_path):
        path = tmp_path / "imu.csv"
        path.write_text("t,wx,wy,wz,ax,ay,az\n0.0,1,2,3,4,5,nope\n")
        with pytest.raises(DatasetError) as err:
            load_imu_csv(path)
        assert "imu.csv:2" in str(err.value)

    def test_pgm_round_trip_8bit(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, size=(12, 17), dtype=np.uint8)
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        assert_allclose(read_pgm(path), img)

    def test_depth_pgm_millimeters(self, tmp_path):
        depth = np.array([[0.0, 1.2345], [10.0, 0.5]])
        path = tmp_path / "d.pgm"
        write_depth_pgm(path, depth)
        loaded = read_depth_pgm(path)
        assert_allclose(loaded, [[0.0, 1.234], [10.0, 0.5]], atol=5.1e-4)
