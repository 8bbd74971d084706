"""Timestamped sensor streams, keyframe scheduling, and dataset files.

Dataset layout (one CSV per stream, timestamps in seconds, double precision):

* ``imu.csv``: ``t, wx, wy, wz, ax, ay, az``
* ``leg_odom.csv``: ``t, x, y, z, qw, qx, qy, qz, cov00..cov55`` (36
  row-major covariance entries over (rotation, translation) tangent space)
* ``frames.csv``: ``t, path, depth_path`` (``depth_path`` may be empty);
  images are 8-bit PGM, depth maps 16-bit PGM in millimeters (0 = invalid)
* ``observations.csv`` (simulator shortcut past the pixel pipeline):
  ``t, track_id, u, v, depth`` with ``depth`` empty when unavailable
"""

from __future__ import annotations

import csv
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataGapError, DatasetError
from .geometry import Pose3, Rotation3, pose_interpolate


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray   # rad/s, body frame
    accel: np.ndarray   # m/s^2 proper acceleration, body frame


@dataclass(frozen=True)
class LegOdomSample:
    t: float
    pose: Pose3                 # filter world frame
    covariance: np.ndarray      # 6x6 over (rotation, translation) tangent


@dataclass
class CameraFrame:
    t: float
    image: np.ndarray | None = None        # uint8, height x width
    depth: np.ndarray | None = None        # float meters, 0 = invalid
    image_path: str | None = None
    depth_path: str | None = None


@dataclass
class KeyframeClock:
    """Keyframe index bookkeeping: one keyframe per accepted camera frame."""

    every: int = 3
    indices: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    _frame_count: int = 0

    def tick(self, t: float) -> int | None:
        """Register a camera frame; returns the keyframe index if selected."""
        selected = self._frame_count % self.every == 0
        self._frame_count += 1
        if not selected:
            return None
        if self.times and t <= self.times[-1]:
            raise ValueError(f"keyframe timestamps must increase, got {t}")
        idx = len(self.indices)
        self.indices.append(idx)
        self.times.append(t)
        return idx


@dataclass(frozen=True)
class ImuSlice:
    """Integration plan for one keyframe interval.

    ``samples[k]`` holds for ``dts[k]`` seconds under a zero-order hold;
    the first and last entries carry the boundary-corrected intervals so
    that ``sum(dts)`` equals the keyframe spacing exactly.
    """

    samples: list[ImuSample]
    dts: np.ndarray
    t_start: float
    t_end: float

    @property
    def first_dt(self) -> float:
        return float(self.dts[0])

    @property
    def last_dt(self) -> float:
        return float(self.dts[-1])


class ImuStream:
    """Append-only IMU sample sequence with window slicing."""

    def __init__(self, samples=(), nominal_period: float | None = None):
        self._samples: list[ImuSample] = []
        self._times: list[float] = []
        for s in samples:
            self.append(s)
        self._nominal_period = nominal_period

    def append(self, sample: ImuSample):
        if self._times and sample.t <= self._times[-1]:
            raise ValueError("IMU timestamps must be strictly increasing")
        if not (np.all(np.isfinite(sample.omega))
                and np.all(np.isfinite(sample.accel))):
            raise ValueError(f"non-finite IMU sample at t={sample.t}")
        self._samples.append(sample)
        self._times.append(sample.t)

    def __len__(self):
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples)

    @property
    def times(self):
        return np.asarray(self._times)

    def nominal_period(self) -> float:
        if self._nominal_period is not None:
            return self._nominal_period
        if len(self._times) < 2:
            return 0.0025
        return float(np.median(np.diff(self._times)))

    def in_window(self, t_start: float, t_end: float) -> list[ImuSample]:
        """Samples with t_start <= t < t_end (the canonical partition)."""
        lo = bisect_left(self._times, t_start)
        hi = bisect_left(self._times, t_end)
        return self._samples[lo:hi]


def slice_imu(stream: ImuStream, t_prev: float, t_curr: float) -> ImuSlice:
    """Cut the integration plan for the keyframe interval [t_prev, t_curr).

    Keyframes rarely coincide with IMU timestamps, so the first and last
    integration intervals are shortened/extended to the actual boundary
    times under the constant-rate-between-samples assumption. When the
    window contains no samples at all (sensor dropout) the nearest sample
    is held over the whole interval to keep the graph connected.
    """
    if not t_prev < t_curr:
        raise ValueError(f"need t_prev < t_curr, got {t_prev} >= {t_curr}")
    times = stream._times
    if not times:
        raise DataGapError("empty IMU stream")

    inside = stream.in_window(t_prev, t_curr)
    if not inside:
        lo = bisect_right(times, t_prev) - 1
        nearest = stream._samples[max(lo, 0)]
        return ImuSlice([nearest], np.array([t_curr - t_prev]), t_prev, t_curr)

    applied: list[ImuSample] = []
    knots = [t_prev]
    if inside[0].t > t_prev:
        # Split the straddling sample's interval across the boundary.
        lo = bisect_right(times, t_prev) - 1
        if lo < 0:
            raise DataGapError(
                f"IMU stream starts at {times[0]:.6f}, after window start "
                f"{t_prev:.6f}")
        applied.append(stream._samples[lo])
        knots.append(inside[0].t)
    for k, s in enumerate(inside):
        applied.append(s)
        if k + 1 < len(inside):
            knots.append(inside[k + 1].t)
    knots.append(t_curr)

    dts = np.diff(np.asarray(knots))
    limit = 3.0 * stream.nominal_period()
    if np.any(dts > limit):
        worst = float(np.max(dts))
        raise DataGapError(
            f"IMU gap of {worst * 1e3:.2f} ms inside [{t_prev:.6f}, "
            f"{t_curr:.6f}] exceeds 3x nominal period "
            f"({stream.nominal_period() * 1e3:.2f} ms)")
    return ImuSlice(applied, dts, t_prev, t_curr)


class LegOdomHistory:
    """Pose-with-covariance stream from the external kinematic filter."""

    def __init__(self, samples=()):
        self._samples: list[LegOdomSample] = []
        self._times: list[float] = []
        for s in samples:
            self.append(s)

    def append(self, sample: LegOdomSample):
        if self._times and sample.t <= self._times[-1]:
            raise ValueError("leg odometry timestamps must increase")
        self._samples.append(sample)
        self._times.append(sample.t)

    def __len__(self):
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples)

    def span(self) -> tuple[float, float]:
        if not self._times:
            raise ValueError("empty leg odometry history")
        return self._times[0], self._times[-1]


def interpolate_leg_odom(history: LegOdomHistory,
                         t: float) -> tuple[Pose3, np.ndarray]:
    """Pose and covariance at time t from the bracketing filter samples.

    Covariance is interpolated elementwise, symmetrized, and nudged back
    to positive definite if interpolation left a tiny negative eigenvalue.
    """
    times = history._times
    if not times or t < times[0] or t > times[-1]:
        lo = times[0] if times else float("nan")
        hi = times[-1] if times else float("nan")
        raise ValueError(
            f"t={t} outside leg odometry history [{lo}, {hi}]")
    idx = bisect_left(times, t)
    if idx < len(times) and times[idx] == t:
        s = history._samples[idx]
        return s.pose, s.covariance.copy()
    a = history._samples[idx - 1]
    b = history._samples[idx]
    pose = pose_interpolate(a.pose, a.t, b.pose, b.t, t)
    alpha = (t - a.t) / (b.t - a.t)
    cov = (1.0 - alpha) * a.covariance + alpha * b.covariance
    cov = 0.5 * (cov + cov.T)
    min_eig = float(np.min(np.linalg.eigvalsh(cov)))
    if min_eig < 1e-12:
        cov = cov + (1e-12 - min_eig) * np.eye(6)
    return pose, cov


# ---------------------------------------------------------------------------
# Dataset files


def _open_csv(path: Path):
    try:
        return path.open("r", newline="")
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e


def _parse_row(path, line_no, row, n_min):
    if len(row) < n_min:
        raise DatasetError(
            f"{path}:{line_no}: expected at least {n_min} columns, "
            f"got {len(row)}")
    try:
        return [float(x) for x in row[:n_min]]
    except ValueError as e:
        raise DatasetError(f"{path}:{line_no}: {e}") from e


def load_imu_csv(path) -> ImuStream:
    path = Path(path)
    stream = ImuStream()
    with _open_csv(path) as f:
        reader = csv.reader(f)
        for line_no, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith(("#", "t")):
                continue
            vals = _parse_row(path, line_no, row, 7)
            stream.append(ImuSample(vals[0], np.array(vals[1:4]),
                                    np.array(vals[4:7])))
    if len(stream) == 0:
        raise DatasetError(f"{path}: no IMU samples")
    return stream


def save_imu_csv(path, samples):
    with Path(path).open("w", newline="") as f:
        f.write("t,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            vals = [s.t, *s.omega, *s.accel]
            f.write(",".join(_fmt(v) for v in vals) + "\n")


def load_leg_odom_csv(path) -> LegOdomHistory:
    path = Path(path)
    hist = LegOdomHistory()
    with _open_csv(path) as f:
        reader = csv.reader(f)
        for line_no, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith(("#", "t")):
                continue
            vals = _parse_row(path, line_no, row, 44)
            pose = Pose3(
                Rotation3.from_quaternion(vals[4], vals[5], vals[6], vals[7]),
                np.array(vals[1:4]))
            cov = np.array(vals[8:44]).reshape(3 + 3, 6)
            hist.append(LegOdomSample(vals[0], pose, cov))
    if len(hist) == 0:
        raise DatasetError(f"{path}: no leg odometry samples")
    return hist


def save_leg_odom_csv(path, samples):
    with Path(path).open("w", newline="") as f:
        header = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"]
        header += [f"cov{i}{j}" for i in range(6) for j in range(6)]
        f.write(",".join(header) + "\n")
        for s in samples:
            q = s.pose.rotation.quaternion
            vals = [s.t, *s.pose.translation, *q, *s.covariance.ravel()]
            f.write(",".join(_fmt(v) for v in vals) + "\n")


def load_frames_csv(path) -> list[CameraFrame]:
    path = Path(path)
    frames = []
    with _open_csv(path) as f:
        reader = csv.reader(f)
        for line_no, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith(("#", "t")):
                continue
            if len(row) < 2:
                raise DatasetError(f"{path}:{line_no}: expected t, path")
            try:
                t = float(row[0])
            except ValueError as e:
                raise DatasetError(f"{path}:{line_no}: {e}") from e
            depth_path = row[2].strip() if len(row) > 2 and row[2].strip() else None
            frames.append(CameraFrame(t, image_path=row[1].strip(),
                                      depth_path=depth_path))
    return frames


@dataclass(frozen=True)
class PixelObservation:
    t: float
    track_id: int
    u: float
    v: float
    depth: float | None


def load_observations_csv(path) -> list[PixelObservation]:
    path = Path(path)
    out = []
    with _open_csv(path) as f:
        reader = csv.reader(f)
        for line_no, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith(("#", "t")):
                continue
            if len(row) < 4:
                raise DatasetError(
                    f"{path}:{line_no}: expected t, track_id, u, v[, depth]")
            try:
                t = float(row[0])
                tid = int(row[1])
                u, v = float(row[2]), float(row[3])
                depth = None
                if len(row) > 4 and row[4].strip():
                    depth = float(row[4])
                    if not np.isfinite(depth):
                        depth = None
            except ValueError as e:
                raise DatasetError(f"{path}:{line_no}: {e}") from e
            out.append(PixelObservation(t, tid, u, v, depth))
    return out


def save_observations_csv(path, observations):
    with Path(path).open("w", newline="") as f:
        f.write("t,track_id,u,v,depth\n")
        for o in observations:
            depth = _fmt(o.depth) if o.depth is not None else ""
            f.write(f"{_fmt(o.t)},{o.track_id},{_fmt(o.u)},{_fmt(o.v)},"
                    f"{depth}\n")


def _fmt(x) -> str:
    """Stable float formatting: identical runs produce identical bytes."""
    return format(float(x), ".12g")


# ---------------------------------------------------------------------------
# PGM image IO (8-bit intensity, 16-bit depth in millimeters)


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as f:
        data = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            # Tokenize header, skipping comments.
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        magic, width, height, maxval = (fields[0], int(fields[1]),
                                        int(fields[2]), int(fields[3]))
        pos += 1  # single whitespace after maxval
        if magic == b"P5":
            dtype = np.dtype(">u2") if maxval > 255 else np.uint8
            img = np.frombuffer(data, dtype=dtype, count=width * height,
                                offset=pos)
            return img.reshape(height, width).astype(
                np.uint16 if maxval > 255 else np.uint8)
        if magic == b"P2":
            vals = np.array(data[pos:].split(), dtype=int)
            return vals.reshape(height, width).astype(
                np.uint16 if maxval > 255 else np.uint8)
    except (ValueError, IndexError) as e:
        raise DatasetError(f"{path}: malformed PGM ({e})") from e
    raise DatasetError(f"{path}: unsupported PGM magic {magic!r}")


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        maxval = 255
        payload = image.tobytes()
    elif image.dtype in (np.uint16, np.dtype(">u2")):
        maxval = 65535
        payload = image.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported PGM dtype {image.dtype}")
    h, w = image.shape
    with Path(path).open("wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(payload)


def read_depth_pgm(path) -> np.ndarray:
    """Depth map in meters; 0 marks invalid pixels."""
    raw = read_pgm(path)
    return raw.astype(float) * 1e-3


def write_depth_pgm(path, depth_m: np.ndarray):
    mm = np.clip(np.nan_to_num(depth_m, nan=0.0) * 1e3, 0, 65535)
    write_pgm(path, mm.round().astype(np.uint16))
