"""Pixel pipeline: equalization, corner detection, tracking, outlier
rejection, and the zero-velocity detector.

The tracker runs on every camera frame; the factor graph only consumes the
per-keyframe observations recorded on the tracks. All randomness is driven
by an injected generator so identical inputs reproduce identical masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass
class TrackObservation:
    keyframe: int
    u: float
    v: float
    depth: float | None = None


class FeatureTrack:
    """One tracked image feature.

    ``observations`` holds per-keyframe measurements (strictly increasing
    keyframe indices); ``recent`` keeps the last few per-frame positions for
    the zero-velocity test. ``age`` counts keyframe observations.
    """

    __slots__ = ("id", "observations", "recent", "alive")

    def __init__(self, track_id: int):
        self.id = track_id
        self.observations: list[TrackObservation] = []
        self.recent: dict[int, tuple[float, float]] = {}
        self.alive = True

    @property
    def age(self) -> int:
        return len(self.observations)

    @property
    def position(self):
        frame = max(self.recent)
        return np.array(self.recent[frame])

    def add_frame(self, frame: int, u: float, v: float, keep: int = 16):
        self.recent[frame] = (float(u), float(v))
        if len(self.recent) > keep:
            del self.recent[min(self.recent)]

    def add_keyframe_observation(self, keyframe: int, u: float, v: float,
                                 depth: float | None = None):
        if self.observations and keyframe <= self.observations[-1].keyframe:
            raise ValueError("keyframe indices must increase")
        self.observations.append(TrackObservation(keyframe, float(u),
                                                  float(v), depth))


@dataclass
class FrontendConfig:
    max_features: int = 150
    min_spacing: float = 20.0          # px between features
    harris_threshold: float = 0.01     # quality level relative to max response
    klt_levels: int = 3
    klt_window: int = 21
    klt_iterations: int = 30
    klt_epsilon: float = 0.01          # px, per-iteration update norm
    klt_max_residual: float = 20.0     # mean abs intensity error gate
    klt_fb_threshold: float = 1.0      # px forward-backward consistency
    ransac_threshold: float = 1.0      # px Sampson distance
    ransac_confidence: float = 0.99
    ransac_max_iterations: int = 200
    zvu_beta: float = 0.5              # px mean per-frame motion
    zvu_window: int = 10               # successive frames

    def __post_init__(self):
        for name in ("max_features", "min_spacing", "harris_threshold",
                     "klt_levels", "klt_window", "klt_iterations",
                     "klt_epsilon", "ransac_threshold", "ransac_confidence",
                     "zvu_beta", "zvu_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def equalize(image: np.ndarray) -> np.ndarray:
    """Global histogram equalization of an 8-bit image.

    A zero-variance image maps to itself by convention.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("expected an 8-bit intensity image")
    hist = np.bincount(image.ravel(), minlength=256)
    nonzero = np.nonzero(hist)[0]
    if nonzero.size <= 1:
        return image.copy()
    cdf = np.cumsum(hist)
    cdf_min = cdf[nonzero[0]]
    lut = np.round((cdf - cdf_min) * 255.0 / (image.size - cdf_min))
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[image]


def harris_response(image: np.ndarray, k: float = 0.04,
                    sigma: float = 1.5) -> np.ndarray:
    I = image.astype(float)
    Ix = ndimage.sobel(I, axis=1, mode="nearest") / 8.0
    Iy = ndimage.sobel(I, axis=0, mode="nearest") / 8.0
    Sxx = ndimage.gaussian_filter(Ix * Ix, sigma, mode="nearest")
    Syy = ndimage.gaussian_filter(Iy * Iy, sigma, mode="nearest")
    Sxy = ndimage.gaussian_filter(Ix * Iy, sigma, mode="nearest")
    return Sxx * Syy - Sxy * Sxy - k * (Sxx + Syy) ** 2


def detect_features(image: np.ndarray, existing, cfg: FrontendConfig):
    """New corner locations, strongest first, respecting the spacing rule.

    ``existing`` is an (n, 2) array (or list) of active feature positions
    that both count against the feature budget and repel new detections.
    """
    existing = np.asarray(existing, dtype=float).reshape(-1, 2)
    budget = cfg.max_features - len(existing)
    if budget <= 0:
        return []
    R = harris_response(image)
    peak = float(R.max())
    if peak <= 0.0:
        return []
    is_max = R == ndimage.maximum_filter(R, size=3, mode="nearest")
    border = int(np.ceil(cfg.klt_window / 2)) + 1
    vs, us = np.nonzero(is_max & (R > cfg.harris_threshold * peak))
    inside = ((us >= border) & (us < image.shape[1] - border)
              & (vs >= border) & (vs < image.shape[0] - border))
    us, vs = us[inside], vs[inside]
    order = np.argsort(R[vs, us])[::-1]
    us, vs = us[order], vs[order]

    accepted: list[tuple[float, float]] = []
    blockers = existing
    min_d2 = cfg.min_spacing ** 2
    for u, v in zip(us, vs):
        p = np.array([float(u), float(v)])
        if len(blockers) and np.min(np.sum((blockers - p) ** 2, axis=1)) < min_d2:
            continue
        accepted.append((p[0], p[1]))
        blockers = np.vstack([blockers, p]) if len(blockers) else p[None]
        if len(accepted) >= budget:
            break
    return accepted


def _build_pyramid(image: np.ndarray, levels: int):
    pyr = [image.astype(float)]
    for _ in range(1, levels):
        blurred = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr


def track_features(prev_image: np.ndarray, curr_image: np.ndarray,
                   points: np.ndarray, cfg: FrontendConfig):
    """Pyramidal Lucas-Kanade displacement for a batch of features.

    Returns (tracked_points (n, 2), status (n,) bool). A feature survives
    only if the backward track from its new position lands within
    ``klt_fb_threshold`` of where it started and the final patch error is
    moderate; everything else (divergence, leaving the image, flat texture)
    terminates the track.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    if n == 0:
        return points.copy(), np.zeros(0, dtype=bool)
    prev_pyr = _build_pyramid(prev_image, cfg.klt_levels)
    curr_pyr = _build_pyramid(curr_image, cfg.klt_levels)

    tracked, status = _klt_pyramidal(prev_pyr, curr_pyr, points, cfg)

    idx = np.nonzero(status)[0]
    if idx.size:
        back, back_ok = _klt_pyramidal(curr_pyr, prev_pyr, tracked[idx], cfg)
        fb_err = np.linalg.norm(back - points[idx], axis=1)
        bad = ~back_ok | (fb_err > cfg.klt_fb_threshold)
        status[idx[bad]] = False
    return tracked, status


def _klt_pyramidal(prev_pyr, curr_pyr, points, cfg: FrontendConfig):
    """One-directional coarse-to-fine Lucas-Kanade solve."""
    n = len(points)
    half = cfg.klt_window // 2
    offs = np.arange(-half, half + 1, dtype=float)
    du, dv = np.meshgrid(offs, offs)
    win = cfg.klt_window ** 2

    flow = np.zeros((n, 2))
    status = np.ones(n, dtype=bool)
    for level in range(cfg.klt_levels - 1, -1, -1):
        if level < cfg.klt_levels - 1:
            flow *= 2.0
        prev_l, curr_l = prev_pyr[level], curr_pyr[level]
        h, w = prev_l.shape
        base = points / 2.0 ** level

        # Template windows and gradients, fixed per level.
        cu = base[:, 0][:, None] + du.ravel()[None, :]
        cv = base[:, 1][:, None] + dv.ravel()[None, :]
        ok = ((cu.min(axis=1) >= 0) & (cu.max(axis=1) <= w - 1)
              & (cv.min(axis=1) >= 0) & (cv.max(axis=1) <= h - 1) & status)
        coords = np.stack([cv.ravel(), cu.ravel()])
        T = ndimage.map_coordinates(prev_l, coords, order=1,
                                    mode="nearest").reshape(n, win)
        gy = ndimage.map_coordinates(
            ndimage.sobel(prev_l, axis=0, mode="nearest") / 8.0, coords,
            order=1, mode="nearest").reshape(n, win)
        gx = ndimage.map_coordinates(
            ndimage.sobel(prev_l, axis=1, mode="nearest") / 8.0, coords,
            order=1, mode="nearest").reshape(n, win)
        Gxx = np.sum(gx * gx, axis=1)
        Gxy = np.sum(gx * gy, axis=1)
        Gyy = np.sum(gy * gy, axis=1)
        det = Gxx * Gyy - Gxy * Gxy
        degenerate = det <= 1e-6
        if level == 0:
            # At full resolution a flat or out-of-view template is terminal;
            # coarse levels are merely skipped.
            status &= ok & ~degenerate
        ok &= ~degenerate
        active = ok.copy()
        for _ in range(cfg.klt_iterations):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            cu2 = (base[idx, 0] + flow[idx, 0])[:, None] + du.ravel()[None, :]
            cv2 = (base[idx, 1] + flow[idx, 1])[:, None] + dv.ravel()[None, :]
            out = ((cu2.min(axis=1) < 0) | (cu2.max(axis=1) > w - 1)
                   | (cv2.min(axis=1) < 0) | (cv2.max(axis=1) > h - 1))
            if level == 0:
                status[idx[out]] = False
            active[idx[out]] = False
            idx = idx[~out]
            if idx.size == 0:
                break
            cu2, cv2 = cu2[~out], cv2[~out]
            coords2 = np.stack([cv2.ravel(), cu2.ravel()])
            I = ndimage.map_coordinates(curr_l, coords2, order=1,
                                        mode="nearest").reshape(idx.size, win)
            err = I - T[idx]
            bx = -np.sum(gx[idx] * err, axis=1)
            by = -np.sum(gy[idx] * err, axis=1)
            d = det[idx]
            dx = (Gyy[idx] * bx - Gxy[idx] * by) / d
            dy = (Gxx[idx] * by - Gxy[idx] * bx) / d
            flow[idx, 0] += dx
            flow[idx, 1] += dy
            done = np.hypot(dx, dy) < cfg.klt_epsilon
            active[idx[done]] = False

    tracked = points + flow
    h0, w0 = prev_pyr[0].shape
    inside = ((tracked[:, 0] >= 0) & (tracked[:, 0] <= w0 - 1)
              & (tracked[:, 1] >= 0) & (tracked[:, 1] <= h0 - 1))
    status &= inside & np.all(np.isfinite(tracked), axis=1)

    # Lost features can converge onto look-alike texture; gate on the final
    # patch error so they terminate instead.
    idx = np.nonzero(status)[0]
    if idx.size:
        cu = points[idx, 0][:, None] + du.ravel()[None, :]
        cv = points[idx, 1][:, None] + dv.ravel()[None, :]
        T = ndimage.map_coordinates(prev_pyr[0],
                                    np.stack([cv.ravel(), cu.ravel()]),
                                    order=1, mode="nearest").reshape(idx.size,
                                                                     win)
        cu2 = tracked[idx, 0][:, None] + du.ravel()[None, :]
        cv2 = tracked[idx, 1][:, None] + dv.ravel()[None, :]
        I = ndimage.map_coordinates(curr_pyr[0],
                                    np.stack([cv2.ravel(), cu2.ravel()]),
                                    order=1, mode="nearest").reshape(idx.size,
                                                                     win)
        err = np.mean(np.abs(I - T), axis=1)
        status[idx[err > cfg.klt_max_residual]] = False
    return tracked, status


def _eight_point(p1, p2):
    """Normalized eight-point fundamental matrix fit."""
    def normalize(p):
        c = p.mean(axis=0)
        d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
        s = np.sqrt(2.0) / max(d, 1e-12)
        T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        return (p - c) * s, T

    q1, T1 = normalize(p1)
    q2, T2 = normalize(p2)
    x1, y1 = q1[:, 0], q1[:, 1]
    x2, y2 = q2[:, 0], q2[:, 1]
    A = np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1,
                  np.ones_like(x1)], axis=1)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(F)
    F = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    return T2.T @ F @ T1


def _sampson_distance(F, p1, p2):
    ones = np.ones((len(p1), 1))
    x1 = np.hstack([p1, ones])
    x2 = np.hstack([p2, ones])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.sum(x2 * Fx1, axis=1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.maximum(den, 1e-12)


def reject_outliers(prev_points, curr_points, cfg: FrontendConfig,
                    rng: np.random.Generator):
    """Fundamental-matrix RANSAC over matched pairs.

    Returns (inlier_mask, degenerate). Fewer than eight pairs cannot
    constrain the model, so everything is retained and flagged degenerate;
    the optimizer's robust loss absorbs any surviving outliers.
    """
    p1 = np.asarray(prev_points, dtype=float).reshape(-1, 2)
    p2 = np.asarray(curr_points, dtype=float).reshape(-1, 2)
    n = len(p1)
    if n < 8:
        return np.ones(n, dtype=bool), True

    thresh2 = cfg.ransac_threshold ** 2
    best_mask = np.zeros(n, dtype=bool)
    best_count = -1
    max_iters = cfg.ransac_max_iterations
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = _eight_point(p1[sample], p2[sample])
        except np.linalg.LinAlgError:
            it += 1
            continue
        mask = _sampson_distance(F, p1, p2) < thresh2
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w8 = min(max(count / n, 1e-3) ** 8, 1.0 - 1e-12)
            num = np.log(max(1.0 - cfg.ransac_confidence, 1e-12))
            needed = int(min(float(max_iters), np.ceil(num / np.log1p(-w8))))
        it += 1

    if best_count >= 8:
        F = _eight_point(p1[best_mask], p2[best_mask])
        best_mask = _sampson_distance(F, p1, p2) < thresh2
    return best_mask, False


def detect_zero_velocity(tracks, cfg: FrontendConfig) -> bool:
    """True when mean feature motion stayed under the pixel threshold for
    each of the last ``zvu_window`` frame pairs.

    Tracks expose per-frame positions via ``recent``; frames missing from
    every track make the history insufficient and the detector stays off.
    """
    latest = -1
    for tr in tracks:
        if tr.recent:
            latest = max(latest, max(tr.recent))
    if latest < cfg.zvu_window:
        return False
    for f in range(latest - cfg.zvu_window + 1, latest + 1):
        moves = []
        for tr in tracks:
            a = tr.recent.get(f - 1)
            b = tr.recent.get(f)
            if a is not None and b is not None:
                moves.append(np.hypot(b[0] - a[0], b[1] - a[1]))
        if not moves:
            return False
        if float(np.mean(moves)) >= cfg.zvu_beta:
            return False
    return True


class FeaturePipeline:
    """Per-camera sequential pipeline: track, reject, replenish, record.

    One instance per camera; frame n depends on frame n-1. The factor graph
    reads immutable per-keyframe snapshots (the recorded observations).
    """

    def __init__(self, cfg: FrontendConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.tracks: dict[int, FeatureTrack] = {}
        self._next_id = 0
        self._prev_image: np.ndarray | None = None
        self._frame = -1
        self.overlay_rows: list[tuple[int, int, float, float, int]] = []
        self.timings: dict[str, list[float]] = {
            "equalization": [], "tracking": [], "outlier_rejection": [],
            "detection": []}

    def active_tracks(self) -> list[FeatureTrack]:
        return [t for t in self.tracks.values() if t.alive]

    def process_frame(self, image: np.ndarray, keyframe: int | None = None,
                      depth: np.ndarray | None = None):
        """Advance the pipeline by one camera frame.

        ``keyframe`` is the keyframe index when this frame carries a graph
        node, else None. Returns the list of live tracks.
        """
        import time

        self._frame += 1
        t0 = time.perf_counter()
        eq = equalize(image)
        self.timings["equalization"].append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        live = self.active_tracks()
        if self._prev_image is not None and live:
            pts = np.array([t.position for t in live])
            tracked, status = track_features(self._prev_image, eq, pts,
                                             self.cfg)
            for tr, p, ok in zip(live, tracked, status):
                if ok:
                    tr.add_frame(self._frame, p[0], p[1])
                else:
                    tr.alive = False
        self.timings["tracking"].append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        live = self.active_tracks()
        if self._prev_image is not None and live:
            prev_pts, curr_pts, idx = [], [], []
            for k, tr in enumerate(live):
                a = tr.recent.get(self._frame - 1)
                b = tr.recent.get(self._frame)
                if a is not None and b is not None:
                    prev_pts.append(a)
                    curr_pts.append(b)
                    idx.append(k)
            if idx:
                mask, _ = reject_outliers(np.array(prev_pts),
                                          np.array(curr_pts), self.cfg,
                                          self.rng)
                for k, ok in zip(idx, mask):
                    if not ok:
                        live[k].alive = False
                for k, ok in zip(idx, mask):
                    tr = live[k]
                    u, v = tr.recent.get(self._frame, (np.nan, np.nan))
                    self.overlay_rows.append(
                        (self._frame, tr.id, u, v, int(ok)))
        self.timings["outlier_rejection"].append(time.perf_counter() - t0)

        self._enforce_spacing()

        t0 = time.perf_counter()
        live = self.active_tracks()
        existing = np.array([t.position for t in live]).reshape(-1, 2)
        for u, v in detect_features(eq, existing, self.cfg):
            tr = FeatureTrack(self._next_id)
            self._next_id += 1
            tr.add_frame(self._frame, u, v)
            self.tracks[tr.id] = tr
        self.timings["detection"].append(time.perf_counter() - t0)

        if keyframe is not None:
            for tr in self.active_tracks():
                pos = tr.recent.get(self._frame)
                if pos is None:
                    continue
                d = None
                if depth is not None:
                    ui, vi = int(round(pos[0])), int(round(pos[1]))
                    if 0 <= vi < depth.shape[0] and 0 <= ui < depth.shape[1]:
                        val = float(depth[vi, ui])
                        d = val if val > 0.0 else None
                tr.add_keyframe_observation(keyframe, pos[0], pos[1], d)

        self._prev_image = eq
        return self.active_tracks()

    def _enforce_spacing(self):
        """Terminate the younger of any live pair closer than min spacing."""
        live = sorted(self.active_tracks(), key=lambda t: t.id)
        min_d2 = self.cfg.min_spacing ** 2
        kept: list[FeatureTrack] = []
        pts: list[np.ndarray] = []
        for tr in live:
            p = tr.position
            if pts and np.min(np.sum((np.array(pts) - p) ** 2, axis=1)) < min_d2:
                tr.alive = False
                continue
            kept.append(tr)
            pts.append(p)
