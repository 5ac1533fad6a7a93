"""
Odometry loop: time-ordered IMU samples and RGB-D frames in, trajectory out.

IMU samples drive propagation (trapezoidal mean of consecutive readings);
each frame runs detect -> describe -> track -> update -> manage landmarks.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from config import PipelineConfig
from core_types import RegisteredFrame, bearing_to_pixel
from dataset_io import (
    LANDMARK_COLUMNS,
    TRAJECTORY_COLUMNS,
    write_table,
    write_tracks_csv,
)
from descriptor import DarkNoiseModel, DescriptorExtractor, Validity, pattern_from_params
from ekf_backend import (
    ROBOT_DIM,
    FilterModel,
    ImuSample,
    RobocentricEKF,
    landmark_points_world,
)
from errors import DataError
from feature_detection import (
    Modality,
    combine_score_maps,
    compute_depth_score_map,
    compute_visual_score_map,
    select_keypoints,
)
from tracking_frontend import TrackingFrontend

logger = logging.getLogger(__name__)

STAGES = ("propagate", "detect", "track", "update", "manage")
FRAME_COLUMNS = ("frame", "t", "candidates", "tracked", "matched", "accepted", "gated", "added", "landmarks",
                 "depth_only")
DEFAULT_HOLD_S = 0.1


# ============================================================
# 1. STREAM ORDERING
# ============================================================
class ReorderBuffer:
    """Releases events in timestamp order once they are `hold_s` older than the newest seen.

    IMU samples go before frames on equal timestamps. An event that would sort
    before the last released one is rejected, including an IMU sample arriving
    after a frame with the same timestamp went out.
    """

    def __init__(self, hold_s=DEFAULT_HOLD_S):
        self.hold_s = hold_s
        self._heap = []
        self._seq = itertools.count()
        self._newest = -np.inf
        self._last_key = (-np.inf, 0)
        self.rejected = 0

    def __len__(self):
        return len(self._heap)

    @property
    def last_released(self):
        return self._last_key[0]

    @staticmethod
    def _kind(event):
        return 0 if isinstance(event, ImuSample) else 1

    def push(self, event):
        t = float(event.timestamp)
        key = (t, self._kind(event))
        if key < self._last_key:
            self.rejected += 1
            logger.warning("dropping out-of-order %s at t=%.6f (already released up to %.6f)",
                           type(event).__name__, t, self.last_released)
            return []
        heapq.heappush(self._heap, (t, key[1], next(self._seq), event))
        self._newest = max(self._newest, t)
        return self._release(self._newest - self.hold_s)

    def flush(self):
        return self._release(np.inf)

    def _release(self, horizon):
        out = []
        while self._heap and self._heap[0][0] <= horizon:
            t, kind, _, event = heapq.heappop(self._heap)
            self._last_key = (t, kind)
            out.append(event)
        return out


# ============================================================
# 2. RESULTS
# ============================================================
@dataclass
class OdometryResult:
    trajectory: List[np.ndarray] = field(default_factory=list)  # rows of TRAJECTORY_COLUMNS
    covariances: List[np.ndarray] = field(default_factory=list)  # robot block per trajectory row
    landmarks: List[tuple] = field(default_factory=list)  # rows of LANDMARK_COLUMNS
    tracks: list = field(default_factory=list)
    frames: List[dict] = field(default_factory=list)  # per-frame counters
    report: Dict[str, object] = field(default_factory=dict)

    def trajectory_array(self):
        return np.asarray(self.trajectory, dtype=float).reshape(-1, len(TRAJECTORY_COLUMNS))


def _trajectory_row(state, cov):
    R = state.R
    return np.concatenate([
        [state.timestamp], R @ state.r, state.q, R @ state.v, state.b_f, state.b_w,
        [state.n_landmarks], np.diag(cov)[:ROBOT_DIM],
    ])


# ============================================================
# 3. ODOMETRY
# ============================================================
class Odometry:
    """Owns the filter, the tracking front end and the run statistics."""

    def __init__(self, calibration, config=None, realtime=False, hold_s=DEFAULT_HOLD_S, position=None):
        self.calibration = calibration
        self.config = config or PipelineConfig()
        self.model = FilterModel.from_config(calibration, self.config)
        self.pattern = pattern_from_params(self.config.descriptor)
        self.dark_noise = DarkNoiseModel(calibration.dark_noise)
        self.frontend = TrackingFrontend(self.config.tracking)
        self.buffer = ReorderBuffer(hold_s)
        self.realtime = realtime
        self.position = position
        self.ekf: Optional[RobocentricEKF] = None
        self.result = OdometryResult()
        self.timing = defaultdict(float)
        self._pending = []
        self._last_imu: Optional[ImuSample] = None
        self._last_record_t = -np.inf
        self._frame_index = 0
        self._n_imu = 0
        self._starved = False
        self._wall0 = None
        self._stream_t0 = None

    # ---------- stream entry ----------
    def feed(self, event):
        for e in self.buffer.push(event):
            self._dispatch(e)

    def finish(self):
        for e in self.buffer.flush():
            self._dispatch(e)
        if self.ekf is None and self._pending:
            self._initialize()
        self._finalize_report()
        return self.result

    def _dispatch(self, event):
        if self.realtime:
            self._pace(event.timestamp)
        if self.ekf is None:
            self._pending.append(event)
            imu = [e for e in self._pending if isinstance(e, ImuSample)]
            if imu and imu[-1].timestamp - imu[0].timestamp >= self.config.filter.init_window_s:
                self._initialize()
            return
        self._process(event)

    def _pace(self, t):
        now = time.perf_counter()
        if self._wall0 is None:
            self._wall0, self._stream_t0 = now, t
            return
        lag = (t - self._stream_t0) - (now - self._wall0)
        if lag > 0:
            time.sleep(lag)

    def _initialize(self):
        """Attitude from the initial accelerometer window, then replay what was held back."""
        imu = [e for e in self._pending if isinstance(e, ImuSample)]
        self.ekf = RobocentricEKF.from_imu(self.model, imu, self.position)
        if imu:
            self.ekf.state.timestamp = min(imu[0].timestamp, self._pending[0].timestamp)
        else:
            self.ekf.state.timestamp = self._pending[0].timestamp
        logger.info("filter initialized at t=%.3f from %d IMU samples", self.ekf.state.timestamp, len(imu))
        pending, self._pending = self._pending, []
        for e in pending:
            self._process(e)

    def _process(self, event):
        if isinstance(event, ImuSample):
            self._on_imu(event)
        elif isinstance(event, RegisteredFrame):
            self._on_frame(event)
        else:
            logger.warning("ignoring event of type %s", type(event).__name__)

    def _propagate_to(self, t, imu):
        dt = t - self.ekf.state.timestamp
        if dt <= 0.0:
            return
        t0 = time.perf_counter()
        self.ekf.propagate(imu, dt)
        self.ekf.state.timestamp = t
        self.timing["propagate"] += time.perf_counter() - t0

    # ---------- IMU ----------
    def _on_imu(self, sample):
        self._n_imu += 1
        prev = self._last_imu
        self._last_imu = sample
        if prev is not None:
            mean = ImuSample(sample.timestamp, 0.5 * (prev.accel + sample.accel), 0.5 * (prev.gyro + sample.gyro))
            self._propagate_to(sample.timestamp, mean)
        else:
            self.ekf.state.timestamp = max(self.ekf.state.timestamp, sample.timestamp)
        if sample.timestamp - self._last_record_t >= self.config.record_gap_s:
            self._record()

    # ---------- frames ----------
    def _on_frame(self, frame):
        ekf, cfg = self.ekf, self.config
        k = self._frame_index
        self._frame_index += 1
        if self._last_imu is not None:
            self._propagate_to(frame.timestamp, self._last_imu)

        t0 = time.perf_counter()
        V_s = compute_visual_score_map(frame.gray, cfg.detector)
        D_s = compute_depth_score_map(frame.depth, cfg.detector)
        C_s = combine_score_maps(V_s, D_s, cfg.detector)
        rows, cols = np.nonzero(C_s.values > 0)
        candidates = np.column_stack([cols, rows]).astype(float)
        extractor = DescriptorExtractor(frame, self.pattern, self.dark_noise, cfg.descriptor)
        t1 = time.perf_counter()
        self.timing["detect"] += t1 - t0

        n_tracked = ekf.state.n_landmarks
        matches, out_of_view, records = self.frontend.track(k, ekf.state, ekf.cov, frame.camera, candidates, extractor)
        self.result.tracks.extend(records)
        t2 = time.perf_counter()
        self.timing["track"] += t2 - t1

        accepted = ekf.update(matches)
        if cfg.filter.depth_update and matches:
            measurements = []
            for j, (u, v) in matches:
                d = float(frame.depth[int(round(v)), int(round(u))])
                if d > 0.0:
                    measurements.append((j, d))
            ekf.depth_update(measurements)
        t3 = time.perf_counter()
        self.timing["update"] += t3 - t2

        added = self._manage(k, frame, C_s, extractor, matches, out_of_view)
        self.timing["manage"] += time.perf_counter() - t3

        modalities = [self.frontend.landmarks[i].modality for i in ekf.state.landmark_ids]
        self.result.frames.append({
            "frame": k,
            "t": frame.timestamp,
            "candidates": len(candidates),
            "tracked": n_tracked,
            "matched": len(matches),
            "accepted": accepted,
            "gated": ekf.last_gated,
            "added": added,
            "landmarks": ekf.state.n_landmarks,
            "depth_only": sum(m == Modality.DEPTH for m in modalities),
        })
        logger.debug("frame %d t=%.3f: %d candidates, %d/%d matched, %d accepted, %d added, J=%d",
                     k, frame.timestamp, len(candidates), len(matches), n_tracked, accepted, added,
                     ekf.state.n_landmarks)
        self._record()
        for lm_id, p in zip(ekf.state.landmark_ids, landmark_points_world(ekf.state, self.model)):
            self.result.landmarks.append((k, frame.timestamp, lm_id, *p))

    def _manage(self, k, frame, C_s, extractor, matches, out_of_view):
        """Drop lost landmarks, then fill free slots with new keypoints clear of the live ones."""
        ekf, cfg = self.ekf, self.config
        matched = {ekf.state.landmark_ids[j]: tuple(p) for j, p in matches}
        live = []
        for j, lm_id in enumerate(ekf.state.landmark_ids):
            if lm_id in matched:
                live.append((lm_id, matched[lm_id]))
                continue
            pixel = bearing_to_pixel(ekf.state.bearing(j), frame.camera)
            if pixel is not None:
                live.append((lm_id, tuple(pixel)))

        out_set = set(out_of_view)
        stale = {lm.id for lm in self.frontend.landmarks.values()
                 if lm.miss_count >= cfg.tracking.miss_max or lm.id in out_set}
        blocked = [p for lm_id, p in live if lm_id not in stale]
        keypoints = select_keypoints(C_s, frame, cfg.detector, blocked_pixels=blocked,
                                     margin=cfg.descriptor.patch_size // 2)
        # only keypoints whose descriptor carries a bit can be tracked
        descriptors = {}
        for kp in keypoints:
            descriptor = extractor.describe(kp.pixel, kp.modality)
            if descriptor is not None and descriptor.validity is not Validity.EMPTY:
                descriptors[kp] = descriptor
        usable = [kp for kp in keypoints if kp in descriptors]
        directives = self.frontend.manage(usable, live, out_of_view, cfg.detector.r_min)

        for lm_id in directives.drop:
            if lm_id in ekf.state.landmark_ids:
                ekf.remove_landmark_id(lm_id)
            self.frontend.drop(lm_id)

        added = 0
        for kp in directives.add:
            lm_id = ekf.add_landmark(kp, cfg.tracking.j_max)
            if lm_id is None:
                break
            self.frontend.add(lm_id, descriptors[kp], kp.modality, k)
            added += 1
        starved = ekf.state.n_landmarks == 0
        if starved and not self._starved:
            logger.warning("frame %d: no landmarks alive", k)
        self._starved = starved
        return added

    # ---------- output ----------
    def _record(self):
        state, cov = self.ekf.state, self.ekf.cov
        self.result.trajectory.append(_trajectory_row(state, cov))
        self.result.covariances.append(cov[:ROBOT_DIM, :ROBOT_DIM].copy())
        self._last_record_t = state.timestamp

    def _finalize_report(self):
        frames = self.result.frames
        n_frames = len(frames)
        if n_frames == 0:
            logger.warning("dataset has no frames; output is IMU dead reckoning")
        tracked = sum(f["tracked"] for f in frames)
        matched = sum(f["matched"] for f in frames)
        alive = np.array([f["landmarks"] for f in frames], dtype=float)
        depth_only = np.array([f["depth_only"] for f in frames], dtype=float)
        timing = {
            stage: {
                "total_s": self.timing[stage],
                "per_frame_ms": 1000.0 * self.timing[stage] / n_frames if n_frames else 0.0,
            }
            for stage in STAGES
        }
        final = None
        if self.ekf is not None:
            p, q = self.ekf.world_pose()
            final = {"t": self.ekf.state.timestamp, "position": p.tolist(), "quaternion": q.tolist(),
                     "accel_bias": self.ekf.state.b_f.tolist(), "gyro_bias": self.ekf.state.b_w.tolist()}
        self.result.report = {
            "seed": self.config.seed,
            "rng": "numpy.random.default_rng(seed)",
            "imu_samples": self._n_imu,
            "frames": n_frames,
            "rejected_out_of_order": self.buffer.rejected,
            "timing": timing,
            "landmarks": {
                "mean_alive": float(alive.mean()) if n_frames else 0.0,
                "min_alive": int(alive.min()) if n_frames else 0,
                "max_alive": int(alive.max()) if n_frames else 0,
                "mean_depth_only": float(depth_only.mean()) if n_frames else 0.0,
                "min_depth_only": int(depth_only.min()) if n_frames else 0,
                "created": int(sum(f["added"] for f in frames)),
            },
            "match_rate": matched / tracked if tracked else 0.0,
            "gated": int(sum(f["gated"] for f in frames)),
            "final_state": final,
        }
        if n_frames:
            logger.info("processed %d frames, %d IMU samples; match rate %.2f, mean landmarks %.1f",
                        n_frames, self._n_imu, self.result.report["match_rate"], alive.mean())


def run_odometry(events, calibration, config=None, realtime=False, position=None):
    """Run the full pipeline over an iterable of ImuSample / RegisteredFrame events."""
    odo = Odometry(calibration, config, realtime=realtime, position=position)
    for event in events:
        odo.feed(event)
    return odo.finish()


def write_run_outputs(result, output_dir, tracks_path=None):
    """trajectory.csv, landmarks.csv, run_log.npz, report.json, plus the track CSV when a path is given."""
    out = Path(output_dir)
    traj = result.trajectory_array()
    frame_stats = np.array([[f[c] for c in FRAME_COLUMNS] for f in result.frames], dtype=float)
    frame_stats = frame_stats.reshape(-1, len(FRAME_COLUMNS))
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj)
        write_table(out / "landmarks.csv", LANDMARK_COLUMNS, result.landmarks)
        np.savez_compressed(
            out / "run_log.npz",
            trajectory=traj,
            covariance=np.asarray(result.covariances, dtype=float).reshape(-1, ROBOT_DIM, ROBOT_DIM),
            columns=np.array(TRAJECTORY_COLUMNS),
            frame_stats=frame_stats,
            frame_columns=np.array(FRAME_COLUMNS),
        )
        if tracks_path is not None:
            write_tracks_csv(tracks_path, result.tracks)
        with open(out / "report.json", "w", encoding="utf-8") as f:
            json.dump(result.report, f, indent=2)
    except OSError as e:
        raise DataError(f"cannot write run outputs to {out}: {e}") from e
    logger.info("wrote %d trajectory rows and %d landmark rows to %s", len(traj), len(result.landmarks), out)
    return out


def fault_dump(odometry, fault):
    """Arrays for fault_dump.npz: the fault payload plus the last filter state."""
    dump = {k: np.asarray(v) for k, v in (fault.dump or {}).items()}
    if odometry is not None and odometry.ekf is not None:
        dump.setdefault("state", odometry.ekf.state.as_vector())
        dump.setdefault("cov", odometry.ekf.cov)
        dump["landmark_ids"] = np.asarray(odometry.ekf.state.landmark_ids, dtype=int)
        dump["timestamp"] = np.asarray(odometry.ekf.state.timestamp)
    return dump


