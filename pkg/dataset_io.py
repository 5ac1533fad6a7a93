"""
On-disk dataset contract shared by the simulator and recorded sensor data.

    <root>/calib.cfg          calibration (YAML)
    <root>/manifest.txt       frame index, stream files, metadata (YAML)
    <root>/gray/NNNNNN.pgm    8-bit intensity
    <root>/depth/NNNNNN.png   16-bit depth in millimeters, 0 = invalid
    <root>/imu.csv            t,fx,fy,fz,wx,wy,wz

Plus the CSV outputs of a run (trajectory, landmarks, tracks) and their readers.
"""

from __future__ import annotations

import csv
import heapq
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import yaml
from PIL import Image

from config import load_calibration, save_calibration
from core_types import (
    PoseStream,
    RegisteredFrame,
    clamp_depth_range,
    depth_from_millimeters,
    depth_to_millimeters,
    register_depth_to_color,
)
from ekf_backend import ImuSample
from errors import ConfigError, DataError, LoadError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
CALIB = "calib.cfg"
IMU_CSV = "imu.csv"
IMU_HEADER = "t,fx,fy,fz,wx,wy,wz"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class FrameEntry:
    index: int
    timestamp: float
    gray: str
    depth: str


@dataclass
class DatasetManifest:
    root: Path
    calibration: str = CALIB
    imu: str = IMU_CSV
    depth_registered: bool = True
    frames: List[FrameEntry] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "calibration": self.calibration,
            "imu": self.imu,
            "depth_registered": self.depth_registered,
            "metadata": dict(self.metadata),
            "frames": [{"index": f.index, "t": f.timestamp, "gray": f.gray, "depth": f.depth} for f in self.frames],
        }


# ============================================================
# 1. IMAGES AND IMU FILES
# ============================================================
def read_gray(path):
    try:
        with Image.open(path) as img:
            return np.array(img.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise LoadError(f"cannot read intensity image {path}: {e}") from e


def write_gray(path, gray):
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8)).save(path, format="PPM")


def read_depth_mm(path):
    try:
        with Image.open(path) as img:
            return np.array(img).astype(np.uint16)
    except (OSError, ValueError) as e:
        raise LoadError(f"cannot read depth image {path}: {e}") from e


def write_depth_mm(path, depth_mm):
    Image.fromarray(np.ascontiguousarray(depth_mm, dtype=np.uint16)).save(path, format="PNG")


def read_imu_csv(path):
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"IMU file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
    if header != IMU_HEADER:
        raise DataError(f"{path}: expected header '{IMU_HEADER}', got '{header}'")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size and data.shape[1] != 7:
        raise DataError(f"{path}: expected 7 columns, got {data.shape[1]}")
    t = data[:, 0] if data.size else np.zeros(0)
    bad = np.flatnonzero(np.diff(t) <= 0)
    if len(bad):
        raise DataError(f"{path}: IMU timestamp regression at sample {bad[0] + 1} (t={t[bad[0] + 1]!r})")
    return [ImuSample(float(row[0]), row[1:4].copy(), row[4:7].copy()) for row in data]


def write_imu_csv(path, samples):
    data = np.array([np.r_[s.timestamp, s.accel, s.gyro] for s in samples]).reshape(-1, 7)
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=IMU_HEADER, comments="")


# ============================================================
# 2. MANIFEST
# ============================================================
def read_manifest(root):
    """Parse and validate manifest.txt; every referenced file must exist."""
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise DataError(f"{path}: not valid YAML ({e})") from e
    if not isinstance(data, dict):
        raise DataError(f"{path}: top level must be a mapping")

    frames = []
    for i, item in enumerate(data.get("frames") or []):
        if "t" not in item:
            raise DataError(f"{path}: frame {i} has no timestamp")
        t = float(item["t"])
        for kind in ("gray", "depth"):
            name = item.get(kind)
            if not name:
                raise LoadError(f"{path}: frame {i} at t={t!r} has no {kind} image")
            if not (root / name).is_file():
                raise LoadError(f"missing {kind} image {root / name} for frame {i} at t={t!r}")
        frames.append(FrameEntry(int(item.get("index", i)), t, item["gray"], item["depth"]))
    for i in range(1, len(frames)):
        if frames[i].timestamp <= frames[i - 1].timestamp:
            raise DataError(f"{path}: frame timestamp regression at frame {i} (t={frames[i].timestamp!r})")

    manifest = DatasetManifest(
        root=root,
        calibration=data.get("calibration", CALIB),
        imu=data.get("imu", IMU_CSV),
        depth_registered=bool(data.get("depth_registered", True)),
        frames=frames,
        metadata=dict(data.get("metadata") or {}),
    )
    for name in (manifest.calibration, manifest.imu):
        if not (root / name).is_file():
            raise LoadError(f"missing file referenced by manifest: {root / name}")
    return manifest


def write_manifest(manifest):
    with open(Path(manifest.root) / MANIFEST, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest.to_dict(), f, sort_keys=False)


# ============================================================
# 3. DATASETS
# ============================================================
class Dataset:
    """An opened dataset: calibration, IMU stream and lazily decoded frames."""

    def __init__(self, root):
        self.manifest = read_manifest(root)
        self.root = self.manifest.root
        try:
            self.calibration = load_calibration(self.root / self.manifest.calibration)
        except ConfigError as e:
            raise ConfigError(f"{self.root / self.manifest.calibration}: {e}") from e
        self.imu = read_imu_csv(self.root / self.manifest.imu)
        logger.info("dataset %s: %d frames, %d IMU samples", self.root, len(self.manifest.frames), len(self.imu))

    @property
    def n_frames(self):
        return len(self.manifest.frames)

    def load_frame(self, entry):
        gray = read_gray(self.root / entry.gray)
        depth = depth_from_millimeters(read_depth_mm(self.root / entry.depth))
        calib = self.calibration
        if not self.manifest.depth_registered:
            depth = register_depth_to_color(depth, calib)
        else:
            depth = clamp_depth_range(depth, calib.d_min, calib.d_max)
        try:
            return RegisteredFrame(entry.timestamp, gray, depth, calib.camera)
        except ConfigError as e:
            raise DataError(f"frame {entry.index} at t={entry.timestamp!r}: {e}") from e

    def frame(self, index):
        if not (0 <= index < self.n_frames):
            raise DataError(f"frame index {index} out of range (dataset has {self.n_frames} frames)")
        return self.load_frame(self.manifest.frames[index])

    def _decoded_frames(self, prefetch):
        if not prefetch:
            for entry in self.manifest.frames:
                yield self.load_frame(entry)
            return
        # decode one frame ahead on a worker thread
        q = queue.Queue(maxsize=1)
        stop = threading.Event()
        done = object()

        def worker():
            try:
                for entry in self.manifest.frames:
                    item = self.load_frame(entry)
                    while not stop.is_set():
                        try:
                            q.put(item, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
                q.put(done)
            except Exception as e:  # handed to the consumer
                q.put(e)

        thread = threading.Thread(target=worker, name="frame-prefetch", daemon=True)
        thread.start()
        try:
            while True:
                item = q.get()
                if item is done:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()

    def events(self, prefetch=True):
        """IMU samples and frames in timestamp order; IMU first on equal timestamps."""
        imu = ((s.timestamp, 0, i) for i, s in enumerate(self.imu))
        frames = ((f.timestamp, 1, i) for i, f in enumerate(self.manifest.frames))
        decoded = self._decoded_frames(prefetch)
        last = -np.inf
        try:
            for t, kind, i in heapq.merge(imu, frames):
                if t < last:
                    raise DataError(f"timestamp regression in merged stream at t={t!r}")
                last = t
                yield self.imu[i] if kind == 0 else next(decoded)
        finally:
            decoded.close()


def open_dataset(path):
    return Dataset(path)


def load_dataset(path, prefetch=True):
    """Iterator of time-ordered ImuSample / RegisteredFrame events."""
    return open_dataset(path).events(prefetch=prefetch)


def write_dataset(events, path, calib, metadata=None):
    """Write an event stream in the dataset layout; returns the manifest."""
    root = Path(path)
    try:
        (root / "gray").mkdir(parents=True, exist_ok=True)
        (root / "depth").mkdir(parents=True, exist_ok=True)
        save_calibration(calib, root / CALIB)
        manifest = DatasetManifest(root=root, metadata=dict(metadata or {}))
        imu = []
        last = {"imu": -np.inf, "frame": -np.inf}
        for event in events:
            if isinstance(event, ImuSample):
                if event.timestamp <= last["imu"]:
                    raise DataError(f"IMU timestamp regression at sample {len(imu)} (t={event.timestamp!r})")
                last["imu"] = event.timestamp
                imu.append(event)
                continue
            if not isinstance(event, RegisteredFrame):
                raise DataError(f"cannot write event of type {type(event).__name__}")
            index = len(manifest.frames)
            if event.timestamp <= last["frame"]:
                raise DataError(f"frame timestamp regression at frame {index} (t={event.timestamp!r})")
            last["frame"] = event.timestamp
            gray_name, depth_name = f"gray/{index:06d}.pgm", f"depth/{index:06d}.png"
            write_gray(root / gray_name, event.gray)
            write_depth_mm(root / depth_name, depth_to_millimeters(event.depth))
            manifest.frames.append(FrameEntry(index, float(event.timestamp), gray_name, depth_name))
        write_imu_csv(root / IMU_CSV, imu)
        write_manifest(manifest)
    except OSError as e:
        raise DataError(f"cannot write dataset to {root}: {e}") from e
    logger.info("wrote dataset %s: %d frames, %d IMU samples", root, len(manifest.frames), len(imu))
    return manifest


# ============================================================
# 4. RUN OUTPUT FILES
# ============================================================
POSE_COLUMNS = ["t", "px", "py", "pz", "qx", "qy", "qz", "qw"]
TRAJECTORY_COLUMNS = POSE_COLUMNS + [
    "vx", "vy", "vz", "bfx", "bfy", "bfz", "bwx", "bwy", "bwz", "J",
    "var_rx", "var_ry", "var_rz", "var_thx", "var_thy", "var_thz", "var_vx", "var_vy", "var_vz",
    "var_bfx", "var_bfy", "var_bfz", "var_bwx", "var_bwy", "var_bwz",
]
TRACK_COLUMNS = ["frame", "landmark_id", "pred_u", "pred_v", "match_u", "match_v", "hamming",
                 "half_axis_major", "half_axis_minor"]
LANDMARK_COLUMNS = ["frame", "t", "landmark_id", "x", "y", "z"]


def write_table(path, columns, rows):
    """Numeric CSV with a header line and full float precision."""
    data = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(columns), comments="")


def read_table(path):
    """(column names, N x C array) of a numeric CSV written by write_table."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data.reshape(-1, len(header))


def write_pose_csv(path, stream):
    write_table(path, POSE_COLUMNS, np.column_stack([stream.t, stream.position, stream.quaternion]))


def read_pose_csv(path):
    """PoseStream from any CSV carrying the t, px..pz, qx..qw columns."""
    header, data = read_table(path)
    missing = [c for c in POSE_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    col = {name: i for i, name in enumerate(header)}
    return PoseStream(
        data[:, col["t"]],
        data[:, [col["px"], col["py"], col["pz"]]],
        data[:, [col["qx"], col["qy"], col["qz"], col["qw"]]],
    )


def write_tracks_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRACK_COLUMNS)
        for r in records:
            pred = r.predicted or ("", "")
            match = r.matched or ("", "")
            axes = r.half_axes or ("", "")
            writer.writerow([r.frame, r.landmark_id, *pred, *match,
                             "" if r.distance is None else r.distance, *axes])
