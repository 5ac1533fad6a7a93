"""
Pipeline configuration and calibration files.

Both are YAML. Parsing is strict: unknown keys and wrongly typed values raise
ConfigError naming the dotted key. Every field below carries its default;
README.md documents the same table.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import yaml

from core_types import Calibration, ExtrinsicCalib, PinholeCamera, RigidTransform
from errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "DVEO_CONFIG"


# ============================================================
# 1. SECTIONS
# ============================================================
@dataclass(frozen=True)
class DetectorParams:
    visual_detector: str = "harris"  # harris | orb
    harris_lambda: float = 1e-4
    harris_k: float = 0.04
    harris_block: int = 5
    nms_radius: int = 2
    border: int = 8
    orb_fast_threshold: int = 20
    gamma: float = 0.5
    s_sat: float = 0.9
    n_target: int = 25
    r_min: float = 8.0
    r_max: float = 32.0
    depth_error_coeffs: Tuple[float, float, float] = (0.0, 0.0, 0.0012)
    gradient_band_deg: Tuple[float, float] = (30.0, 60.0)
    score_floor: float = 0.05

    def __post_init__(self):
        _check(self.visual_detector in ("harris", "orb"), "detector.visual_detector", "must be 'harris' or 'orb'")
        _check(self.harris_lambda >= 0.0, "detector.harris_lambda", "must be >= 0")
        _check(self.harris_block >= 3 and self.harris_block % 2 == 1, "detector.harris_block", "must be an odd size >= 3")
        _check(self.nms_radius >= 1, "detector.nms_radius", "must be >= 1")
        _check(self.border >= 1, "detector.border", "must be >= 1")
        _check(0.0 <= self.gamma <= 1.0, "detector.gamma", "must lie in [0, 1]")
        _check(0.0 < self.s_sat <= 1.0, "detector.s_sat", "must lie in (0, 1]")
        _check(self.n_target >= 1, "detector.n_target", "must be >= 1")
        _check(0.0 < self.r_min <= self.r_max, "detector.r_min", "need 0 < r_min <= r_max")
        _check(0.0 <= self.gradient_band_deg[0] <= self.gradient_band_deg[1] <= 90.0,
               "detector.gradient_band_deg", "need 0 <= low <= high <= 90")
        _check(0.0 < self.score_floor <= 1.0, "detector.score_floor", "must lie in (0, 1]")
        _check(all(c >= 0.0 for c in self.depth_error_coeffs), "detector.depth_error_coeffs",
               "coefficients must be >= 0 so the error grows with depth")


@dataclass(frozen=True)
class DescriptorParams:
    patch_size: int = 48
    mean_patch: int = 9
    pattern_seed: int = 2018
    distance_threshold: float = 0.05  # meters; the test compares squared distance with its square
    normal_angle_deg: float = 45.0
    normal_window: int = 5
    use_visual_bits: bool = True
    use_depth_bits: bool = True

    def __post_init__(self):
        _check(self.patch_size >= 16 and self.patch_size % 2 == 0, "descriptor.patch_size", "must be an even size >= 16")
        _check(self.mean_patch >= 1 and self.mean_patch % 2 == 1, "descriptor.mean_patch", "must be odd")
        _check(self.mean_patch < self.patch_size // 2, "descriptor.mean_patch", "must fit inside the window")
        _check(self.distance_threshold > 0.0, "descriptor.distance_threshold", "must be > 0")
        _check(0.0 < self.normal_angle_deg < 180.0, "descriptor.normal_angle_deg", "must lie in (0, 180)")
        _check(self.normal_window >= 3 and self.normal_window % 2 == 1, "descriptor.normal_window", "must be odd >= 3")
        _check(self.use_visual_bits or self.use_depth_bits, "descriptor.use_visual_bits",
               "at least one of use_visual_bits / use_depth_bits must be on")


@dataclass(frozen=True)
class TrackingParams:
    window_sigma: float = 3.0
    w_min: float = 8.0
    w_max: float = 64.0
    h_max: int = 64
    second_best_margin: int = 8
    use_second_best_margin: bool = True
    duplicate_radius: float = 2.0  # px; runner-ups this close to the best are the same feature
    miss_max: int = 3
    j_max: int = 25

    def __post_init__(self):
        _check(self.window_sigma > 0.0, "tracking.window_sigma", "must be > 0")
        _check(0.0 < self.w_min <= self.w_max, "tracking.w_min", "need 0 < w_min <= w_max")
        _check(0 <= self.h_max <= 256, "tracking.h_max", "must lie in [0, 256]")
        _check(self.second_best_margin >= 0, "tracking.second_best_margin", "must be >= 0")
        _check(self.duplicate_radius >= 0.0, "tracking.duplicate_radius", "must be >= 0")
        _check(self.miss_max >= 1, "tracking.miss_max", "must be >= 1")
        _check(self.j_max >= 0, "tracking.j_max", "must be >= 0")


@dataclass(frozen=True)
class NoiseParams:
    accel_noise: float = 2e-3  # m/s^2/sqrt(Hz)
    gyro_noise: float = 2e-4  # rad/s/sqrt(Hz)
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5
    pixel_sigma: float = 1.0  # px
    bearing_walk: float = 1e-4  # rad/sqrt(s)
    inverse_depth_walk: float = 1e-4  # 1/m/sqrt(s)
    rho_default: float = 0.5  # 1/m
    rho_sigma0: float = 0.5  # 1/m

    def __post_init__(self):
        for f in dataclasses.fields(self):
            _check(getattr(self, f.name) > 0.0, f"noise.{f.name}", "must be > 0")


@dataclass(frozen=True)
class FilterParams:
    dt_max: float = 0.02
    gravity: float = 9.81
    d_max_track: float = 20.0
    init_window_s: float = 0.5
    gate_probability: float = 0.99
    depth_update: bool = False
    init_position_sigma: float = 1e-4
    init_attitude_sigma: float = 0.02
    init_yaw_sigma: float = 1e-4
    init_velocity_sigma: float = 0.05
    init_accel_bias_sigma: float = 0.05
    init_gyro_bias_sigma: float = 0.005
    psd_tolerance: float = 1e-9

    def __post_init__(self):
        _check(self.dt_max > 0.0, "filter.dt_max", "must be > 0")
        _check(self.gravity > 0.0, "filter.gravity", "must be > 0")
        _check(self.d_max_track > 0.0, "filter.d_max_track", "must be > 0")
        _check(self.init_window_s >= 0.0, "filter.init_window_s", "must be >= 0")
        _check(0.0 < self.gate_probability < 1.0, "filter.gate_probability", "must lie in (0, 1)")
        for name in ("init_position_sigma", "init_attitude_sigma", "init_yaw_sigma", "init_velocity_sigma",
                     "init_accel_bias_sigma", "init_gyro_bias_sigma"):
            _check(getattr(self, name) > 0.0, f"filter.{name}", "must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorParams = field(default_factory=DetectorParams)
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    tracking: TrackingParams = field(default_factory=TrackingParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    filter: FilterParams = field(default_factory=FilterParams)
    seed: int = 0
    record_gap_s: float = 0.15

    def __post_init__(self):
        _check(self.seed >= 0, "seed", "must be a non-negative integer")
        _check(self.record_gap_s > 0.0, "record_gap_s", "must be > 0")

    def to_dict(self):
        return dataclasses.asdict(self)


def _check(ok, key, message):
    if not ok:
        raise ConfigError(f"{key}: {message}")


# ============================================================
# 2. STRICT DICT -> DATACLASS
# ============================================================
def _coerce(value, hint, key, default):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
        return build_dataclass(hint, value, key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} numbers, got {value!r}")
        items = []
        for i, item in enumerate(value):
            items.append(_coerce(item, float, f"{key}[{i}]", None))
        return tuple(items)
    raise ConfigError(f"{key}: unsupported field type {hint}")


def build_dataclass(cls, data, prefix=""):
    """Instantiate `cls` from a mapping, rejecting unknown keys and bad types."""
    hints = typing.get_type_hints(cls)
    fields_by_name = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in (data or {}).items():
        key = f"{prefix}.{name}" if prefix else str(name)
        if name not in fields_by_name:
            raise ConfigError(f"{key}: unknown key")
        f = fields_by_name[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if default is None and f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        kwargs[name] = _coerce(value, hints[name], key, default)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{prefix or cls.__name__}: {e}") from e


def read_yaml(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path=None):
    """Load a PipelineConfig; falls back to $DVEO_CONFIG, then to all defaults."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        logger.info("no config file given, using defaults")
        return PipelineConfig()
    config = build_dataclass(PipelineConfig, read_yaml(path))
    logger.info("loaded config %s", path)
    return config


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(_plain(config.to_dict()), f, sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ============================================================
# 3. CALIBRATION FILE
# ============================================================
_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def _camera_from(data, key):
    if not isinstance(data, dict):
        raise ConfigError(f"{key}: expected a mapping")
    unknown = set(data) - set(_CAMERA_KEYS) - {"distortion"}
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}: unknown key")
    for name in _CAMERA_KEYS:
        if name not in data:
            raise ConfigError(f"{key}.{name}: missing")
    try:
        return PinholeCamera(
            fx=float(data["fx"]), fy=float(data["fy"]), cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
            distortion=tuple(float(d) for d in data.get("distortion", (0.0, 0.0, 0.0, 0.0))),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e}") from e


def _transform_from(data, key):
    if data is None:
        return RigidTransform()
    if not isinstance(data, dict):
        raise ConfigError(f"{key}: expected a mapping")
    unknown = set(data) - {"rotation_xyzw", "translation"}
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}: unknown key")
    try:
        return RigidTransform(
            tuple(float(x) for x in data.get("rotation_xyzw", (0.0, 0.0, 0.0, 1.0))),
            tuple(float(x) for x in data.get("translation", (0.0, 0.0, 0.0))),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e}") from e


def calibration_from_dict(data):
    allowed = {"camera", "depth_camera", "T_cam_imu", "T_depth_color", "d_min", "d_max", "dark_noise"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown calibration key")
    if "camera" not in data:
        raise ConfigError("camera: missing")
    return Calibration(
        camera=_camera_from(data["camera"], "camera"),
        depth_camera=_camera_from(data["depth_camera"], "depth_camera") if data.get("depth_camera") else None,
        extrinsics=ExtrinsicCalib(
            T_cam_imu=_transform_from(data.get("T_cam_imu"), "T_cam_imu"),
            T_depth_color=_transform_from(data.get("T_depth_color"), "T_depth_color"),
        ),
        d_min=float(data.get("d_min", 0.75)),
        d_max=float(data.get("d_max", 6.0)),
        dark_noise=float(data.get("dark_noise", 0.0)),
    )


def calibration_to_dict(calib):
    def cam(c):
        return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
                "distortion": list(c.distortion)}

    def tf(t):
        return {"rotation_xyzw": list(t.rotation_xyzw), "translation": list(t.translation)}

    data = {"camera": cam(calib.camera)}
    if calib.depth_camera is not None:
        data["depth_camera"] = cam(calib.depth_camera)
    data["T_cam_imu"] = tf(calib.extrinsics.T_cam_imu)
    data["T_depth_color"] = tf(calib.extrinsics.T_depth_color)
    data["d_min"] = calib.d_min
    data["d_max"] = calib.d_max
    data["dark_noise"] = calib.dark_noise
    return data


def load_calibration(path):
    return calibration_from_dict(read_yaml(path))


def save_calibration(calib, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# camera intrinsics (pixels), radial-tangential distortion k1 k2 p1 p2,\n")
        f.write("# T_a_b maps points from frame b into frame a, depth range in meters\n")
        yaml.safe_dump(calibration_to_dict(calib), f, sort_keys=False)
