"""
Synthetic RGB-D + IMU generator with exact ground truth, and trajectory metrics.

Scenes are rectangles and yawed boxes, ray-cast per pixel. Trajectories are
analytic in time (position with two derivatives, ZYX Euler angles with one),
so IMU signals come from closed-form derivatives rather than differencing.
"""

from __future__ import annotations

import dataclasses
import heapq
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from config import NoiseParams, build_dataclass
from core_types import (
    Calibration,
    ExtrinsicCalib,
    PinholeCamera,
    PoseStream,
    RegisteredFrame,
    RigidTransform,
    clamp_depth_range,
    depth_from_millimeters,
    depth_to_millimeters,
    normalized_grid,
    so3_log,
)
from ekf_backend import ImuSample
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
# camera x right = -y_B, y down = -z_B, optical axis = x_B
C_VB = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
ASSOCIATION_TOLERANCE = 0.005
MILLIMETER = 0.001


# ============================================================
# 1. SCENE
# ============================================================
@dataclass(frozen=True)
class Albedo:
    kind: str = "checker"  # checker | noise | constant
    scale: float = 0.25  # checker square / noise lattice size (m)
    base: float = 0.5
    contrast: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("checker", "noise", "constant"):
            raise ConfigError(f"albedo.kind: must be checker, noise or constant, got {self.kind!r}")
        if self.scale <= 0:
            raise ConfigError("albedo.scale: must be > 0")


@dataclass(frozen=True)
class Plane:
    """Rectangle centered at `center`, spanned by `u_axis` and normal x u_axis."""

    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    u_axis: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    half_size: Tuple[float, float] = (1.0, 1.0)
    albedo: Albedo = field(default_factory=Albedo)


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float] = (0.0, 0.0, 0.5)
    size: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    yaw: float = 0.0
    albedo: Albedo = field(default_factory=Albedo)


@dataclass(frozen=True)
class SceneSpec:
    planes: Tuple[Plane, ...] = ()
    boxes: Tuple[Box, ...] = ()
    ambient: float = 1.0
    dark_noise: float = 3.0  # I_DN_sim, added to every gray pixel
    read_noise: float = 0.0  # gray-level std
    depth_noise_coeffs: Tuple[float, float, float] = (0.0, 0.0, 0.0003)
    depth_step: float = 0.001
    d_min: float = 0.75
    d_max: float = 6.0

    def __post_init__(self):
        if not (0.0 <= self.ambient <= 1.0):
            raise ConfigError(f"scene.ambient: must lie in [0, 1], got {self.ambient}")
        if not (0.0 <= self.dark_noise < 255.0):
            raise ConfigError(f"scene.dark_noise: must lie in [0, 255), got {self.dark_noise}")
        if self.read_noise < 0 or self.depth_step < 0:
            raise ConfigError("scene.read_noise / scene.depth_step: must be >= 0")


def _wall(center, normal, u_axis, half_size, albedo):
    return Plane(tuple(center), tuple(normal), tuple(u_axis), tuple(half_size), albedo)


def room_planes(x_range, y_range, height, albedo_seed=0):
    """Inward-facing floor, ceiling and four walls of an axis-aligned room."""
    (x0, x1), (y0, y1) = x_range, y_range
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    hx, hy, hz = 0.5 * (x1 - x0), 0.5 * (y1 - y0), 0.5 * height
    wall = Albedo("noise", 0.2, 0.5, 0.45, albedo_seed)
    return (
        _wall((cx, cy, 0.0), (0, 0, 1), (1, 0, 0), (hx, hy), Albedo("checker", 0.4, 0.5, 0.35)),
        _wall((cx, cy, height), (0, 0, -1), (1, 0, 0), (hx, hy), Albedo("constant", 1.0, 0.6, 0.0)),
        _wall((x1, cy, hz), (-1, 0, 0), (0, 1, 0), (hy, hz), wall),
        _wall((x0, cy, hz), (1, 0, 0), (0, 1, 0), (hy, hz), dataclasses.replace(wall, seed=albedo_seed + 1)),
        _wall((cx, y1, hz), (0, -1, 0), (1, 0, 0), (hx, hz), dataclasses.replace(wall, seed=albedo_seed + 2)),
        _wall((cx, y0, hz), (0, 1, 0), (1, 0, 0), (hx, hz), dataclasses.replace(wall, seed=albedo_seed + 3)),
    )


def scene_preset(name):
    """room | dark_room | flight."""
    crate = Albedo("checker", 0.15, 0.5, 0.4)
    if name == "room":
        return SceneSpec(
            planes=room_planes((-3.0, 4.0), (-3.0, 3.0), 2.6),
            boxes=(
                Box((2.8, -1.0, 0.45), (0.7, 0.9, 0.9), 0.5, crate),
                Box((3.0, 1.2, 0.35), (0.6, 0.6, 0.7), -0.6, crate),
            ),
            ambient=1.0,
        )
    if name == "dark_room":
        furniture = (
            Box((2.4, -1.3, 0.40), (0.6, 0.8, 0.80), 0.60, crate),
            Box((2.8, -0.2, 0.55), (0.5, 0.5, 1.10), -0.50, crate),
            Box((2.3, 0.9, 0.30), (0.7, 0.5, 0.60), 0.40, crate),
            Box((3.2, 1.7, 0.70), (0.5, 0.6, 1.40), -0.70, crate),
            Box((3.4, -2.0, 0.60), (0.6, 0.6, 1.20), 0.30, crate),
            Box((1.9, 0.2, 0.20), (0.4, 0.4, 0.40), 0.75, crate),
            Box((2.0, -0.7, 0.35), (0.4, 0.4, 0.70), 0.785, crate),
            Box((2.6, 0.35, 0.75), (0.2, 0.2, 1.50), 0.60, crate),
            Box((3.6, 1.0, 0.50), (0.5, 0.5, 1.00), 0.90, crate),
            # wall shelf
            Box((3.95, -0.8, 1.70), (0.5, 0.8, 0.40), 0.0, crate),
        )
        return SceneSpec(planes=room_planes((-2.0, 4.2), (-3.0, 3.0), 2.6), boxes=furniture, ambient=0.0)
    if name == "flight":
        return SceneSpec(
            planes=room_planes((-4.0, 4.5), (-3.0, 3.0), 3.0),
            boxes=(
                Box((3.6, -1.4, 0.45), (0.6, 0.8, 0.9), 0.35, crate),
                Box((3.5, 0.2, 0.60), (0.5, 0.5, 1.2), -0.45, crate),
                Box((3.7, 1.6, 0.35), (0.7, 0.6, 0.7), 0.6, crate),
            ),
            ambient=0.3,
        )
    raise ConfigError(f"scene.preset: unknown preset {name!r} (room, dark_room, flight)")


# ============================================================
# 2. TRAJECTORIES
# ============================================================
@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "static"  # static | circle | rectangle | handheld | waypoints
    duration: float = 10.0
    imu_rate: float = 200.0
    frame_rate: float = 10.0
    hold: float = 1.0  # seconds at rest before motion starts
    start: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    yaw: float = 0.0
    pitch: float = 0.0
    radius: float = 1.0
    angular_speed: float = 0.3  # rad/s on the circle
    ramp: float = 2.0  # seconds to reach full speed / amplitude
    length: float = 4.8
    width: float = 1.95
    lap_time: float = 30.0
    amplitude: float = 0.15  # handheld position amplitude (m)
    attitude_amplitude: float = 0.08  # handheld attitude amplitude (rad)
    waypoints: Tuple[Tuple[float, ...], ...] = ()  # rows (t, x, y, z, yaw)

    def __post_init__(self):
        if self.kind not in _TRAJECTORIES:
            raise ConfigError(f"trajectory.kind: unknown kind {self.kind!r}")
        if self.duration <= 0 or self.imu_rate <= 0 or self.frame_rate <= 0:
            raise ConfigError("trajectory.duration / imu_rate / frame_rate: must be > 0")
        if self.hold < 0 or self.ramp <= 0 or self.lap_time <= 0:
            raise ConfigError("trajectory.hold / ramp / lap_time: hold >= 0, others > 0")


@dataclass(frozen=True)
class Kinematics:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    rotation: np.ndarray  # B -> W
    angular_velocity: np.ndarray  # body rates, frame B


def _smootherstep(x):
    """Quintic ramp 0 -> 1 with zero first and second derivative at both ends: (s, s', s'')."""
    x = np.clip(x, 0.0, 1.0)
    s = x**3 * (10.0 - 15.0 * x + 6.0 * x * x)
    ds = 30.0 * x * x * (1.0 - x) ** 2
    dds = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x)
    return s, ds, dds


def _euler_rates(angles, rates):
    """Rotation matrix and body angular velocity from ZYX angles (yaw, pitch, roll) and their rates."""
    psi, theta, phi = angles
    dpsi, dtheta, dphi = rates
    R = Rotation.from_euler("ZYX", [psi, theta, phi]).as_matrix()
    w = np.array([
        dphi - dpsi * np.sin(theta),
        dtheta * np.cos(phi) + dpsi * np.cos(theta) * np.sin(phi),
        dpsi * np.cos(theta) * np.cos(phi) - dtheta * np.sin(phi),
    ])
    return R, w


class Trajectory:
    """Analytic pose of time; subclasses give position and Euler angles after the hold."""

    def __init__(self, spec):
        self.spec = spec

    def _translation(self, tau):
        return np.array(self.spec.start, dtype=float), np.zeros(3), np.zeros(3)

    def _attitude(self, tau):
        return np.array([self.spec.yaw, self.spec.pitch, 0.0]), np.zeros(3)

    def kinematics(self, t):
        tau = max(0.0, t - self.spec.hold)
        p, v, a = self._translation(tau)
        angles, rates = self._attitude(tau)
        R, w = _euler_rates(angles, rates)
        return Kinematics(p, v, a, R, w)


class StaticTrajectory(Trajectory):
    pass


class CircleTrajectory(Trajectory):
    """Yaw-facing-outward circle about `start`, angular speed ramped in with a smootherstep."""

    def _phase(self, tau):
        T, w = self.spec.ramp, self.spec.angular_speed
        if tau < T:
            x = tau / T
            # integral of the quintic ramp
            phi = w * T * (x**4 * 2.5 - x**5 * 3.0 + x**6)
            s, ds, _ = _smootherstep(x)
            return phi, w * s, w * ds / T
        return w * (T * 0.5 + (tau - T)), w, 0.0

    def _translation(self, tau):
        phi, dphi, ddphi = self._phase(tau)
        r = self.spec.radius
        c = np.array(self.spec.start, dtype=float)
        cs, sn = np.cos(phi), np.sin(phi)
        p = c + r * np.array([cs - 1.0, sn, 0.0])
        v = r * np.array([-sn, cs, 0.0]) * dphi
        a = r * (np.array([-cs, -sn, 0.0]) * dphi**2 + np.array([-sn, cs, 0.0]) * ddphi)
        return p, v, a

    def _attitude(self, tau):
        phi, dphi, _ = self._phase(tau)
        return np.array([self.spec.yaw + phi, self.spec.pitch, 0.0]), np.array([dphi, 0.0, 0.0])


class RectangleTrajectory(Trajectory):
    """Stop-and-go rectangle from `start` (+x by length, +y by width, back), constant heading."""

    def __init__(self, spec):
        super().__init__(spec)
        L, W = spec.length, spec.width
        perimeter = 2.0 * (L + W)
        self._sides = [np.array(d, dtype=float) for d in ((L, 0, 0), (0, W, 0), (-L, 0, 0), (0, -W, 0))]
        self._times = [spec.lap_time * np.linalg.norm(d) / perimeter for d in self._sides]

    @property
    def lap_length(self):
        return 2.0 * (self.spec.length + self.spec.width)

    def _translation(self, tau):
        p = np.array(self.spec.start, dtype=float)
        tau = tau % self.spec.lap_time
        for d, T in zip(self._sides, self._times):
            if tau < T:
                s, ds, dds = _smootherstep(tau / T)
                return p + s * d, d * ds / T, d * dds / T**2
            p = p + d
            tau -= T
        return p, np.zeros(3), np.zeros(3)


class HandheldTrajectory(Trajectory):
    """Slow multi-sine sway of position and attitude around `start`, faded in by a smootherstep."""

    _POS = ((0.11, 0.0), (0.17, 1.3), (0.07, 2.1))  # (frequency Hz, phase) per axis
    _ATT = ((0.13, 0.4), (0.19, 2.7), (0.23, 1.1))

    def _ramped_sine(self, tau, amp, freq, phase):
        x = tau / self.spec.ramp
        s, ds, dds = _smootherstep(x)
        ds, dds = ds / self.spec.ramp, dds / self.spec.ramp**2
        w = 2.0 * np.pi * freq
        arg = w * tau + phase
        f, df, ddf = np.sin(arg) - np.sin(phase), w * np.cos(arg), -w * w * np.sin(arg)
        return amp * s * f, amp * (ds * f + s * df), amp * (dds * f + 2.0 * ds * df + s * ddf)

    def _translation(self, tau):
        out = np.array([self._ramped_sine(tau, self.spec.amplitude, f, ph) for f, ph in self._POS])
        return np.array(self.spec.start, dtype=float) + out[:, 0], out[:, 1], out[:, 2]

    def _attitude(self, tau):
        out = np.array([self._ramped_sine(tau, self.spec.attitude_amplitude, f, ph) for f, ph in self._ATT])
        base = np.array([self.spec.yaw, self.spec.pitch, 0.0])
        return base + out[:, 0], out[:, 1]


class WaypointTrajectory(Trajectory):
    """Clamped cubic splines through (t, x, y, z, yaw) rows; t counts from the end of the hold."""

    def __init__(self, spec):
        super().__init__(spec)
        rows = np.asarray(spec.waypoints, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != 5 or len(rows) < 2:
            raise ConfigError("trajectory.waypoints: need at least 2 rows of (t, x, y, z, yaw)")
        if np.any(np.diff(rows[:, 0]) <= 0):
            raise ConfigError("trajectory.waypoints: times must be strictly increasing")
        self._t0, self._t1 = rows[0, 0], rows[-1, 0]
        self._pos = CubicSpline(rows[:, 0], rows[:, 1:4], bc_type="clamped")
        self._yaw = CubicSpline(rows[:, 0], np.unwrap(rows[:, 4]), bc_type="clamped")

    def _clamp(self, tau):
        return min(max(tau + self._t0, self._t0), self._t1)

    def _translation(self, tau):
        s = self._clamp(tau)
        moving = self._t0 <= tau + self._t0 < self._t1
        v = self._pos(s, 1) if moving else np.zeros(3)
        a = self._pos(s, 2) if moving else np.zeros(3)
        return self._pos(s), v, a

    def _attitude(self, tau):
        s = self._clamp(tau)
        moving = tau + self._t0 < self._t1
        dyaw = float(self._yaw(s, 1)) if moving else 0.0
        return np.array([float(self._yaw(s)), self.spec.pitch, 0.0]), np.array([dyaw, 0.0, 0.0])


_TRAJECTORIES = {
    "static": StaticTrajectory,
    "circle": CircleTrajectory,
    "rectangle": RectangleTrajectory,
    "handheld": HandheldTrajectory,
    "waypoints": WaypointTrajectory,
}


def make_trajectory(spec):
    return _TRAJECTORIES[spec.kind](spec)


def trajectory_path_length(traj, t0, t1, step=0.005):
    times = np.arange(t0, t1 + 0.5 * step, step)
    points = np.array([traj.kinematics(t).position for t in times])
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


# ============================================================
# 3. SENSORS
# ============================================================
def _sample_times(duration, rate):
    n = int(np.floor(duration * rate + 1e-9))
    return np.arange(n + 1) / rate


def generate_imu(traj, noise=None, biases=None, rng=None):
    """IMU stream of the trajectory: f = R^T (a - g) + b_f + n_f, w = w_B + b_w + n_w.

    `noise=None` gives exact samples. Discrete noise std is density * sqrt(rate).
    """
    spec = traj.spec
    b_f, b_w = (np.zeros(3), np.zeros(3)) if biases is None else (np.asarray(biases[0]), np.asarray(biases[1]))
    if noise is not None and rng is None:
        raise ConfigError("generate_imu: a seeded generator is required when noise is on")
    samples = []
    root_rate = np.sqrt(spec.imu_rate)
    for t in _sample_times(spec.duration, spec.imu_rate):
        k = traj.kinematics(t)
        f = k.rotation.T @ (k.acceleration - GRAVITY) + b_f
        w = k.angular_velocity + b_w
        if noise is not None:
            f = f + rng.normal(0.0, noise.accel_noise * root_rate, 3)
            w = w + rng.normal(0.0, noise.gyro_noise * root_rate, 3)
        samples.append(ImuSample(float(t), f, w))
    return samples


def default_calibration(width=640, height=480, fx=380.0):
    """D435-like color camera with the IMU 5 cm behind the optical center."""
    cam = PinholeCamera(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)
    c_B = np.array([0.05, 0.0, 0.0])  # camera center in B
    return Calibration(
        camera=cam,
        extrinsics=ExtrinsicCalib(T_cam_imu=RigidTransform.from_rt(C_VB, -C_VB @ c_B)),
        d_min=0.75,
        d_max=6.0,
    )


def camera_pose(kin, calib):
    """World rotation and center of the camera for body kinematics."""
    T = calib.extrinsics.T_cam_imu
    C = T.R
    c_B = -C.T @ T.t
    return kin.rotation @ C.T, kin.position + kin.rotation @ c_B


def _albedo_at(albedo, a, b):
    if albedo.kind == "constant":
        return np.full(a.shape, albedo.base)
    if albedo.kind == "checker":
        parity = (np.floor(a / albedo.scale) + np.floor(b / albedo.scale)) % 2
        return np.clip(albedo.base + albedo.contrast * (2.0 * parity - 1.0), 0.0, 1.0)
    value = 0.65 * _value_noise(a / albedo.scale, b / albedo.scale, albedo.seed)
    value += 0.35 * _value_noise(a / albedo.scale * 2.7, b / albedo.scale * 2.7, albedo.seed + 101)
    return np.clip(albedo.base + albedo.contrast * (2.0 * value - 1.0), 0.0, 1.0)


def _hash01(ix, iy, seed):
    h = (ix.astype(np.int64) * 374761393 + iy.astype(np.int64) * 668265263 + seed * 2246822519) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    return (h ^ (h >> 16)) / 4294967295.0


def _value_noise(x, y, seed):
    """Smoothly interpolated lattice noise in [0, 1]."""
    ix, iy = np.floor(x), np.floor(y)
    fx, fy = x - ix, y - iy
    sx, sy = fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


def _hit_plane(plane, origin, dirs):
    n = np.asarray(plane.normal, dtype=float)
    n = n / np.linalg.norm(n)
    u = np.asarray(plane.u_axis, dtype=float)
    u = u - n * (u @ n)
    u = u / np.linalg.norm(u)
    w = np.cross(n, u)
    p0 = np.asarray(plane.center, dtype=float)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - origin) @ n) / denom
    t[~np.isfinite(t) | (np.abs(denom) < 1e-12)] = np.inf
    rel = origin + t[:, None] * dirs - p0
    a, b = rel @ u, rel @ w
    miss = (t <= 1e-6) | (np.abs(a) > plane.half_size[0]) | (np.abs(b) > plane.half_size[1])
    t[miss] = np.inf
    return t, a, b


def _hit_box(box, origin, dirs):
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    Rb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = Rb.T @ (origin - np.asarray(box.center, dtype=float))
    d = dirs @ Rb
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    half = 0.5 * np.asarray(box.size, dtype=float)
    t1 = (-half - o) / d
    t2 = (half - o) / d
    tmin = np.minimum(t1, t2)
    t_near = tmin.max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    t = np.where((t_near <= t_far) & (t_near > 1e-6), t_near, np.inf)
    face = tmin.argmax(axis=1)
    local = o + t_near[:, None] * d
    # texture coordinates on the hit face
    a = np.where(face == 0, local[:, 1], local[:, 0])
    b = np.where(face == 2, local[:, 1], local[:, 2])
    return t, a, b


def raycast(scene, R_WV, c_W, cam):
    """Exact z-depth (inf on miss) and albedo per pixel."""
    xy = normalized_grid(cam).reshape(-1, 2)
    rays_V = np.column_stack([xy, np.ones(len(xy))])
    dirs = rays_V @ R_WV.T
    best = np.full(len(dirs), np.inf)
    albedo = np.zeros(len(dirs))
    for prim, hit in [(p, _hit_plane) for p in scene.planes] + [(b, _hit_box) for b in scene.boxes]:
        t, a, b = hit(prim, c_W, dirs)
        closer = t < best
        if np.any(closer):
            best[closer] = t[closer]
            albedo[closer] = _albedo_at(prim.albedo, a[closer], b[closer])
    return best.reshape(cam.shape), albedo.reshape(cam.shape)


def render_frame(scene, pose, cam, rng=None, timestamp=0.0):
    """RegisteredFrame of the scene seen from a camera pose (R_WV, center in W).

    Rays are (x, y, 1) in the camera frame, so the hit parameter is the z-depth.
    """
    R_WV, c_W = pose
    depth, albedo = raycast(scene, np.asarray(R_WV, dtype=float), np.asarray(c_W, dtype=float), cam)
    gray = albedo * scene.ambient * 255.0 + scene.dark_noise
    if scene.read_noise > 0 and rng is not None:
        gray = gray + rng.normal(0.0, scene.read_noise, gray.shape)
    gray = np.clip(np.round(gray), 0, 255).astype(np.uint8)

    hit = np.isfinite(depth)
    d = np.where(hit, depth, 0.0)
    if rng is not None and any(scene.depth_noise_coeffs):
        a0, a1, a2 = scene.depth_noise_coeffs
        sigma = a0 + a1 * d + a2 * d * d
        d = d + rng.normal(0.0, 1.0, d.shape) * sigma
    d[~hit | (d < scene.d_min) | (d > scene.d_max)] = 0.0
    if scene.depth_step == MILLIMETER:
        # same float32 values a 16-bit millimeter PNG decodes to
        d = depth_from_millimeters(depth_to_millimeters(d))
    elif scene.depth_step > 0:
        d = np.round(d / scene.depth_step) * scene.depth_step
    d = clamp_depth_range(d, scene.d_min, scene.d_max)
    return RegisteredFrame(timestamp=float(timestamp), gray=gray, depth=d, camera=cam)


# ============================================================
# 4. FULL SIMULATION
# ============================================================
@dataclass(frozen=True)
class ImuSimParams:
    noise: bool = True
    accel_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SimulationSpec:
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu: ImuSimParams = field(default_factory=ImuSimParams)
    width: int = 640
    height: int = 480
    fx: float = 380.0
    seed: int = 0


def simulation_preset(name, seed=0):
    """Scene and trajectory together: flight (rectangle), dark_room (hand-held), room (circle)."""
    if name == "flight":
        traj = TrajectorySpec(kind="rectangle", duration=60.0, start=(-2.8, -0.975, 1.0), lap_time=27.0)
    elif name == "dark_room":
        traj = TrajectorySpec(kind="handheld", duration=30.0, start=(0.0, 0.0, 1.2), pitch=0.2)
    elif name == "room":
        traj = TrajectorySpec(kind="circle", duration=20.0, start=(0.0, 0.0, 1.2), radius=0.5,
                              angular_speed=0.15, yaw=0.0)
    else:
        raise ConfigError(f"unknown simulation preset {name!r} (flight, dark_room, room)")
    return SimulationSpec(scene=scene_preset(name), trajectory=traj, seed=seed)


def _strict_items(cls, data, key):
    if not isinstance(data, (list, tuple)):
        raise ConfigError(f"{key}: expected a list")
    out = []
    for i, item in enumerate(data):
        item = dict(item or {})
        albedo = item.pop("albedo", None)
        obj = build_dataclass(cls, item, f"{key}[{i}]")
        if albedo is not None:
            obj = dataclasses.replace(obj, albedo=build_dataclass(Albedo, albedo, f"{key}[{i}].albedo"))
        out.append(obj)
    return tuple(out)


def simulation_from_dict(data):
    """Parse a simulation config: sections scene, trajectory, imu plus width/height/fx/seed."""
    data = dict(data or {})
    scene_data = dict(data.pop("scene", None) or {})
    traj_data = dict(data.pop("trajectory", None) or {})
    imu_data = data.pop("imu", None) or {}

    preset = scene_data.pop("preset", None)
    planes = scene_data.pop("planes", None)
    boxes = scene_data.pop("boxes", None)
    scene = scene_preset(preset) if preset else SceneSpec()
    overrides = dataclasses.asdict(build_dataclass(SceneSpec, scene_data, "scene"))
    overrides = {k: v for k, v in overrides.items() if k in scene_data}
    scene = dataclasses.replace(scene, **overrides)
    if planes is not None:
        scene = dataclasses.replace(scene, planes=_strict_items(Plane, planes, "scene.planes"))
    if boxes is not None:
        scene = dataclasses.replace(scene, boxes=_strict_items(Box, boxes, "scene.boxes"))

    waypoints = traj_data.pop("waypoints", None)
    trajectory = build_dataclass(TrajectorySpec, traj_data, "trajectory")
    if waypoints is not None:
        try:
            rows = tuple(tuple(float(x) for x in row) for row in waypoints)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"trajectory.waypoints: {e}") from e
        trajectory = dataclasses.replace(trajectory, waypoints=rows)

    spec = build_dataclass(SimulationSpec, data, "")
    return dataclasses.replace(spec, scene=scene, trajectory=trajectory,
                               imu=build_dataclass(ImuSimParams, imu_data, "imu"))


@dataclass
class SimulationResult:
    calibration: Calibration
    imu: List[ImuSample]
    frames: List[RegisteredFrame]
    ground_truth: PoseStream
    frame_truth: PoseStream

    def events(self):
        """IMU samples and frames merged by time, IMU first on equal timestamps."""
        imu = ((s.timestamp, 0, i, s) for i, s in enumerate(self.imu))
        frames = ((f.timestamp, 1, i, f) for i, f in enumerate(self.frames))
        return [e[3] for e in heapq.merge(imu, frames)]


def _truth_stream(traj, times):
    kins = [traj.kinematics(t) for t in times]
    if not kins:
        return PoseStream(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
    return PoseStream(
        np.asarray(times, dtype=float),
        np.array([k.position for k in kins]),
        Rotation.from_matrix(np.array([k.rotation for k in kins])).as_quat(),
    )


def simulate(spec, noise=None, calib=None):
    """Render every frame and sample the IMU of a simulation spec with one seeded generator."""
    rng = np.random.default_rng(spec.seed)
    calib = calib or default_calibration(spec.width, spec.height, spec.fx)
    calib = dataclasses.replace(calib, dark_noise=float(spec.scene.dark_noise), d_min=spec.scene.d_min,
                                d_max=spec.scene.d_max)
    traj = make_trajectory(spec.trajectory)
    noise_params = (noise or NoiseParams()) if spec.imu.noise else None
    imu = generate_imu(traj, noise_params, (spec.imu.accel_bias, spec.imu.gyro_bias), rng)

    frame_times = _sample_times(spec.trajectory.duration, spec.trajectory.frame_rate)
    frames = []
    for t in frame_times:
        pose = camera_pose(traj.kinematics(t), calib)
        frames.append(render_frame(spec.scene, pose, calib.camera, rng, timestamp=t))
    logger.info("simulated %d IMU samples and %d frames (%s, seed %d)",
                len(imu), len(frames), spec.trajectory.kind, spec.seed)
    return SimulationResult(
        calibration=calib,
        imu=imu,
        frames=frames,
        ground_truth=_truth_stream(traj, [s.timestamp for s in imu]),
        frame_truth=_truth_stream(traj, frame_times),
    )


# ============================================================
# 5. TRAJECTORY METRICS
# ============================================================
@dataclass(frozen=True)
class AteResult:
    rmse: float
    mean: float
    median: float
    max: float
    n: int
    rotation: np.ndarray
    translation: np.ndarray


@dataclass(frozen=True)
class RpeResult:
    trans_rmse: float
    rot_rmse: float  # rad
    n: int


def associate(t_est, t_gt, tolerance=ASSOCIATION_TOLERANCE):
    """Nearest-timestamp pairs (i_est, i_gt) within tolerance, each index used once."""
    t_est, t_gt = np.asarray(t_est, dtype=float), np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return np.empty((0, 2), dtype=int)
    j = np.clip(np.searchsorted(t_gt, t_est), 1, max(len(t_gt) - 1, 1))
    left = np.clip(j - 1, 0, len(t_gt) - 1)
    right = np.clip(j, 0, len(t_gt) - 1)
    nearest = np.where(np.abs(t_gt[left] - t_est) <= np.abs(t_gt[right] - t_est), left, right)
    diff = np.abs(t_gt[nearest] - t_est)
    pairs = []
    used = set()
    for i in np.argsort(diff, kind="stable"):
        if diff[i] > tolerance or nearest[i] in used:
            continue
        used.add(int(nearest[i]))
        pairs.append((int(i), int(nearest[i])))
    pairs.sort()
    return np.array(pairs, dtype=int).reshape(-1, 2)


def align_rigid(model, data):
    """Least-squares rotation and translation mapping model points (Nx3) onto data points."""
    mu_m, mu_d = model.mean(axis=0), data.mean(axis=0)
    W = (data - mu_d).T @ (model - mu_m)
    U, _, Vh = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vh) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vh
    return R, mu_d - R @ mu_m


def _paired(estimated, ground_truth):
    pairs = associate(estimated.t, ground_truth.t)
    if len(pairs) < 2:
        raise DataError(f"trajectories overlap in only {len(pairs)} timestamps (need >= 2 within "
                        f"{ASSOCIATION_TOLERANCE * 1000:.0f} ms)")
    return pairs[:, 0], pairs[:, 1]


def _aligned_errors(estimated, ground_truth, align):
    ie, ig = _paired(estimated, ground_truth)
    est, gt = estimated.position[ie], ground_truth.position[ig]
    R, t = align_rigid(est, gt) if align else (np.eye(3), np.zeros(3))
    return ground_truth.t[ig], est @ R.T + t - gt, R, t


def evaluate_ate(estimated, ground_truth, align=True):
    """Absolute translational error after association and (optionally) SE(3) alignment."""
    _, err, R, t = _aligned_errors(estimated, ground_truth, align)
    norms = np.linalg.norm(err, axis=1)
    return AteResult(
        rmse=float(np.sqrt(np.mean(norms**2))), mean=float(norms.mean()), median=float(np.median(norms)),
        max=float(norms.max()), n=len(norms), rotation=R, translation=t,
    )


def evaluate_axis_errors(estimated, ground_truth, align=True):
    """Per-axis error series (times, N x 3) and per-axis RMSE."""
    times, err, _, _ = _aligned_errors(estimated, ground_truth, align)
    return times, err, np.sqrt(np.mean(err**2, axis=0))


def evaluate_rpe(estimated, ground_truth, delta=1.0):
    """Relative pose error over pairs of associated poses `delta` seconds apart."""
    ie, ig = _paired(estimated, ground_truth)
    t = ground_truth.t[ig]
    Re, Rg = estimated.rotations()[ie], ground_truth.rotations()[ig]
    pe, pg = estimated.position[ie], ground_truth.position[ig]
    trans, rots = [], []
    for a in range(len(t)):
        b = int(np.searchsorted(t, t[a] + delta - ASSOCIATION_TOLERANCE))
        if b >= len(t):
            break
        if abs(t[b] - t[a] - delta) > ASSOCIATION_TOLERANCE:
            continue
        rel_e_R, rel_e_t = Re[a].T @ Re[b], Re[a].T @ (pe[b] - pe[a])
        rel_g_R, rel_g_t = Rg[a].T @ Rg[b], Rg[a].T @ (pg[b] - pg[a])
        E_R = rel_g_R.T @ rel_e_R
        E_t = rel_g_R.T @ (rel_e_t - rel_g_t)
        trans.append(np.linalg.norm(E_t))
        rots.append(np.linalg.norm(so3_log(E_R)))
    if not trans:
        raise DataError(f"no pose pairs {delta} s apart in the overlapping interval")
    trans, rots = np.array(trans), np.array(rots)
    return RpeResult(float(np.sqrt(np.mean(trans**2))), float(np.sqrt(np.mean(rots**2))), len(trans))


def final_drift(estimated, ground_truth):
    """Distance between the last associated estimated and true positions (no alignment)."""
    ie, ig = _paired(estimated, ground_truth)
    return float(np.linalg.norm(estimated.position[ie[-1]] - ground_truth.position[ig[-1]]))
