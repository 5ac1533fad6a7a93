"""
Camera models, frame conventions and pixel/bearing conversions.

Frames: B is the IMU body frame (x forward, y left, z up), V the camera frame
(x right, y down, z along the optical axis), W the world frame (z up, gravity
along -z). A transform named T_a_b maps points expressed in frame b into
frame a: p_a = R p_b + t.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import ConfigError

DEPTH_SCALE_MM = 1000.0


# ============================================================
# 1. SO(3) HELPERS
# ============================================================
def skew(v):
    """3x3 cross-product matrix."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(phi):
    """Rotation matrix of a rotation vector."""
    return Rotation.from_rotvec(np.asarray(phi, dtype=float)).as_matrix()


def so3_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def left_jacobian(phi):
    """Left Jacobian of SO(3): Exp(phi + d) ~ Exp(J_l(phi) d) Exp(phi)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def right_jacobian(phi):
    return left_jacobian(-np.asarray(phi, dtype=float))


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion, x y z w) plus translation in meters."""

    rotation_xyzw: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation_xyzw, dtype=float)
        if q.shape != (4,) or not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0.0:
            raise ConfigError(f"rotation_xyzw must be 4 finite numbers, got {self.rotation_xyzw}")
        if len(self.translation) != 3:
            raise ConfigError(f"translation must have 3 entries, got {self.translation}")
        object.__setattr__(self, "rotation_xyzw", tuple(float(x) for x in quat_normalize(q)))
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))

    @staticmethod
    def from_rt(R, t):
        return RigidTransform(tuple(Rotation.from_matrix(R).as_quat()), tuple(np.asarray(t, dtype=float)))

    @property
    def R(self):
        return Rotation.from_quat(self.rotation_xyzw).as_matrix()

    @property
    def t(self):
        return np.array(self.translation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points):
        """Map Nx3 (or 3,) points from the source frame into the target frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def compose(self, other):
        """self * other: apply `other` first, then `self`."""
        R = self.R @ other.R
        return RigidTransform.from_rt(R, self.R @ other.t + self.t)

    def inverse(self):
        R = self.R
        return RigidTransform.from_rt(R.T, -R.T @ self.t)


# ============================================================
# 2. CAMERA MODEL
# ============================================================
@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # k1 k2 p1 p2

    def __post_init__(self):
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))
        if len(self.distortion) != 4:
            raise ConfigError(f"camera.distortion needs 4 radial-tangential coefficients, got {len(self.distortion)}")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"camera focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ConfigError(f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def has_distortion(self):
        return any(d != 0.0 for d in self.distortion)

    def in_bounds(self, u, v):
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1


def distort_normalized(xy, dist):
    """Apply radial-tangential distortion to Nx2 normalized coordinates."""
    k1, k2, p1, p2 = dist
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distortion_jacobian(xy, dist):
    """d(distorted)/d(undistorted), shape (..., 2, 2)."""
    k1, k2, p1, p2 = dist
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dradial = k1 + 2.0 * k2 * r2
    J = np.empty(xy.shape[:-1] + (2, 2))
    J[..., 0, 0] = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x
    J[..., 0, 1] = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
    J[..., 1, 0] = J[..., 0, 1]
    J[..., 1, 1] = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x
    return J


def undistort_normalized(xy_d, dist, iterations=20):
    """Invert distort_normalized with Gauss-Newton, vectorized over leading dims."""
    xy_d = np.asarray(xy_d, dtype=float)
    if not any(dist):
        return xy_d.copy()
    xy = xy_d.copy()
    for _ in range(iterations):
        residual = distort_normalized(xy, dist) - xy_d
        J = distortion_jacobian(xy, dist)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        dx = (J[..., 1, 1] * residual[..., 0] - J[..., 0, 1] * residual[..., 1]) / det
        dy = (-J[..., 1, 0] * residual[..., 0] + J[..., 0, 0] * residual[..., 1]) / det
        xy[..., 0] -= dx
        xy[..., 1] -= dy
        if np.max(np.abs(residual)) < 1e-14:
            break
    return xy


def pixels_to_normalized(pixels, cam):
    pixels = np.asarray(pixels, dtype=float)
    xy_d = np.stack([(pixels[..., 0] - cam.cx) / cam.fx, (pixels[..., 1] - cam.cy) / cam.fy], axis=-1)
    return undistort_normalized(xy_d, cam.distortion)


def normalized_to_pixels(xy, cam):
    xy_d = distort_normalized(np.asarray(xy, dtype=float), cam.distortion)
    return np.stack([cam.fx * xy_d[..., 0] + cam.cx, cam.fy * xy_d[..., 1] + cam.cy], axis=-1)


@functools.lru_cache(maxsize=8)
def normalized_grid(cam):
    """Undistorted normalized coordinates of every pixel center, shape HxWx2 (read-only)."""
    u, v = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    grid = pixels_to_normalized(np.stack([u, v], axis=-1), cam)
    grid.setflags(write=False)
    return grid


# ============================================================
# 3. BEARINGS
# ============================================================
@dataclass(frozen=True)
class BearingVector:
    azimuth: float
    elevation: float

    def unit(self):
        return bearing_unit(self.azimuth, self.elevation)

    @staticmethod
    def from_vector(v):
        az, el = bearing_angles(v)
        return BearingVector(float(az), float(el))


def bearing_unit(azimuth, elevation):
    """Unit vector in V; azimuth turns about -y (toward +x), elevation toward +y."""
    ce = np.cos(elevation)
    return np.stack([ce * np.sin(azimuth), np.sin(elevation), ce * np.cos(azimuth)], axis=-1)


def bearing_unit_jacobian(azimuth, elevation):
    """d(unit vector)/d(azimuth, elevation), (..., 3, 2)."""
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    zero = np.zeros_like(ca)
    return np.stack([
        np.stack([ce * ca, -se * sa], axis=-1),
        np.stack([zero, ce], axis=-1),
        np.stack([-ce * sa, -se * ca], axis=-1),
    ], axis=-2)


def bearing_angles(v):
    """Azimuth/elevation of a (not necessarily unit) direction; scale invariant."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.arctan2(x, z), np.arctan2(y, np.hypot(x, z))


def bearing_angles_jacobian(v):
    """d(azimuth, elevation)/d(v) for nonzero 3-vectors, (..., 2, 3)."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    s2 = x * x + z * z
    s = np.sqrt(s2)
    n2 = s2 + y * y
    return np.stack([
        np.stack([z / s2, np.zeros_like(x), -x / s2], axis=-1),
        np.stack([-x * y / (s * n2), s / n2, -z * y / (s * n2)], axis=-1),
    ], axis=-2)


def pixel_to_bearing(p, cam):
    """Bearing of the undistorted ray through pixel p."""
    xy = pixels_to_normalized(np.asarray(p, dtype=float), cam)
    az, el = bearing_angles(np.array([xy[0], xy[1], 1.0]))
    return BearingVector(float(az), float(el))


def _bearing_to_normalized(azimuth, elevation):
    return np.array([np.tan(azimuth), np.tan(elevation) / np.cos(azimuth)])


def bearing_to_pixel(b, cam):
    """Pixel of a bearing, or None when it falls outside the forward field of view."""
    if abs(b.azimuth) >= np.pi / 2 - 1e-6 or abs(b.elevation) >= np.pi / 2 - 1e-6:
        return None
    pixel = normalized_to_pixels(_bearing_to_normalized(b.azimuth, b.elevation), cam)
    if not cam.in_bounds(pixel[0], pixel[1]):
        return None
    return pixel


def bearing_pixel_jacobian(azimuth, elevation, cam):
    """Pixel (unchecked against bounds) and d(pixel)/d(azimuth, elevation)."""
    ca = np.cos(azimuth)
    xy = _bearing_to_normalized(azimuth, elevation)
    J_norm = np.array([
        [1.0 / ca**2, 0.0],
        [np.tan(elevation) * np.sin(azimuth) / ca**2, 1.0 / (np.cos(elevation) ** 2 * ca)],
    ])
    J_dist = distortion_jacobian(xy, cam.distortion)
    pixel = normalized_to_pixels(xy, cam)
    return pixel, np.diag([cam.fx, cam.fy]) @ J_dist @ J_norm


# ============================================================
# 4. CALIBRATION, FRAMES, REGISTRATION
# ============================================================
@dataclass(frozen=True)
class ExtrinsicCalib:
    T_cam_imu: RigidTransform = field(default_factory=RigidTransform)
    T_depth_color: RigidTransform = field(default_factory=RigidTransform)


@dataclass(frozen=True)
class Calibration:
    camera: PinholeCamera
    extrinsics: ExtrinsicCalib = field(default_factory=ExtrinsicCalib)
    depth_camera: Optional[PinholeCamera] = None
    d_min: float = 0.75
    d_max: float = 6.0
    dark_noise: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max (d_min={self.d_min}, d_max={self.d_max})")
        if not (0.0 <= self.dark_noise < 255.0):
            raise ConfigError(f"dark_noise must lie in [0, 255), got {self.dark_noise}")


@dataclass(frozen=True)
class RegisteredFrame:
    timestamp: float
    gray: np.ndarray  # HxW uint8
    depth: np.ndarray  # HxW float32 meters, 0 = invalid
    camera: PinholeCamera

    def __post_init__(self):
        if self.gray.shape != self.depth.shape:
            raise ConfigError(f"gray {self.gray.shape} and depth {self.depth.shape} differ in size")
        if self.gray.shape != self.camera.shape:
            raise ConfigError(f"frame {self.gray.shape} does not match camera {self.camera.shape}")


@dataclass(frozen=True, eq=False)
class PoseStream:
    """Time-stamped world poses: t (N,), position (N, 3), quaternion xyzw B -> W (N, 4)."""

    t: np.ndarray
    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        p = np.asarray(self.position, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternion, dtype=float).reshape(-1, 4)
        if not (len(t) == len(p) == len(q)):
            raise ConfigError(f"pose stream lengths differ: t {len(t)}, position {len(p)}, quaternion {len(q)}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "quaternion", q)

    def __len__(self):
        return len(self.t)

    def rotations(self):
        return Rotation.from_quat(self.quaternion).as_matrix()


def depth_from_millimeters(raw):
    """16-bit millimeter depth to float32 meters."""
    return np.asarray(raw, dtype=np.float32) / np.float32(DEPTH_SCALE_MM)


def depth_to_millimeters(depth):
    return np.round(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE_MM).astype(np.uint16)


def clamp_depth_range(depth, d_min, d_max):
    """Zero every depth outside [d_min, d_max]."""
    depth = np.asarray(depth, dtype=np.float32).copy()
    depth[(depth < d_min) | (depth > d_max) | ~np.isfinite(depth)] = 0.0
    return depth


def register_depth_to_color(depth_raw, calib, depth_cam=None, color_cam=None):
    """Reproject a depth image (meters, depth-camera frame) into the color camera.

    Occlusions keep the nearer point; unmapped pixels are 0.
    """
    depth_cam = depth_cam or calib.depth_camera or calib.camera
    color_cam = color_cam or calib.camera
    depth_raw = np.asarray(depth_raw, dtype=np.float32)
    if depth_raw.size == 0:
        raise ConfigError("empty depth image")
    if depth_raw.shape != depth_cam.shape:
        raise ConfigError(f"depth image {depth_raw.shape} does not match depth camera {depth_cam.shape}")

    valid = depth_raw > 0
    z = depth_raw[valid].astype(np.float64)
    xy = normalized_grid(depth_cam)[valid]
    points = np.column_stack([xy[:, 0] * z, xy[:, 1] * z, z])
    points = calib.extrinsics.T_depth_color.inverse().apply(points)

    out = np.full(color_cam.shape, np.inf)
    ahead = points[:, 2] > 1e-9
    points = points[ahead]
    if len(points):
        pixels = normalized_to_pixels(points[:, :2] / points[:, 2:3], color_cam)
        u = np.round(pixels[:, 0]).astype(np.int64)
        v = np.round(pixels[:, 1]).astype(np.int64)
        inside = (u >= 0) & (u < color_cam.width) & (v >= 0) & (v < color_cam.height)
        np.minimum.at(out, (v[inside], u[inside]), points[inside, 2])
    out[~np.isfinite(out)] = 0.0
    return clamp_depth_range(out.astype(np.float32), calib.d_min, calib.d_max)
