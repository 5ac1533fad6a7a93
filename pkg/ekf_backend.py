"""
Robocentric error-state EKF.

Error-state layout (dimension 15 + 3J):
    [0:3]    r      robocentric IMU position (m, frame B)
    [3:6]    theta  attitude error, R = R_hat Exp(theta)
    [6:9]    v      robocentric velocity (m/s, frame B)
    [9:12]   b_f    accelerometer bias (m/s^2)
    [12:15]  b_w    gyro bias (rad/s)
    [15+3j : 18+3j]  landmark j: azimuth, elevation (rad, frame V), inverse depth rho (1/m)

r and v are the world position and velocity expressed in the current body
frame, so the world pose is recovered as (R r, R). Landmarks live in the
camera frame and move with the body.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from config import DetectorParams, FilterParams, NoiseParams
from core_types import (
    BearingVector,
    PinholeCamera,
    RigidTransform,
    bearing_angles,
    bearing_angles_jacobian,
    bearing_pixel_jacobian,
    bearing_unit,
    bearing_unit_jacobian,
    left_jacobian,
    pixel_to_bearing,
    quat_normalize,
    right_jacobian,
    skew,
    so3_exp,
    so3_log,
)
from errors import NumericalFault
from feature_detection import depth_error

logger = logging.getLogger(__name__)

ROBOT_DIM = 15
LANDMARK_DIM = 3
IDX_R = slice(0, 3)
IDX_TH = slice(3, 6)
IDX_V = slice(6, 9)
IDX_BF = slice(9, 12)
IDX_BW = slice(12, 15)
RHO_FLOOR_SIGMA = 1e-6


def _landmark_indices(n):
    """(n x 2 bearing rows, n inverse-depth rows) of the first n landmarks in the error state."""
    start = ROBOT_DIM + LANDMARK_DIM * np.arange(n)
    return np.stack([start, start + 1], axis=1), start + 2


def landmark_slice(j):
    start = ROBOT_DIM + LANDMARK_DIM * j
    return slice(start, start + LANDMARK_DIM)


# ============================================================
# 1. TYPES
# ============================================================
@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: float
    accel: np.ndarray  # proper acceleration f_hat, m/s^2, frame B
    gyro: np.ndarray  # rotational rate w_hat, rad/s, frame B

    def __post_init__(self):
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))


@dataclass(eq=False)
class FilterState:
    timestamp: float = 0.0
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))  # xyzw, B -> W
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_f: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # rows: azimuth, elevation, rho
    landmark_ids: Tuple[int, ...] = ()

    @property
    def n_landmarks(self):
        return len(self.landmarks)

    @property
    def dim(self):
        return ROBOT_DIM + LANDMARK_DIM * self.n_landmarks

    @property
    def R(self):
        return Rotation.from_quat(self.q).as_matrix()

    def bearing(self, j):
        return BearingVector(float(self.landmarks[j, 0]), float(self.landmarks[j, 1]))

    def index_of(self, landmark_id):
        return self.landmark_ids.index(landmark_id)

    def copy(self):
        return FilterState(
            timestamp=self.timestamp, r=self.r.copy(), q=self.q.copy(), v=self.v.copy(),
            b_f=self.b_f.copy(), b_w=self.b_w.copy(), landmarks=self.landmarks.copy(),
            landmark_ids=tuple(self.landmark_ids),
        )

    def as_vector(self):
        return np.concatenate([self.r, self.q, self.v, self.b_f, self.b_w, self.landmarks.ravel()])


@dataclass(frozen=True, eq=False)
class FilterModel:
    """Everything propagate/update need besides the state: sensors, noise, tuning."""

    camera: PinholeCamera
    T_cam_imu: RigidTransform = field(default_factory=RigidTransform)
    noise: NoiseParams = field(default_factory=NoiseParams)
    params: FilterParams = field(default_factory=FilterParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    d_min: float = 0.75

    def __post_init__(self):
        C = self.T_cam_imu.R
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "t_BV", -C.T @ self.T_cam_imu.t)  # camera center in B
        object.__setattr__(self, "g", np.array([0.0, 0.0, -self.params.gravity]))
        object.__setattr__(self, "rho_min", 1.0 / self.params.d_max_track)
        object.__setattr__(self, "rho_max", 1.0 / self.d_min)
        object.__setattr__(self, "gate_2d", float(chi2.ppf(self.params.gate_probability, 2)))
        object.__setattr__(self, "gate_1d", float(chi2.ppf(self.params.gate_probability, 1)))

    @staticmethod
    def from_config(calib, config):
        return FilterModel(
            camera=calib.camera, T_cam_imu=calib.extrinsics.T_cam_imu, noise=config.noise,
            params=config.filter, detector=config.detector, d_min=calib.d_min,
        )


# ============================================================
# 2. MANIFOLD HELPERS
# ============================================================
def retract(state, dx):
    """state (+) dx on the error-state manifold."""
    out = state.copy()
    out.r = state.r + dx[IDX_R]
    out.q = quat_normalize(Rotation.from_matrix(state.R @ so3_exp(dx[IDX_TH])).as_quat())
    out.v = state.v + dx[IDX_V]
    out.b_f = state.b_f + dx[IDX_BF]
    out.b_w = state.b_w + dx[IDX_BW]
    if state.n_landmarks:
        out.landmarks = state.landmarks + dx[ROBOT_DIM:].reshape(-1, LANDMARK_DIM)
    return out


def difference(a, b):
    """a (-) b, the error state taking b to a."""
    dx = np.zeros(a.dim)
    dx[IDX_R] = a.r - b.r
    dx[IDX_TH] = so3_log(b.R.T @ a.R)
    dx[IDX_V] = a.v - b.v
    dx[IDX_BF] = a.b_f - b.b_f
    dx[IDX_BW] = a.b_w - b.b_w
    if a.n_landmarks:
        dx[ROBOT_DIM:] = (a.landmarks - b.landmarks).ravel()
    return dx


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFault(f"non-finite {name}", dump={name: np.asarray(a, dtype=float)})


# ============================================================
# 3. PROPAGATION
# ============================================================
def _camera_rates(state, w, model):
    """Camera-frame angular and linear velocity from body rates."""
    w_V = model.C @ w
    v_V = model.C @ (state.v + np.cross(w, model.t_BV))
    return w_V, v_V


def transition(state, accel, gyro, dt, model, clamp=True):
    """Nominal discrete motion model over dt with constant (accel, gyro)."""
    w = gyro - state.b_w
    f = accel - state.b_f
    E = so3_exp(w * dt)
    H = so3_exp(w * dt / 2.0)
    R = state.R
    a = H @ f + R.T @ model.g

    out = state.copy()
    out.timestamp = state.timestamp + dt
    out.r = E.T @ (state.r + state.v * dt + 0.5 * a * dt * dt)
    out.v = E.T @ (state.v + a * dt)
    out.q = quat_normalize(Rotation.from_matrix(R @ E).as_quat())

    if state.n_landmarks:
        w_V, v_V = _camera_rates(state, w, model)
        az, el, rho = state.landmarks.T
        mu = bearing_unit(az, el)
        mu_v = mu @ v_V
        Pv = v_V[None, :] - mu * mu_v[:, None]
        m = mu - dt * np.cross(w_V[None, :], mu) - dt * rho[:, None] * Pv
        az_n, el_n = bearing_angles(m)
        rho_n = rho + dt * rho * rho * mu_v
        if clamp:
            rho_n = np.clip(rho_n, model.rho_min, model.rho_max)
        out.landmarks = np.column_stack([az_n, el_n, rho_n])
    return out


def transition_jacobians(state, accel, gyro, dt, model):
    """Error-state Jacobian F (dim x dim) and noise input G (dim x 6: accel, gyro)."""
    n = state.dim
    w = gyro - state.b_w
    f = accel - state.b_f
    wdt = w * dt
    E = so3_exp(wdt)
    H = so3_exp(wdt / 2.0)
    Et = E.T
    R = state.R
    g_B = R.T @ model.g
    Hf = H @ f
    a = Hf + g_B
    r_n = Et @ (state.r + state.v * dt + 0.5 * a * dt * dt)
    v_n = Et @ (state.v + a * dt)
    dHf_dw = -skew(Hf) @ left_jacobian(wdt / 2.0) * (dt / 2.0)
    Jl_neg = left_jacobian(-wdt)

    F = np.eye(n)
    F[IDX_R, IDX_R] = Et
    F[IDX_R, IDX_TH] = Et @ skew(g_B) * (0.5 * dt * dt)
    F[IDX_R, IDX_V] = Et * dt
    F[IDX_R, IDX_BF] = -0.5 * dt * dt * Et @ H
    F[IDX_R, IDX_BW] = -(dt * skew(r_n) @ Jl_neg + Et @ dHf_dw * (0.5 * dt * dt))

    F[IDX_TH, IDX_TH] = Et
    F[IDX_TH, IDX_BW] = -right_jacobian(wdt) * dt

    F[IDX_V, IDX_TH] = Et @ skew(g_B) * dt
    F[IDX_V, IDX_V] = Et
    F[IDX_V, IDX_BF] = -dt * Et @ H
    F[IDX_V, IDX_BW] = -(dt * skew(v_n) @ Jl_neg + Et @ dHf_dw * dt)

    J = state.n_landmarks
    if J:
        C = model.C
        w_V, v_V = _camera_rates(state, w, model)
        az, el, rho = state.landmarks.T
        mu = bearing_unit(az, el)
        mu_v = mu @ v_V
        Pv = v_V[None, :] - mu * mu_v[:, None]
        m = mu - dt * np.cross(w_V[None, :], mu) - dt * rho[:, None] * Pv

        eye = np.broadcast_to(np.eye(3), (J, 3, 3))
        P = eye - np.einsum("ji,jk->jik", mu, mu)
        dm_dmu = (eye - dt * skew(w_V)[None]
                  + dt * rho[:, None, None] * (mu_v[:, None, None] * eye + np.einsum("ji,k->jik", mu, v_V)))
        dm_drho = -dt * Pv
        dm_dvV = -dt * rho[:, None, None] * P
        dm_dwV = dt * _skew_batch(mu)

        A = bearing_angles_jacobian(m)  # J x 2 x 3
        U = bearing_unit_jacobian(az, el)  # J x 3 x 2
        dvV_dv = C
        dvV_dbw = C @ skew(model.t_BV)
        dwV_dbw = -C

        ll = A @ dm_dmu @ U
        lrho = np.einsum("jik,jk->ji", A, dm_drho)
        lv = A @ dm_dvV @ dvV_dv
        lbw = A @ (dm_dvV @ dvV_dbw + dm_dwV @ dwV_dbw)
        rho2 = dt * rho * rho
        rho_mu = np.einsum("j,k,jkl->jl", np.ones(J), v_V, U) * rho2[:, None]
        rho_rho = 1.0 + 2.0 * dt * rho * mu_v
        rho_v = rho2[:, None] * (mu @ dvV_dv)
        rho_bw = rho2[:, None] * (mu @ dvV_dbw)

        ang, inv = _landmark_indices(J)
        v_cols, bw_cols = np.arange(9)[IDX_V][None, None], np.arange(15)[IDX_BW][None, None]
        F[ang[:, :, None], ang[:, None, :]] = ll
        F[ang, inv[:, None]] = lrho
        F[ang[:, :, None], v_cols] = lv
        F[ang[:, :, None], bw_cols] = lbw
        F[inv[:, None], ang] = rho_mu
        F[inv, inv] = rho_rho
        F[inv[:, None], v_cols[0]] = rho_v
        F[inv[:, None], bw_cols[0]] = rho_bw

    # white noise enters exactly where a bias error does, except on the bias rows
    G = np.hstack([F[:, IDX_BF], F[:, IDX_BW]])
    G[IDX_BF] = 0.0
    G[IDX_BW] = 0.0
    return F, G


def process_noise(state, G, dt, noise):
    Qc = np.diag(np.r_[np.full(3, noise.accel_noise**2 / dt), np.full(3, noise.gyro_noise**2 / dt)])
    Q = G @ Qc @ G.T
    Q[IDX_BF, IDX_BF] += np.eye(3) * noise.accel_bias_walk**2 * dt
    Q[IDX_BW, IDX_BW] += np.eye(3) * noise.gyro_bias_walk**2 * dt
    ang, inv = _landmark_indices(state.n_landmarks)
    Q[ang, ang] += noise.bearing_walk**2 * dt
    Q[inv, inv] += noise.inverse_depth_walk**2 * dt
    return Q


def _propagate_step(state, cov, accel, gyro, dt, model):
    F, G = transition_jacobians(state, accel, gyro, dt, model)
    new_state = transition(state, accel, gyro, dt, model)
    new_cov = F @ cov @ F.T + process_noise(state, G, dt, model.noise)
    return new_state, 0.5 * (new_cov + new_cov.T)


def propagate(state, cov, imu, dt, model):
    """Propagate state and covariance over dt holding the IMU reading constant.

    Steps longer than dt_max are split into equal sub-steps.
    """
    _check_finite("imu", imu.accel, imu.gyro)
    if not np.isfinite(dt) or dt <= 0.0:
        raise NumericalFault(f"propagation step must be positive, got dt={dt}")
    n_sub = max(1, int(np.ceil(dt / model.params.dt_max - 1e-9)))
    h = dt / n_sub
    for _ in range(n_sub):
        state, cov = _propagate_step(state, cov, imu.accel, imu.gyro, h, model)
    return state, cov


# ============================================================
# 4. MEASUREMENT UPDATES
# ============================================================
def measurement_model(state, j, camera):
    """Predicted pixel of landmark j and d(pixel)/d(azimuth, elevation)."""
    az, el = state.landmarks[j, 0], state.landmarks[j, 1]
    return bearing_pixel_jacobian(az, el, camera)


def measurement_jacobian(state, indices, camera):
    """Stacked predicted pixels (2m,) of the given landmarks and their 2m x dim Jacobian."""
    pred = np.zeros(2 * len(indices))
    H = np.zeros((2 * len(indices), state.dim))
    for k, j in enumerate(indices):
        p, J = measurement_model(state, j, camera)
        b = landmark_slice(j).start
        pred[2 * k:2 * k + 2] = p
        H[2 * k:2 * k + 2, b:b + 2] = J
    return pred, H


def gate_matches(state, cov, matches, model):
    """Split (index, pixel) matches into accepted and gated-out by Mahalanobis distance."""
    sigma2 = model.noise.pixel_sigma**2
    accepted, rejected = [], []
    for j, pixel in matches:
        pred, J = measurement_model(state, j, model.camera)
        b = landmark_slice(j).start
        S = J @ cov[b:b + 2, b:b + 2] @ J.T + sigma2 * np.eye(2)
        y = np.asarray(pixel, dtype=float) - pred
        d2 = float(y @ np.linalg.solve(S, y))
        (accepted if d2 <= model.gate_2d else rejected).append((j, pixel))
    return accepted, rejected


def _kalman_update(state, cov, H, y, Rm, model):
    S = H @ cov @ H.T + Rm
    S = 0.5 * (S + S.T)
    try:
        cf = linalg.cho_factor(S)
    except linalg.LinAlgError as e:
        raise NumericalFault("innovation covariance not positive definite",
                             dump={"state": state.as_vector(), "cov": cov, "H": H, "S": S}) from e
    PHt = cov @ H.T
    K = linalg.cho_solve(cf, PHt.T).T
    dx = K @ y
    IKH = np.eye(state.dim) - K @ H
    new_cov = IKH @ cov @ IKH.T + K @ Rm @ K.T
    new_cov = 0.5 * (new_cov + new_cov.T)
    new_state = retract(state, dx)
    if new_state.n_landmarks:
        new_state.landmarks[:, 2] = np.clip(new_state.landmarks[:, 2], model.rho_min, model.rho_max)

    _check_finite("cov", new_cov)
    min_eig = float(np.linalg.eigvalsh(new_cov).min())
    if min_eig < -model.params.psd_tolerance:
        raise NumericalFault(
            f"covariance lost positive semi-definiteness (min eigenvalue {min_eig:.3e})",
            dump={"state": state.as_vector(), "cov_prior": cov, "cov": new_cov, "H": H, "K": K, "y": y},
        )
    return new_state, new_cov


def update(state, cov, matches, model):
    """Stacked pixel-reprojection update over (landmark index, measured pixel) pairs."""
    accepted, rejected = gate_matches(state, cov, matches, model)
    if rejected:
        logger.debug("gated out %d of %d matches", len(rejected), len(matches))
    if not accepted:
        return state, cov
    pred, H = measurement_jacobian(state, [j for j, _ in accepted], model.camera)
    y = np.concatenate([np.asarray(pixel, dtype=float) for _, pixel in accepted]) - pred
    Rm = model.noise.pixel_sigma**2 * np.eye(len(y))
    return _kalman_update(state, cov, H, y, Rm, model)


def inverse_depth_measurement(state, j, depth, model):
    """(rho measured, sigma) from a registered z-depth at landmark j's pixel."""
    mu_z = float(bearing_unit(state.landmarks[j, 0], state.landmarks[j, 1])[2])
    sigma_d = depth_error(depth, model.detector)
    return mu_z / depth, max(mu_z * sigma_d / depth**2, RHO_FLOOR_SIGMA)


def depth_update(state, cov, measurements, model):
    """Scalar inverse-depth updates from (landmark index, z-depth in meters) pairs."""
    rows, ys, variances = [], [], []
    for j, depth in measurements:
        if not depth or depth <= 0.0:
            continue
        rho_meas, sigma = inverse_depth_measurement(state, j, depth, model)
        b = landmark_slice(j).start + 2
        y = rho_meas - state.landmarks[j, 2]
        if y * y / (cov[b, b] + sigma * sigma) > model.gate_1d:
            continue
        h = np.zeros(state.dim)
        h[b] = 1.0
        rows.append(h)
        ys.append(y)
        variances.append(sigma * sigma)
    if not rows:
        return state, cov
    return _kalman_update(state, cov, np.array(rows), np.array(ys), np.diag(variances), model)


# ============================================================
# 5. LANDMARK MANAGEMENT AND OUTPUT
# ============================================================
def initialize_landmark(state, cov, kp, model, landmark_id=None, j_max=None):
    """Append a landmark from a keypoint; None when no slot is open."""
    if j_max is not None and state.n_landmarks >= j_max:
        return None
    b = pixel_to_bearing(kp.pixel, model.camera)
    _, J = bearing_pixel_jacobian(b.azimuth, b.elevation, model.camera)
    J_inv = np.linalg.inv(J)
    bearing_cov = model.noise.pixel_sigma**2 * J_inv @ J_inv.T

    if kp.depth is not None and kp.depth > 0.0:
        mu_z = float(bearing_unit(b.azimuth, b.elevation)[2])
        rho = mu_z / kp.depth
        sigma_rho = max(mu_z * depth_error(kp.depth, model.detector) / kp.depth**2, RHO_FLOOR_SIGMA)
    else:
        rho = model.noise.rho_default
        sigma_rho = model.noise.rho_sigma0
    rho = float(np.clip(rho, model.rho_min, model.rho_max))

    out = state.copy()
    out.landmarks = np.vstack([state.landmarks, [b.azimuth, b.elevation, rho]])
    if landmark_id is None:
        landmark_id = max(state.landmark_ids, default=-1) + 1
    out.landmark_ids = tuple(state.landmark_ids) + (landmark_id,)

    n = state.dim
    new_cov = np.zeros((n + LANDMARK_DIM, n + LANDMARK_DIM))
    new_cov[:n, :n] = cov
    new_cov[n:n + 2, n:n + 2] = bearing_cov
    new_cov[n + 2, n + 2] = sigma_rho**2
    return out, new_cov


def remove_landmark(state, cov, index):
    """Delete landmark `index` from the state and its rows/columns from the covariance."""
    if not (0 <= index < state.n_landmarks):
        raise NumericalFault(f"no landmark at index {index} (J={state.n_landmarks})")
    s = landmark_slice(index)
    keep = np.r_[0:s.start, s.stop:state.dim]
    out = state.copy()
    out.landmarks = np.delete(state.landmarks, index, axis=0)
    ids = list(state.landmark_ids)
    del ids[index]
    out.landmark_ids = tuple(ids)
    return out, cov[np.ix_(keep, keep)].copy()


def world_pose(state):
    """World position R r and orientation quaternion (B -> W)."""
    return state.R @ state.r, state.q.copy()


def landmark_points_world(state, model):
    """World-frame 3D points of every landmark, J x 3."""
    if not state.n_landmarks:
        return np.zeros((0, 3))
    az, el, rho = state.landmarks.T
    p_V = bearing_unit(az, el) / rho[:, None]
    p_B = model.T_cam_imu.inverse().apply(p_V)
    return (p_B + state.r) @ state.R.T


def pose_nees(state, cov, p_world, R_world):
    """NEES of the (position, attitude) error against ground truth."""
    r_true = R_world.T @ np.asarray(p_world, dtype=float)
    e = np.r_[r_true - state.r, so3_log(state.R.T @ R_world)]
    P = cov[:6, :6]
    return float(e @ np.linalg.solve(P, e))


# ============================================================
# 6. INITIALIZATION
# ============================================================
def initial_attitude(samples, window_s):
    """Roll and pitch from the mean accelerometer over the first window; yaw 0."""
    if not samples:
        return np.array([0.0, 0.0, 0.0, 1.0])
    t0 = samples[0].timestamp
    accel = np.array([s.accel for s in samples if s.timestamp - t0 <= window_s])
    fx, fy, fz = accel.mean(axis=0)
    roll = np.arctan2(fy, fz)
    pitch = np.arctan2(-fx, np.hypot(fy, fz))
    return Rotation.from_euler("ZYX", [0.0, pitch, roll]).as_quat()


def initial_covariance(params):
    p = params
    sig = np.r_[
        np.full(3, p.init_position_sigma),
        p.init_attitude_sigma, p.init_attitude_sigma, p.init_yaw_sigma,
        np.full(3, p.init_velocity_sigma),
        np.full(3, p.init_accel_bias_sigma),
        np.full(3, p.init_gyro_bias_sigma),
    ]
    return np.diag(sig**2)


class RobocentricEKF:
    """Single owner of the filter state and covariance."""

    def __init__(self, model, state=None, cov=None):
        self.model = model
        self.state = state if state is not None else FilterState()
        self.cov = cov if cov is not None else initial_covariance(model.params)
        self._next_id = max(self.state.landmark_ids, default=-1) + 1
        self.last_gated = 0

    @classmethod
    def from_imu(cls, model, samples, position=None):
        """Filter at rest at `position` (world), attitude from the initial accelerometer window."""
        q = initial_attitude(samples, model.params.init_window_s)
        state = FilterState(timestamp=samples[0].timestamp if samples else 0.0, q=q)
        if position is not None:
            state.r = state.R.T @ np.asarray(position, dtype=float)
        return cls(model, state)

    def propagate(self, imu, dt):
        self.state, self.cov = propagate(self.state, self.cov, imu, dt, self.model)

    def update(self, matches):
        """Apply a pixel update; returns the number of accepted matches."""
        accepted, rejected = gate_matches(self.state, self.cov, matches, self.model)
        self.last_gated = len(rejected)
        if accepted:
            self.state, self.cov = update(self.state, self.cov, accepted, self.model)
        elif matches:
            logger.warning("all %d matches gated out at t=%.3f", len(matches), self.state.timestamp)
        return len(accepted)

    def depth_update(self, measurements):
        self.state, self.cov = depth_update(self.state, self.cov, measurements, self.model)

    def add_landmark(self, kp, j_max=None):
        """Initialize a landmark; returns its id, or None when the table is full."""
        result = initialize_landmark(self.state, self.cov, kp, self.model, self._next_id, j_max)
        if result is None:
            return None
        self.state, self.cov = result
        self._next_id += 1
        return self.state.landmark_ids[-1]

    def remove_landmark_id(self, landmark_id):
        self.state, self.cov = remove_landmark(self.state, self.cov, self.state.index_of(landmark_id))

    def world_pose(self):
        return world_pose(self.state)

    def snapshot(self):
        return self.state.copy(), self.cov.copy()
