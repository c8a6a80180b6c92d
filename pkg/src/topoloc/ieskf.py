"""Iterated error-state Kalman filter on the 18-DoF vehicle state.

State manifold: rotation (IMU-to-global), position, velocity, accelerometer
bias, gyroscope bias, gravity. The error state is the 18-vector
(dtheta, dp, dv, dba, dbw, dg) in that fixed order; rotation errors compose
on the right of the nominal rotation.

Measurements are tightly coupled: pixel reprojection residuals of global map
points and a wheel-speed residual enter the iterated MAP update directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyMap,
    InsufficientStationaryData,
    MatcherFailure,
    NoMeasurements,
    NonFiniteInput,
    NonPositiveDt,
    NoVisibleLandmarks,
    AllPointsDropped,
    EmptyInput,
    PointBehindCamera,
    SingularNormalMatrix,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    Rotation,
    inv_right_jacobian_so3,
    right_jacobian_so3,
    skew,
    so3_exp,
    so3_log,
)
from .matching import (
    CameraFrame,
    Matched3D2D,
    Matcher,
    reproject_node_features,
    restore_3d,
    statistical_outlier_removal,
)
from .topomap import TopologicalMap

log = logging.getLogger(__name__)

# Error-state layout, shared by F_x, H and the update Jacobian.
ERR_DIM = 18
ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
BW = slice(12, 15)
GRAV = slice(15, 18)

# Camera-frame points closer than this are excluded from feature updates.
MIN_FEATURE_DEPTH_M = 0.1
MAX_IMU_DT_S = 0.1


@dataclass
class NominalState:
    """Manifold-valued filter state."""

    rotation: Rotation
    position: np.ndarray
    velocity: np.ndarray
    bias_accel: np.ndarray
    bias_gyro: np.ndarray
    gravity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.bias_accel = np.asarray(self.bias_accel, dtype=float).reshape(3)
        self.bias_gyro = np.asarray(self.bias_gyro, dtype=float).reshape(3)
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "NominalState":
        return cls(
            rotation=Rotation.identity(),
            position=np.zeros(3),
            velocity=np.zeros(3),
            bias_accel=np.zeros(3),
            bias_gyro=np.zeros(3),
            gravity=np.array([0.0, 0.0, -9.81]),
        )

    def copy(self) -> "NominalState":
        return NominalState(
            rotation=Rotation(self.rotation.q),
            position=self.position.copy(),
            velocity=self.velocity.copy(),
            bias_accel=self.bias_accel.copy(),
            bias_gyro=self.bias_gyro.copy(),
            gravity=self.gravity.copy(),
        )

    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)


def box_plus(state: NominalState, delta: np.ndarray) -> NominalState:
    """Apply an 18-vector tangent increment; rotation composes on the right."""
    delta = np.asarray(delta, dtype=float).reshape(ERR_DIM)
    return NominalState(
        rotation=state.rotation @ so3_exp(delta[ROT]),
        position=state.position + delta[POS],
        velocity=state.velocity + delta[VEL],
        bias_accel=state.bias_accel + delta[BA],
        bias_gyro=state.bias_gyro + delta[BW],
        gravity=state.gravity + delta[GRAV],
    )


def box_minus(a: NominalState, b: NominalState) -> np.ndarray:
    """Tangent increment d with box_plus(b, d) == a (rotation part < pi)."""
    d = np.empty(ERR_DIM)
    d[ROT] = so3_log(b.rotation.inverse() @ a.rotation)
    d[POS] = a.position - b.position
    d[VEL] = a.velocity - b.velocity
    d[BA] = a.bias_accel - b.bias_accel
    d[BW] = a.bias_gyro - b.bias_gyro
    d[GRAV] = a.gravity - b.gravity
    return d


@dataclass
class ImuSample:
    timestamp: float
    accel: np.ndarray  # m/s^2, specific force in the IMU frame
    gyro: np.ndarray  # rad/s

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)


@dataclass
class SpeedSample:
    timestamp: float
    vx: float  # average wheel speed, m/s


@dataclass
class Extrinsics:
    """IMU-to-camera transform: p_cam = rotation @ p_imu + translation."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(Rotation.identity(), np.zeros(3))

    def camera_pose(self, state: NominalState) -> Pose:
        """Camera pose in the global frame for the given IMU state."""
        return state.pose() @ Pose(self.rotation, self.translation).inverse()


@dataclass
class NoiseParams:
    """Process noise densities (per sqrt(Hz)) and measurement covariances."""

    sigma_gyro: float = 2e-3  # rad/s/sqrt(Hz), drives the rotation error
    sigma_accel: float = 2e-2  # m/s^2/sqrt(Hz), drives the velocity error
    sigma_bias_accel: float = 1e-4  # random-walk density of the accel bias
    sigma_bias_gyro: float = 1e-5  # random-walk density of the gyro bias
    r_f_px2: float = 1.5**2  # pixel measurement variance per axis
    r_v: float = 0.3**2  # speed measurement variance, (m/s)^2

    def __post_init__(self):
        for name in (
            "sigma_gyro", "sigma_accel", "sigma_bias_accel",
            "sigma_bias_gyro", "r_f_px2", "r_v",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# propagation

def propagate_state(state: NominalState, imu: ImuSample, dt: float) -> NominalState:
    """Discrete nominal model: biases and gravity constant over the step."""
    omega = imu.gyro - state.bias_gyro
    accel_world = state.rotation.apply(imu.accel - state.bias_accel) + state.gravity
    return NominalState(
        rotation=state.rotation @ so3_exp(omega * dt),
        position=state.position + state.velocity * dt + 0.5 * accel_world * dt * dt,
        velocity=state.velocity + accel_world * dt,
        bias_accel=state.bias_accel.copy(),
        bias_gyro=state.bias_gyro.copy(),
        gravity=state.gravity.copy(),
    )


def error_transition_matrix(state: NominalState, imu: ImuSample, dt: float) -> np.ndarray:
    """Exact differential F_x of the discrete nominal transition.

    Includes the second-order-in-dt couplings of the position row and the
    gravity columns so the matrix matches finite differences of
    ``propagate_state`` under box_plus perturbations to first order.
    """
    omega = (imu.gyro - state.bias_gyro) * dt
    a = imu.accel - state.bias_accel
    r = state.rotation.as_matrix()
    r_skew_a = r @ skew(a)
    f = np.eye(ERR_DIM)
    f[ROT, ROT] = so3_exp(omega).as_matrix().T
    f[ROT, BW] = -right_jacobian_so3(omega) * dt
    f[POS, ROT] = -0.5 * r_skew_a * dt * dt
    f[POS, VEL] = np.eye(3) * dt
    f[POS, BA] = -0.5 * r * dt * dt
    f[POS, GRAV] = 0.5 * np.eye(3) * dt * dt
    f[VEL, ROT] = -r_skew_a * dt
    f[VEL, BA] = -r * dt
    f[VEL, GRAV] = np.eye(3) * dt
    return f


def process_noise_cov(noise: NoiseParams, dt: float) -> np.ndarray:
    """F_n Q_n F_n^T: white noise lands on the rotation, velocity and bias rows.

    The gravity row receives zero process noise; its error obeys
    dg_{t+1} = dg_t exactly and is corrected only through updates.
    """
    q = np.zeros((ERR_DIM, ERR_DIM))
    q[ROT, ROT] = noise.sigma_gyro**2 * dt * np.eye(3)
    q[VEL, VEL] = noise.sigma_accel**2 * dt * np.eye(3)
    q[BA, BA] = noise.sigma_bias_accel**2 * dt * np.eye(3)
    q[BW, BW] = noise.sigma_bias_gyro**2 * dt * np.eye(3)
    return q


def propagate(
    state: NominalState,
    cov: np.ndarray,
    imu: ImuSample,
    dt: float,
    noise: NoiseParams,
):
    """One IMU step: advance the nominal state and the error covariance."""
    if not (np.all(np.isfinite(imu.accel)) and np.all(np.isfinite(imu.gyro)) and np.isfinite(dt)):
        raise NonFiniteInput("IMU sample or dt is not finite")
    if dt <= 0.0:
        raise NonPositiveDt(f"dt={dt} must be positive")
    if dt > MAX_IMU_DT_S * (1.0 + 1e-9):  # tolerate float timestamp jitter
        raise ValueError(f"dt={dt} exceeds the {MAX_IMU_DT_S} s integration limit")
    f = error_transition_matrix(state, imu, dt)
    new_cov = f @ cov @ f.T + process_noise_cov(noise, dt)
    new_cov = 0.5 * (new_cov + new_cov.T)
    return propagate_state(state, imu, dt), new_cov


# ---------------------------------------------------------------------------
# residuals and Jacobians

def residual_feature(
    state: NominalState,
    m: np.ndarray,
    f: np.ndarray,
    extr: Extrinsics,
    intr: CameraIntrinsics,
) -> np.ndarray:
    """Pixel residual z = project(map point into current camera) - measured."""
    w = state.rotation.inverse().apply(np.asarray(m, dtype=float) - state.position)
    q = extr.rotation.apply(w) + extr.translation
    if q[2] <= MIN_FEATURE_DEPTH_M:
        raise PointBehindCamera(f"camera-frame depth {q[2]:.3f} m below minimum")
    u = intr.fx * q[0] / q[2] + intr.cx
    v = intr.fy * q[1] / q[2] + intr.cy
    return np.array([u, v]) - np.asarray(f, dtype=float)


def jacobian_feature(
    state: NominalState,
    m: np.ndarray,
    extr: Extrinsics,
    intr: CameraIntrinsics,
) -> np.ndarray:
    """2x18 feature Jacobian; only the dtheta and dp columns are nonzero."""
    r_t = state.rotation.as_matrix().T
    c_r = extr.rotation.as_matrix()
    w = r_t @ (np.asarray(m, dtype=float) - state.position)
    q = c_r @ w + extr.translation
    if q[2] <= MIN_FEATURE_DEPTH_M:
        raise PointBehindCamera(f"camera-frame depth {q[2]:.3f} m below minimum")
    x, y, z = q
    j_pi = np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / z**2],
            [0.0, intr.fy / z, -intr.fy * y / z**2],
        ]
    )
    h = np.zeros((2, ERR_DIM))
    h[:, ROT] = j_pi @ (c_r @ skew(w))
    h[:, POS] = j_pi @ (-c_r @ r_t)
    return h


def residual_speed(state: NominalState, sample: SpeedSample) -> np.ndarray:
    """z_v = R (vx, 0, 0)^T - v."""
    return state.rotation.apply(np.array([sample.vx, 0.0, 0.0])) - state.velocity


def jacobian_speed(state: NominalState, sample: SpeedSample) -> np.ndarray:
    """3x18 speed Jacobian; nonzero in the dtheta and dv columns."""
    h = np.zeros((3, ERR_DIM))
    h[:, ROT] = -state.rotation.as_matrix() @ skew(np.array([sample.vx, 0.0, 0.0]))
    h[:, VEL] = -np.eye(3)
    return h


def _stack_measurements(
    state: NominalState,
    matches: Matched3D2D | None,
    speed: SpeedSample | None,
    extr: Extrinsics,
    intr: CameraIntrinsics,
    noise: NoiseParams,
):
    """Stacked (z, H, r_inv_diag, n_features_used, n_behind) at ``state``.

    Feature rows carry variance r_f per axis, speed rows r_v; the stacked
    measurement covariance is block diagonal by construction.
    """
    z_rows, h_rows, rinv = [], [], []
    n_used = 0
    n_behind = 0
    if matches is not None and len(matches) > 0:
        r_mat = state.rotation.as_matrix()
        c_r = extr.rotation.as_matrix()
        w = (matches.points - state.position) @ r_mat  # rows: R^T (m - p)
        q = w @ c_r.T + extr.translation
        x, y, z = q[:, 0], q[:, 1], q[:, 2]
        front = z > MIN_FEATURE_DEPTH_M
        n_behind = int(np.count_nonzero(~front))
        idx = np.flatnonzero(front)
        n_used = len(idx)
        if n_used:
            zs = z[idx]
            res = np.column_stack(
                [
                    intr.fx * x[idx] / zs + intr.cx - matches.pixels[idx, 0],
                    intr.fy * y[idx] / zs + intr.cy - matches.pixels[idx, 1],
                ]
            )
            j_pi = np.zeros((n_used, 2, 3))
            j_pi[:, 0, 0] = intr.fx / zs
            j_pi[:, 0, 2] = -intr.fx * x[idx] / zs**2
            j_pi[:, 1, 1] = intr.fy / zs
            j_pi[:, 1, 2] = -intr.fy * y[idx] / zs**2
            skew_w = np.zeros((n_used, 3, 3))
            wi = w[idx]
            skew_w[:, 0, 1] = -wi[:, 2]
            skew_w[:, 0, 2] = wi[:, 1]
            skew_w[:, 1, 0] = wi[:, 2]
            skew_w[:, 1, 2] = -wi[:, 0]
            skew_w[:, 2, 0] = -wi[:, 1]
            skew_w[:, 2, 1] = wi[:, 0]
            h_feat = np.zeros((n_used, 2, ERR_DIM))
            h_feat[:, :, ROT] = np.einsum("nij,jk,nkl->nil", j_pi, c_r, skew_w)
            h_feat[:, :, POS] = j_pi @ (-c_r @ r_mat.T)
            z_rows.append(res.reshape(-1))
            h_rows.append(h_feat.reshape(-1, ERR_DIM))
            rinv.append(np.full(2 * n_used, 1.0 / noise.r_f_px2))
    if speed is not None:
        z_rows.append(residual_speed(state, speed))
        h_rows.append(jacobian_speed(state, speed))
        rinv.append(np.full(3, 1.0 / noise.r_v))
    if not z_rows:
        return np.zeros(0), np.zeros((0, ERR_DIM)), np.zeros(0), n_used, n_behind
    return (
        np.concatenate(z_rows),
        np.vstack(h_rows),
        np.concatenate(rinv),
        n_used,
        n_behind,
    )


@dataclass
class UpdateDiagnostics:
    iterations: int = 0
    cost0: float = 0.0
    cost_final: float = 0.0
    costs: list[float] = field(default_factory=list)  # MAP cost per iterate
    converged: bool = False
    step_rejected: bool = False
    n_features_used: int = 0
    n_behind_camera: int = 0


@dataclass
class FilterParams:
    noise: NoiseParams = field(default_factory=NoiseParams)
    eps: float = 1e-6  # convergence threshold on the iterated step norm
    kappa_max: int = 5
    min_features: int = 8
    sigma_th_px: float = 2.0
    max_node_distance_m: float = 50.0
    freeze_gravity: bool = False
    # priors applied by initialize()
    init_sigma_rot: float = 0.01
    init_sigma_pos: float = 0.02
    init_sigma_vel: float = 0.05
    init_sigma_bias_accel: float = 0.05
    init_sigma_bias_gyro: float = 0.002
    init_sigma_gravity: float = 0.05


def _map_cost(
    state: NominalState,
    state_pred: NominalState,
    cov_pred_inv: np.ndarray,
    matches: Matched3D2D | None,
    speed: SpeedSample | None,
    extr: Extrinsics,
    intr: CameraIntrinsics,
    noise: NoiseParams,
) -> float:
    """Nonlinear MAP objective: prior Mahalanobis term plus residual terms."""
    d = box_minus(state, state_pred)
    cost = float(d @ cov_pred_inv @ d)
    z, _, rinv, _, _ = _stack_measurements(state, matches, speed, extr, intr, noise)
    cost += float(np.sum(z * z * rinv))
    return cost


def iterated_update(
    state_pred: NominalState,
    cov_pred: np.ndarray,
    matches: Matched3D2D | None,
    speed: SpeedSample | None,
    extr: Extrinsics,
    intr: CameraIntrinsics,
    params: FilterParams,
):
    """Iterated MAP update; returns (state, cov, UpdateDiagnostics).

    Each pass relinearizes the stacked residuals at the current iterate,
    transforms the prior covariance through the manifold Jacobian of the
    iterate offset, and applies the information-form gain (one 18x18 solve,
    never a measurement-dimension inverse). A candidate step that raises the
    nonlinear MAP cost is rejected and iteration stops at the best iterate.
    """
    if (matches is None or len(matches) == 0) and speed is None:
        raise NoMeasurements("update called with neither features nor speed")
    noise = params.noise
    try:
        cov_pred_inv = np.linalg.inv(cov_pred)
    except np.linalg.LinAlgError:
        raise SingularNormalMatrix("predicted covariance is singular")

    diag = UpdateDiagnostics()
    x_cur = state_pred.copy()
    cost_cur = None
    k_mat = None
    h_mat = None
    p_mat = None
    identity = np.eye(ERR_DIM)

    for _ in range(params.kappa_max):
        z, h, rinv, n_used, n_behind = _stack_measurements(
            x_cur, matches, speed, extr, intr, noise
        )
        diag.n_features_used = n_used
        diag.n_behind_camera = n_behind
        if len(z) == 0:
            raise NoMeasurements("all measurements rejected (points behind the camera)")
        prior = box_minus(x_cur, state_pred)
        if cost_cur is None:
            cost_cur = float(prior @ cov_pred_inv @ prior) + float(np.sum(z * z * rinv))
            diag.cost0 = cost_cur
            diag.costs.append(cost_cur)

        dtheta = prior[ROT]
        j_rot_inv = right_jacobian_so3(dtheta)  # rotation block of J^-1
        j_inv = identity.copy()
        j_inv[ROT, ROT] = j_rot_inv
        p_mat = j_inv @ cov_pred @ j_inv.T
        p_mat = 0.5 * (p_mat + p_mat.T)
        j_mat_rot = inv_right_jacobian_so3(dtheta)
        j_full = identity.copy()
        j_full[ROT, ROT] = j_mat_rot
        p_inv = j_full.T @ cov_pred_inv @ j_full

        ht_rinv = h.T * rinv
        s = ht_rinv @ h + p_inv
        try:
            k_mat = np.linalg.solve(s, ht_rinv)
        except np.linalg.LinAlgError:
            raise SingularNormalMatrix("H^T R^-1 H + P^-1 is not invertible")
        h_mat = h
        if params.freeze_gravity:
            k_mat[GRAV, :] = 0.0

        prior_j = prior.copy()
        prior_j[ROT] = j_rot_inv @ prior[ROT]
        x_tilde = -k_mat @ z - (identity - k_mat @ h) @ prior_j
        if params.freeze_gravity:
            x_tilde[GRAV] = 0.0
        x_next = box_plus(x_cur, x_tilde)
        cost_next = _map_cost(
            x_next, state_pred, cov_pred_inv, matches, speed, extr, intr, noise
        )
        diag.iterations += 1
        diag.costs.append(cost_next)
        if cost_next > cost_cur * (1.0 + 1e-12) + 1e-15:
            diag.step_rejected = True
            diag.converged = True  # stop at the best iterate found
            break
        x_cur = x_next
        cost_cur = cost_next
        if float(np.linalg.norm(x_tilde)) < params.eps:
            diag.converged = True
            break

    diag.cost_final = cost_cur if cost_cur is not None else 0.0
    cov_post = (identity - k_mat @ h_mat) @ p_mat
    cov_post = 0.5 * (cov_post + cov_post.T)
    return x_cur, cov_post, diag


# ---------------------------------------------------------------------------
# initialization

def initialize(
    initial_pose: Pose,
    imu_window: list[ImuSample],
    params: FilterParams,
):
    """State and covariance from a known pose and a stationary IMU window.

    Gravity is the negated mean rotated specific force, rescaled to the mean
    measured norm; the gyro bias is the window mean. Velocity starts at zero.
    """
    if len(imu_window) < 2:
        raise InsufficientStationaryData("need at least two stationary IMU samples")
    ts = np.array([s.timestamp for s in imu_window])
    dt_med = float(np.median(np.diff(ts)))
    duration = float(ts[-1] - ts[0]) + dt_med
    if duration < 0.5 - 1e-9:
        raise InsufficientStationaryData(
            f"stationary window {duration:.3f} s is shorter than 0.5 s"
        )
    accels = np.array([s.accel for s in imu_window])
    gyros = np.array([s.gyro for s in imu_window])
    r = initial_pose.rotation
    mean_world = r.apply(accels.mean(axis=0))
    norm = np.linalg.norm(mean_world)
    if norm < 1e-6:
        raise InsufficientStationaryData("mean specific force is degenerate")
    gravity = -mean_world / norm * float(np.mean(np.linalg.norm(accels, axis=1)))
    state = NominalState(
        rotation=Rotation(r.q),
        position=initial_pose.translation.copy(),
        velocity=np.zeros(3),
        bias_accel=np.zeros(3),
        bias_gyro=gyros.mean(axis=0),
        gravity=gravity,
    )
    sigmas = np.concatenate(
        [
            np.full(3, params.init_sigma_rot),
            np.full(3, params.init_sigma_pos),
            np.full(3, params.init_sigma_vel),
            np.full(3, params.init_sigma_bias_accel),
            np.full(3, params.init_sigma_bias_gyro),
            np.full(3, params.init_sigma_gravity),
        ]
    )
    cov = np.diag(sigmas**2)
    return state, cov


# ---------------------------------------------------------------------------
# per-frame pipeline

@dataclass
class FrameDiagnostics:
    t: float
    n_matches: int = 0
    n_inliers: int = 0
    iterations: int = 0
    cost0: float = 0.0
    cost_final: float = 0.0
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "n_matches": self.n_matches,
            "n_inliers": self.n_inliers,
            "iterations": self.iterations,
            "cost0": self.cost0,
            "cost_final": self.cost_final,
            "flags": list(self.flags),
        }


class LocalizationFilter:
    """Sequential propagate/update driver around the functional core."""

    def __init__(
        self,
        intrinsics: CameraIntrinsics,
        extrinsics: Extrinsics,
        params: FilterParams | None = None,
    ):
        self.intrinsics = intrinsics
        self.extrinsics = extrinsics
        self.params = params or FilterParams()
        self.state: NominalState | None = None
        self.cov: np.ndarray | None = None
        self.time: float | None = None

    def initialize(self, initial_pose: Pose, imu_window: list[ImuSample]) -> None:
        self.state, self.cov = initialize(initial_pose, imu_window, self.params)
        ts = np.array([s.timestamp for s in imu_window])
        dt_med = float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0
        self.time = float(ts[-1]) + dt_med

    def _require_init(self) -> None:
        if self.state is None:
            raise RuntimeError("filter not initialized")

    def _propagate_chunked(self, sample: ImuSample, dt: float) -> None:
        # propagate() caps single steps at MAX_IMU_DT_S; split longer holds
        n_sub = max(1, int(np.ceil(dt / MAX_IMU_DT_S - 1e-9)))
        sub = dt / n_sub
        for _ in range(n_sub):
            self.state, self.cov = propagate(self.state, self.cov, sample, sub, self.params.noise)

    def propagate_to(self, imu_samples: list[ImuSample], t_end: float) -> None:
        """Integrate samples with zero-order hold, truncating at ``t_end``."""
        self._require_init()
        n = len(imu_samples)
        for i, s in enumerate(imu_samples):
            window_end = imu_samples[i + 1].timestamp if i + 1 < n else t_end
            start = max(self.time, s.timestamp)
            stop = min(window_end, t_end)
            dt = stop - start
            if dt <= 1e-12:
                continue
            self._propagate_chunked(s, dt)
            self.time = stop
        if n and self.time < t_end - 1e-9:
            # gap after the last sample: hold it to the frame timestamp
            self._propagate_chunked(imu_samples[-1], t_end - self.time)
        self.time = max(self.time, t_end)

    def process_frame(
        self,
        imu_samples: list[ImuSample],
        frame: CameraFrame,
        speed: SpeedSample | None,
        topo_map: TopologicalMap,
        matcher: Matcher,
        use_features: bool = True,
    ):
        """Propagate to the frame, then update from map matches and speed.

        Falls back to a speed-only update when matching fails or yields fewer
        than ``min_features`` pairs; with no speed either, the frame is
        propagation-only. Returns (state, cov, FrameDiagnostics).
        """
        self._require_init()
        self.propagate_to(imu_samples, frame.timestamp)
        diag = FrameDiagnostics(t=frame.timestamp)
        if len(topo_map) == 0:
            raise EmptyMap("localization against an empty map")

        matched = None
        if use_features:
            cam_pose = self.extrinsics.camera_pose(self.state)
            node = topo_map.nearest_node(cam_pose.translation)
            dist = float(np.linalg.norm(node.pose.translation - cam_pose.translation))
            if dist > self.params.max_node_distance_m:
                diag.flags.append("node_too_far")
            else:
                try:
                    correspondences = matcher.match(frame, node)
                    diag.n_matches = len(correspondences)
                    reprojected = reproject_node_features(
                        node, correspondences, self.intrinsics, cam_pose
                    )
                    inliers = statistical_outlier_removal(
                        reprojected, self.params.sigma_th_px
                    )
                    matched = restore_3d(inliers, node)
                    diag.n_inliers = len(matched)
                except (MatcherFailure, NoVisibleLandmarks, AllPointsDropped, EmptyInput) as exc:
                    diag.flags.append(f"matcher_failure:{type(exc).__name__}")
                    matched = None
        if matched is not None and len(matched) < self.params.min_features:
            diag.flags.append("insufficient_features")
            matched = None

        if matched is None and speed is None:
            diag.flags.append("no_update")
            return self.state, self.cov, diag
        if matched is None:
            diag.flags.append("speed_only")

        self.state, self.cov, upd = iterated_update(
            self.state, self.cov, matched, speed, self.extrinsics,
            self.intrinsics, self.params,
        )
        diag.iterations = upd.iterations
        diag.cost0 = upd.cost0
        diag.cost_final = upd.cost_final
        if not upd.converged:
            diag.flags.append("not_converged")
        if upd.step_rejected:
            diag.flags.append("step_rejected")
        return self.state, self.cov, diag


def split_imu_stream(samples: list[ImuSample], frame_times: np.ndarray, t_start: float):
    """Bucket IMU samples per frame: sample windows starting in [prev, frame_t)."""
    buckets: list[list[ImuSample]] = [[] for _ in frame_times]
    bounds = np.concatenate([[t_start], np.asarray(frame_times, dtype=float)])
    for s in samples:
        if s.timestamp < t_start - 1e-12:
            continue
        k = int(np.searchsorted(bounds[1:], s.timestamp + 1e-12))
        if k < len(buckets):
            buckets[k].append(s)
    return buckets
