"""Target dynamics (IMU-driven rigid body) and pinhole camera sensing.

The motion model integrates body-frame angular rate and specific force
(gravity-inclusive accelerometer reading) with a closed-form quaternion
exponential for attitude and a half-dt^2 midpoint term for position.  The
camera projects the target position onto the normalized image plane and has
a hard sensing-range limit; an invisible target is a value (None), not an
error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import quat
from .state import TargetState

GRAVITY = np.array([0.0, 0.0, 9.81])  # +z up in the global frame

DT_MAX = 0.1
Z_MIN_DEFAULT = 0.1   # minimum forward depth; guards the 1/z projection


@dataclass
class ImuReading:
    """Body-frame angular rate (rad/s) and accelerometer reading (m/s^2).

    The accelerometer reading is gravity-inclusive: a_m = a_body + R*g for a
    noiseless sensor, so a hovering body measures +R*g.
    """

    omega: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.accel))):
            raise ValueError("IMU reading must be finite")


@dataclass
class NoiseSpec:
    """Continuous-time IMU white-noise densities.

    sigma_omega in rad/s, sigma_accel in m/s^2 (per sqrt(Hz)).  The process
    noise covariance Q is diag(sigma_omega^2 I3, sigma_accel^2 I3); the
    discrete propagation adds G Q G^T * dt, and a sampled reading held over a
    step of length dt carries per-sample noise sigma/sqrt(dt).
    """

    sigma_omega: float = 0.03
    sigma_accel: float = 0.02

    def __post_init__(self):
        if self.sigma_omega < 0.0 or self.sigma_accel < 0.0:
            raise ValueError("noise standard deviations must be >= 0")

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.sigma_omega**2] * 3 + [self.sigma_accel**2] * 3)


@dataclass
class CameraModel:
    """Fixed pinhole camera: rotation global->camera, position, noise, range."""

    rot_gc: np.ndarray          # 3x3, camera coords = rot_gc @ (global - pos)
    pos: np.ndarray             # camera position in the global frame (m)
    pix_cov: np.ndarray         # 2x2 measurement noise, normalized image plane
    range: float = 5.0          # sensing radius (m)
    z_min: float = Z_MIN_DEFAULT

    def __post_init__(self):
        self.rot_gc = np.asarray(self.rot_gc, dtype=float).reshape(3, 3)
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.pix_cov = np.asarray(self.pix_cov, dtype=float).reshape(2, 2)
        if self.range <= 0.0:
            raise ValueError("sensing range must be positive")
        err = np.abs(self.rot_gc @ self.rot_gc.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rot_gc) - 1.0) > 1e-6:
            raise ValueError("rot_gc is not a rotation matrix")


@dataclass
class Measurement:
    """2-D normalized-image-plane observation tagged with source and time."""

    z: np.ndarray
    camera_id: int = 0
    timestep: int = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(2)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("measurement must be finite")


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not 0.0 < dt <= DT_MAX:
        raise ValueError(f"dt={dt} outside (0, {DT_MAX}]")
    return dt


def imu_propagate_state(x: TargetState, u: ImuReading, dt: float) -> TargetState:
    """One zeroth-order-hold integration step of the rigid-body motion.

    q <- exp(omega*dt) ⊗ q  (closed form, increment applied on the left),
    v <- v + (R^T a_m - g) dt,
    p <- p + v dt + (R^T a_m - g) dt^2 / 2.
    """
    dt = _check_dt(dt)
    z_rot = quat.from_rotvec(u.omega * dt)
    q_next = quat.multiply(z_rot, x.q)
    acc_world = quat.rot_matrix(x.q).T @ u.accel - GRAVITY
    v_next = x.v + acc_world * dt
    p_next = x.p + x.v * dt + 0.5 * acc_world * dt * dt
    return TargetState(q_next, p_next, v_next)


def imu_error_jacobians(x: TargetState, u: ImuReading, dt: float):
    """Error-state transition Jacobian Phi (9x9) and noise map G (9x6).

    Phi is the exact Jacobian of imu_propagate_state in the boxplus
    error parameterization [dtheta, dp, dv]: the attitude error block is the
    identity (the gyro increment multiplies on the left and commutes out),
    velocity couples to attitude through -skew(R^T a_m) dt, and position
    additionally picks up the half-dt^2 share of that term.  G maps
    [n_omega, n_accel] with blocks -I (attitude row) and -R^T (velocity
    row); the propagation noise is G Q G^T dt.
    """
    dt = _check_dt(dt)
    r_t = quat.rot_matrix(x.q).T
    a_skew = quat.skew(r_t @ u.accel)

    phi = np.eye(9)
    phi[3:6, 6:9] = np.eye(3) * dt
    phi[6:9, 0:3] = -a_skew * dt
    phi[3:6, 0:3] = -0.5 * a_skew * dt * dt

    g = np.zeros((9, 6))
    g[0:3, 0:3] = -np.eye(3)
    g[6:9, 3:6] = -r_t
    return phi, g


def camera_project(cam: CameraModel, p_target) -> np.ndarray | None:
    """Normalized image coordinates of a point, or None if not visible."""
    p_target = np.asarray(p_target, dtype=float).reshape(3)
    rel = cam.rot_gc @ (p_target - cam.pos)
    if rel[2] <= cam.z_min:
        return None
    if float(np.linalg.norm(p_target - cam.pos)) > cam.range:
        return None
    return rel[:2] / rel[2]


def camera_jacobian(cam: CameraModel, x: TargetState) -> np.ndarray:
    """2x9 measurement Jacobian on the error state; only dp columns nonzero."""
    rel = cam.rot_gc @ (x.p - cam.pos)
    cz = rel[2]
    if cz <= cam.z_min:
        raise ValueError("target at or behind the image plane")
    h_p = np.array([
        [1.0 / cz, 0.0, -rel[0] / (cz * cz)],
        [0.0, 1.0 / cz, -rel[1] / (cz * cz)],
    ])
    h = np.zeros((2, 9))
    h[:, 3:6] = h_p @ cam.rot_gc
    return h


def simulate_measurement(cam: CameraModel, x_true: TargetState, rng,
                         camera_id: int = 0, timestep: int = 0) -> Measurement | None:
    """Project the true position and add Gaussian pixel noise; None if blind."""
    z = camera_project(cam, x_true.p)
    if z is None:
        return None
    noise = np.linalg.cholesky(cam.pix_cov) @ rng.standard_normal(2) \
        if np.any(cam.pix_cov) else np.zeros(2)
    return Measurement(z + noise, camera_id=camera_id, timestep=timestep)
