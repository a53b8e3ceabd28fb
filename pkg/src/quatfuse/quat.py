"""JPL-convention unit quaternion algebra on plain numpy arrays.

Quaternions are length-4 arrays ``[q1, q2, q3, q4]`` — vector part first,
scalar part last.  All functions that return a quaternion renormalize it and
canonicalize the sign to ``q4 >= 0`` so that ``q`` and ``-q`` (the same
rotation) have a unique representative.

Under this convention ``rot_matrix(multiply(a, b)) = rot_matrix(a) @
rot_matrix(b)``, i.e. quaternion composition maps to matrix composition, and
``rot_matrix(q)`` transforms coordinates from the reference frame into the
rotated (body) frame.
"""

from __future__ import annotations

import math

import numpy as np

UNIT_TOL_IN = 1e-6    # accepted deviation from unit norm on inputs
UNIT_TOL_OUT = 1e-9   # guaranteed deviation on outputs

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("quaternion has non-finite entries")
    return q


def _check_unit(q: np.ndarray, tol: float = UNIT_TOL_IN) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion norm {n} deviates from 1 by more than {tol}")
    return q


def normalize(q) -> np.ndarray:
    """Unit-normalize and canonicalize sign (q4 >= 0)."""
    q = _as_quat(q)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    q = q / n
    if q[3] < 0.0:
        q = -q
    return q


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("skew: non-finite input")
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def multiply_raw(q_a, q_b) -> np.ndarray:
    """JPL quaternion product, no normalization or sign fixing."""
    av, a4 = q_a[:3], q_a[3]
    bv, b4 = q_b[:3], q_b[3]
    vec = a4 * bv + b4 * av - np.cross(av, bv)
    sca = a4 * b4 - float(av @ bv)
    return np.concatenate([vec, [sca]])


def multiply(q_a, q_b) -> np.ndarray:
    """Quaternion product q_a ⊗ q_b (JPL order), renormalized, q4 >= 0."""
    q_a = _check_unit(_as_quat(q_a))
    q_b = _check_unit(_as_quat(q_b))
    return normalize(multiply_raw(q_a, q_b))


def inverse(q) -> np.ndarray:
    """Conjugate of a unit quaternion: negate the vector part."""
    q = _check_unit(_as_quat(q))
    return normalize(np.array([-q[0], -q[1], -q[2], q[3]]))


def rot_matrix(q) -> np.ndarray:
    """Rotation matrix (2*q4^2 - 1)*I - 2*q4*skew(q_v) + 2*q_v q_v^T."""
    q = _check_unit(_as_quat(q))
    qv, q4 = q[:3], q[3]
    return ((2.0 * q4 * q4 - 1.0) * np.eye(3)
            - 2.0 * q4 * skew(qv)
            + 2.0 * np.outer(qv, qv))


def xi(q) -> np.ndarray:
    """4x3 operator: top block q4*I - skew(q_v), bottom row -q_v^T."""
    q = _as_quat(q)
    qv, q4 = q[:3], q[3]
    out = np.empty((4, 3))
    out[:3, :] = q4 * np.eye(3) - skew(qv)
    out[3, :] = -qv
    return out


def left_matrix(q) -> np.ndarray:
    """4x4 left-multiplication matrix [Xi(q) q]: left_matrix(a) @ b == a ⊗ b."""
    q = _as_quat(q)
    return np.hstack([xi(q), q.reshape(4, 1)])


def error_angle(q_est, q_true) -> np.ndarray:
    """Axis-angle error vector of q_true relative to q_est.

    Returns dtheta such that q_true == q_est ⊗ small_angle_to_quat(dtheta)
    (exactly, for any rotation magnitude).  The relative quaternion
    q_est^-1 ⊗ q_true has vector part Xi(q_est)^T q_true ≈ dtheta/2 for small
    angles; the magnitude is extracted with atan2 so the value stays exact
    for moderate angles, and the sign of the scalar part is folded in so the
    result is independent of the q/-q representative of either input.
    """
    q_est = _check_unit(_as_quat(q_est))
    q_true = _check_unit(_as_quat(q_true))
    dv = xi(q_est).T @ q_true          # vector part of q_est^-1 ⊗ q_true
    ds = float(q_est @ q_true)         # scalar part
    if ds < 0.0:
        dv, ds = -dv, -ds
    s = float(np.linalg.norm(dv))
    if s == 0.0:
        return np.zeros(3)
    return (2.0 * math.atan2(s, ds) / s) * dv


def small_angle_to_quat(dtheta) -> np.ndarray:
    """Unit quaternion for an axis-angle error vector (Gibbs-normalized).

    Exact unit quaternion (1/sqrt(1 + |dtheta|^2/4)) * [dtheta/2; 1]; valid
    for any magnitude, not just small angles.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    if dtheta.shape != (3,) or not np.all(np.isfinite(dtheta)):
        raise ValueError("dtheta must be a finite 3-vector")
    g = 1.0 / math.sqrt(1.0 + 0.25 * float(dtheta @ dtheta))
    return np.concatenate([0.5 * g * dtheta, [g]])


def from_axis_angle(axis, angle: float) -> np.ndarray:
    """Unit quaternion [m sin(angle/2); cos(angle/2)] about unit axis m."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    m = axis / n
    return normalize(np.concatenate([m * math.sin(0.5 * angle),
                                     [math.cos(0.5 * angle)]]))


def from_rotvec(rotvec) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle); exact exp map."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-12:
        # second-order series keeps this smooth through zero
        return normalize(np.concatenate([0.5 * rotvec, [1.0]]))
    return from_axis_angle(rotvec, angle)


def from_rot_matrix(r) -> np.ndarray:
    """Unit quaternion with rot_matrix(q) == r (Shepperd's method)."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValueError("rotation matrix must be 3x3")
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    cands = [tr, r[0, 0], r[1, 1], r[2, 2]]
    case = int(np.argmax(cands))
    if case == 0:
        s = math.sqrt(1.0 + tr) * 2.0
        q = np.array([(r[1, 2] - r[2, 1]) / s,
                      (r[2, 0] - r[0, 2]) / s,
                      (r[0, 1] - r[1, 0]) / s,
                      0.25 * s])
    elif case == 1:
        s = math.sqrt(1.0 + 2.0 * r[0, 0] - tr) * 2.0
        q = np.array([0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[2, 0] + r[0, 2]) / s,
                      (r[1, 2] - r[2, 1]) / s])
    elif case == 2:
        s = math.sqrt(1.0 + 2.0 * r[1, 1] - tr) * 2.0
        q = np.array([(r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s,
                      (r[2, 0] - r[0, 2]) / s])
    else:
        s = math.sqrt(1.0 + 2.0 * r[2, 2] - tr) * 2.0
        q = np.array([(r[2, 0] + r[0, 2]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s,
                      (r[0, 1] - r[1, 0]) / s])
    return normalize(q)


def to_rotvec(q) -> np.ndarray:
    """Rotation vector (axis * angle, angle in [0, pi]) of a unit quaternion."""
    q = _check_unit(_as_quat(q))
    qv, q4 = q[:3], q[3]
    if q4 < 0.0:
        qv, q4 = -qv, -q4
    s = float(np.linalg.norm(qv))
    if s == 0.0:
        return np.zeros(3)
    return (2.0 * math.atan2(s, q4) / s) * qv
