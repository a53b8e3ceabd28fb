"""Augmented-quaternion target state and its 9-dimensional error state.

The state combines an orientation quaternion (global -> body, JPL), a
position and a velocity in the global frame.  Uncertainty lives on the error
state ``[dtheta, dp, dv]`` (rad, m, m/s), packed in that order project-wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quat
from .fusion import check_spd

ERR_DIM = 9
_SL_TH = slice(0, 3)
_SL_P = slice(3, 6)
_SL_V = slice(6, 9)


@dataclass
class TargetState:
    """Orientation (unit quaternion, G->L), position and velocity in G."""

    q: np.ndarray
    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v))):
            raise ValueError("position/velocity must be finite")
        n = float(np.linalg.norm(self.q))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"state quaternion norm {n} too far from 1")

    def copy(self) -> "TargetState":
        return TargetState(self.q.copy(), self.p.copy(), self.v.copy())


@dataclass
class Estimate:
    """A TargetState with a 9x9 SPD covariance over its error state."""

    state: TargetState
    P: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape != (ERR_DIM, ERR_DIM):
            raise ValueError(f"covariance must be {ERR_DIM}x{ERR_DIM}")
        check_spd(self.P)

    def copy(self) -> "Estimate":
        return Estimate(self.state.copy(), self.P.copy())


def boxplus(x: TargetState, delta) -> TargetState:
    """Apply an error-state correction: rotate q, add to p and v."""
    delta = np.asarray(delta, dtype=float).reshape(ERR_DIM)
    q = quat.multiply(x.q, quat.small_angle_to_quat(delta[_SL_TH]))
    return TargetState(q, x.p + delta[_SL_P], x.v + delta[_SL_V])


def error_between(mine: TargetState, theirs: TargetState) -> np.ndarray:
    """Error state of ``mine`` relative to ``theirs`` (the reference).

    Satisfies boxplus(theirs, error_between(mine, theirs)) ≈ mine; the
    quaternion part is the small-angle vector of theirs^-1 ⊗ mine.
    """
    out = np.empty(ERR_DIM)
    out[_SL_TH] = quat.error_angle(theirs.q, mine.q)
    out[_SL_P] = mine.p - theirs.p
    out[_SL_V] = mine.v - theirs.v
    return out
