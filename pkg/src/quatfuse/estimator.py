"""Per-agent distributed error-state filter phases.

Each time step runs three phases on every agent:

1. propagate — push the posterior through the motion model (mean via the
   nonlinear model, covariance via the error-state Jacobians),
2. intermediate estimation — fuse the agent's own prior with the priors
   received from its neighbors, expressed as error states relative to the
   agent's own prior, using ICI (or CI for the baseline variant),
3. update — information-form measurement update with the contributions of
   every neighbor's camera (zero contribution for blind cameras).

A centralized single-filter step consuming all measurements (no intermediate
fusion) is provided as the reference baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion, models
from .fusion import FusionDegeneracyError, VectorEstimate, spd_inverse, symmetrize
from .state import ERR_DIM, Estimate, TargetState, boxplus, error_between


class UpdateError(RuntimeError):
    """Posterior information matrix failed the positive-definiteness check."""


@dataclass
class MeasurementContribution:
    """Information-form contribution H^T R^-1 H and H^T R^-1 (z - h(x))."""

    info_matrix: np.ndarray
    info_vector: np.ndarray

    def __post_init__(self):
        self.info_matrix = np.asarray(self.info_matrix, dtype=float).reshape(ERR_DIM, ERR_DIM)
        self.info_vector = np.asarray(self.info_vector, dtype=float).reshape(ERR_DIM)

    @classmethod
    def zero(cls) -> "MeasurementContribution":
        return cls(np.zeros((ERR_DIM, ERR_DIM)), np.zeros(ERR_DIM))

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.info_matrix) or np.any(self.info_vector))


def propagate(prev: Estimate, u: models.ImuReading, dt: float,
              noise: models.NoiseSpec) -> Estimate:
    """Prior estimate: mean through the motion model, P <- Phi P Phi^T + G Q G^T dt."""
    x_prior = models.imu_propagate_state(prev.state, u, dt)
    phi, g = models.imu_error_jacobians(prev.state, u, dt)
    p_prior = symmetrize(phi @ prev.P @ phi.T + (g @ noise.Q @ g.T) * dt)
    return Estimate(x_prior, p_prior)


def _intermediate(mine: Estimate, neighbor_priors, fuse_multi, diagnostics=None) -> Estimate:
    priors = list(neighbor_priors)
    if not priors:
        raise ValueError("neighbor set must contain at least the agent itself")
    if len(priors) == 1:
        # self-loop only: n=1 fusion is the identity and the self error is zero
        return mine

    weights = fusion.trace_weights([e.P for e in priors])
    deltas = [error_between(e.state, mine.state) for e in priors]
    try:
        fused = fuse_multi(
            [VectorEstimate(d, e.P) for d, e in zip(deltas, priors)], weights)
        p_check = fused.P
        correction = fused.x
    except FusionDegeneracyError:
        if diagnostics is not None:
            diagnostics["fusion_fallbacks"] = diagnostics.get("fusion_fallbacks", 0) + 1
        return mine
    return Estimate(boxplus(mine.state, correction), p_check)


def intermediate_estimate(mine: Estimate, neighbor_priors, diagnostics=None) -> Estimate:
    """ICI fusion of the agent's prior with its neighbors' priors.

    ``neighbor_priors`` must include the agent's own prior (self-loop).  The
    neighbor states are expressed as error states relative to ``mine`` and
    fused with inverse-trace weights; the fused correction is applied back to
    ``mine`` with boxplus.  On fusion degeneracy the agent keeps its own
    prior and the event is counted in ``diagnostics``.
    """
    return _intermediate(mine, neighbor_priors, fusion.ici_fuse_multi, diagnostics)


def ci_variant_intermediate(mine: Estimate, neighbor_priors, diagnostics=None) -> Estimate:
    """Same as intermediate_estimate but with the CI fusion rule (baseline)."""
    return _intermediate(mine, neighbor_priors, fusion.ci_fuse_multi, diagnostics)


def measurement_contribution(est: Estimate, sensor: models.CameraModel,
                             z: models.Measurement | None) -> MeasurementContribution:
    """Information contribution of one camera, linearized at est.state.

    A blind camera (z is None) contributes zero information.  If the current
    state estimate projects at or behind the camera's image plane the
    linearization is undefined and the contribution is likewise zero.
    """
    if z is None:
        return MeasurementContribution.zero()
    rel = sensor.rot_gc @ (est.state.p - sensor.pos)
    if rel[2] <= sensor.z_min:
        return MeasurementContribution.zero()
    predicted = rel[:2] / rel[2]
    h = models.camera_jacobian(sensor, est.state)
    try:
        r_inv = spd_inverse(sensor.pix_cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular measurement noise covariance") from exc
    htr = h.T @ r_inv
    return MeasurementContribution(symmetrize(htr @ h), htr @ (z.z - predicted))


def update(intermediate: Estimate, contributions) -> Estimate:
    """Information-form update: P^-1 <- P^-1 + sum I_j, then boxplus correction.

    Contributions are summed, so their order is irrelevant.  With all-zero
    contributions the input is returned unchanged (bit-exact blind round).
    """
    contribs = list(contributions)
    if all(c.is_zero for c in contribs):
        return intermediate
    info_sum = np.zeros((ERR_DIM, ERR_DIM))
    vec_sum = np.zeros(ERR_DIM)
    for c in contribs:
        info_sum += c.info_matrix
        vec_sum += c.info_vector
    try:
        p_post = spd_inverse(spd_inverse(intermediate.P) + info_sum)
    except np.linalg.LinAlgError as exc:
        raise UpdateError("posterior information matrix not SPD") from exc
    delta = p_post @ vec_sum
    return Estimate(boxplus(intermediate.state, delta), p_post)


def centralized_step(prev: Estimate, u: models.ImuReading, dt: float,
                     noise: models.NoiseSpec, cameras, measurements) -> Estimate:
    """Standard error-state EKF step consuming every camera's measurement.

    ``measurements[j]`` is camera j's measurement or None; there is no
    intermediate fusion phase.
    """
    prior = propagate(prev, u, dt, noise)
    contribs = [measurement_contribution(prior, cam, z)
                for cam, z in zip(cameras, measurements)]
    return update(prior, contribs)
