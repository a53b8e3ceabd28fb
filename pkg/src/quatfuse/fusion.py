"""Track-to-track fusion rules for vector estimates with unknown correlation.

Implements covariance intersection (CI) and inverse covariance intersection
(ICI) for two and for n estimates, on (mean, covariance) pairs of any fixed
dimension.  The distributed filter applies these to 9-dimensional error
states, but nothing here is specific to that.

Conventions:
  * covariances are symmetric positive definite, checked by Cholesky
  * every inverse goes through the symmetric factorization and the result is
    re-symmetrized, so repeated fusion does not accumulate asymmetry
  * a fused information matrix that fails the SPD check raises
    FusionDegeneracyError instead of being silently regularized
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYM_TOL = 1e-10
WEIGHT_SUM_TOL = 1e-12

# golden-section tolerance on the fusion weight of optimize_alpha_two
ALPHA_TOL = 1e-6
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


class FusionDegeneracyError(RuntimeError):
    """Fused information matrix failed the positive-definiteness check."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def check_spd(m: np.ndarray, sym_tol: float = SYM_TOL) -> None:
    """Raise if m is not symmetric (within sym_tol) positive definite."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise np.linalg.LinAlgError("matrix has non-finite entries")
    scale = max(1.0, float(np.abs(m).max()))
    if float(np.abs(m - m.T).max()) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    np.linalg.cholesky(m)  # raises LinAlgError if not positive definite


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix; Cholesky-validated and re-symmetrized."""
    m = symmetrize(np.asarray(m, dtype=float))
    np.linalg.cholesky(m)
    return symmetrize(np.linalg.inv(m))


@dataclass
class VectorEstimate:
    """Mean vector with a symmetric positive-definite covariance."""

    x: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape != (self.x.size, self.x.size):
            raise ValueError(f"covariance shape {self.P.shape} does not match "
                             f"mean of dimension {self.x.size}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("mean has non-finite entries")
        check_spd(self.P)

    @property
    def dim(self) -> int:
        return self.x.size


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fusion weight alpha={alpha} outside [0, 1]")
    return alpha


def check_weights(weights, n: int) -> np.ndarray:
    """Validate a weight vector: length n, each in [0,1], sum 1."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != n:
        raise ValueError(f"expected {n} weights, got {w.size}")
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ValueError("weights must lie in [0, 1]")
    if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights sum to {w.sum()}, expected 1")
    return w


def trace_weights(covariances) -> np.ndarray:
    """Inverse-trace weights: alpha_i proportional to 1/trace(P_i)."""
    covs = list(covariances)
    if not covs:
        raise ValueError("need at least one covariance")
    traces = np.array([float(np.trace(p)) for p in covs])
    if np.any(traces <= 0.0):
        raise ValueError("covariance traces must be positive")
    inv = 1.0 / traces
    return inv / inv.sum()


def ci_fuse_two(e1: VectorEstimate, e2: VectorEstimate, alpha: float) -> VectorEstimate:
    """Covariance intersection of two estimates.

    P_f^-1 = a*P1^-1 + (1-a)*P2^-1,  P_f^-1 x_f = a*P1^-1 x1 + (1-a)*P2^-1 x2.
    """
    alpha = _check_alpha(alpha)
    if e1.dim != e2.dim:
        raise ValueError("estimate dimensions differ")
    i1 = spd_inverse(e1.P)
    i2 = spd_inverse(e2.P)
    info = symmetrize(alpha * i1 + (1.0 - alpha) * i2)
    try:
        p = spd_inverse(info)
    except np.linalg.LinAlgError as exc:
        raise FusionDegeneracyError("CI information matrix not SPD") from exc
    x = p @ (alpha * (i1 @ e1.x) + (1.0 - alpha) * (i2 @ e2.x))
    return VectorEstimate(x, p)


def ici_fuse_two(e1: VectorEstimate, e2: VectorEstimate, alpha: float) -> VectorEstimate:
    """Inverse covariance intersection of two estimates.

    P_f^-1 = P1^-1 + P2^-1 - (a*P1 + (1-a)*P2)^-1, with gains
    K1 = P1^-1 - a*G^-1 and K2 = P2^-1 - (1-a)*G^-1 where G is the convex
    combination; x_f = P_f (K1 x1 + K2 x2).
    """
    alpha = _check_alpha(alpha)
    if e1.dim != e2.dim:
        raise ValueError("estimate dimensions differ")
    i1 = spd_inverse(e1.P)
    i2 = spd_inverse(e2.P)
    gamma_inv = spd_inverse(alpha * e1.P + (1.0 - alpha) * e2.P)
    info = symmetrize(i1 + i2 - gamma_inv)
    try:
        p = spd_inverse(info)
    except np.linalg.LinAlgError as exc:
        raise FusionDegeneracyError("ICI fused information matrix not SPD") from exc
    k1 = i1 - alpha * gamma_inv
    k2 = i2 - (1.0 - alpha) * gamma_inv
    x = p @ (k1 @ e1.x + k2 @ e2.x)
    return VectorEstimate(x, p)


def ici_fuse_multi(estimates, weights) -> VectorEstimate:
    """ICI fusion of n estimates.

    P^-1 = sum_i P_i^-1 - (n-1) * P_beta^-1 with P_beta = sum_i a_i P_i;
    x = P * sum_i [P_i^-1 - (n-1) a_i P_beta^-1] x_i.
    """
    ests = list(estimates)
    if not ests:
        raise ValueError("need at least one estimate")
    n = len(ests)
    w = check_weights(weights, n)
    d = ests[0].dim
    if any(e.dim != d for e in ests):
        raise ValueError("estimate dimensions differ")
    if n == 1:
        return ests[0]

    invs = [spd_inverse(e.P) for e in ests]
    p_beta = symmetrize(sum(a * e.P for a, e in zip(w, ests)))
    try:
        beta_inv = spd_inverse(p_beta)
    except np.linalg.LinAlgError as exc:
        raise FusionDegeneracyError("ICI mixture covariance not SPD") from exc
    info = symmetrize(sum(invs) - (n - 1) * beta_inv)
    try:
        p = spd_inverse(info)
    except np.linalg.LinAlgError as exc:
        raise FusionDegeneracyError("ICI fused information matrix not SPD") from exc
    s = np.zeros(d)
    for a, inv, e in zip(w, invs, ests):
        s += (inv - (n - 1) * a * beta_inv) @ e.x
    return VectorEstimate(p @ s, p)


def ci_fuse_multi(estimates, weights) -> VectorEstimate:
    """CI fusion of n estimates: P^-1 = sum a_i P_i^-1, x = P sum a_i P_i^-1 x_i."""
    ests = list(estimates)
    if not ests:
        raise ValueError("need at least one estimate")
    n = len(ests)
    w = check_weights(weights, n)
    d = ests[0].dim
    if any(e.dim != d for e in ests):
        raise ValueError("estimate dimensions differ")
    if n == 1:
        return ests[0]

    invs = [spd_inverse(e.P) for e in ests]
    info = symmetrize(sum(a * inv for a, inv in zip(w, invs)))
    try:
        p = spd_inverse(info)
    except np.linalg.LinAlgError as exc:
        raise FusionDegeneracyError("CI fused information matrix not SPD") from exc
    s = np.zeros(d)
    for a, inv, e in zip(w, invs, ests):
        s += a * (inv @ e.x)
    return VectorEstimate(p @ s, p)


def _trace_objective(e1: VectorEstimate, e2: VectorEstimate, rule: str):
    """Trace of the fused covariance as a function of alpha (inverses cached)."""
    p1, p2 = e1.P, e2.P
    i1 = spd_inverse(p1)
    i2 = spd_inverse(p2)
    if rule == "ci":
        def f(alpha: float) -> float:
            return float(np.trace(np.linalg.inv(alpha * i1 + (1.0 - alpha) * i2)))
    else:
        def f(alpha: float) -> float:
            gamma_inv = np.linalg.inv(alpha * p1 + (1.0 - alpha) * p2)
            return float(np.trace(np.linalg.inv(i1 + i2 - gamma_inv)))
    return f


def optimize_alpha_two(e1: VectorEstimate, e2: VectorEstimate, rule: str = "ici") -> float:
    """Weight in [0,1] minimizing the fused covariance trace under ``rule``.

    Coarse grid scan (ties broken toward 0.5) followed by golden-section
    refinement of the bracketing interval, to ALPHA_TOL in alpha.
    """
    rule = rule.lower()
    if rule not in ("ci", "ici"):
        raise ValueError(f"unknown fusion rule {rule!r}")
    if e1.dim != e2.dim:
        raise ValueError("estimate dimensions differ")
    f = _trace_objective(e1, e2, rule)

    grid = np.linspace(0.0, 1.0, 33)
    vals = np.array([f(a) for a in grid])
    tol = 1e-12 * (1.0 + float(np.abs(vals).max()))
    near = np.flatnonzero(vals <= vals.min() + tol)
    best_idx = near[np.argmin(np.abs(grid[near] - 0.5))]

    a = grid[max(best_idx - 1, 0)]
    b = grid[min(best_idx + 1, len(grid) - 1)]
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > ALPHA_TOL:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    refined = 0.5 * (a + b)

    # keep the tie-break value on flat objectives (e.g. identical inputs)
    if f(refined) >= vals[best_idx] - tol:
        return float(grid[best_idx])
    return float(refined)
