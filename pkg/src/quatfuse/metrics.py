"""Accuracy (RMSE) and consistency (NEES) metrics over Monte-Carlo trials.

Everything here is computed solely from TrialRecord contents — posterior
estimates, ground truth and divergence flags — never from estimator
internals.  Cells at or after an agent's divergence step are excluded from
all averages but counted and reported.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .simnet import TrialRecord
from .state import ERR_DIM, Estimate, TargetState, error_between

DOF = ERR_DIM
RAD2DEG = 180.0 / np.pi


@dataclass
class StepMetrics:
    """Single-cell metrics: position error (m), orientation error (rad), NEES."""

    pos_err: float
    ori_err: float
    nees: float

    @property
    def nees_valid(self) -> bool:
        return np.isfinite(self.nees)


def step_metrics(est: Estimate, truth: TargetState) -> StepMetrics:
    """Errors of one posterior against the truth; NEES is e^T P^-1 e.

    A singular covariance flags the NEES as NaN so it drops out of
    averages; the error norms are still reported.
    """
    e = error_between(est.state, truth)
    pos = float(np.linalg.norm(e[3:6]))
    ori = float(np.linalg.norm(e[0:3]))
    try:
        nees = float(e @ np.linalg.solve(est.P, e))
    except np.linalg.LinAlgError:
        nees = float("nan")
    return StepMetrics(pos, ori, nees)


def _record_errors(rec: TrialRecord):
    """Vectorized per-cell errors: (pos, ori, nees) arrays of shape (steps, n)."""
    qt = rec.truth_q[:, None, :]       # (steps, 1, 4)
    qe = rec.q_est                     # (steps, n, 4)
    # relative quaternion truth^-1 ⊗ est, JPL product with negated vector part
    av, a4 = qt[..., :3], qt[..., 3:4]
    bv, b4 = qe[..., :3], qe[..., 3:4]
    vec = a4 * bv - b4 * av + np.cross(av, bv)
    sca = a4[..., 0] * b4[..., 0] + np.einsum("snk,snk->sn", np.broadcast_to(av, bv.shape), bv)
    flip = sca < 0.0
    vec = np.where(flip[..., None], -vec, vec)
    sca = np.where(flip, -sca, sca)
    s = np.linalg.norm(vec, axis=-1)
    ang = 2.0 * np.arctan2(s, sca)
    factor = np.divide(ang, s, out=np.zeros_like(s), where=s > 0.0)
    dth = vec * factor[..., None]

    dp = rec.p_est - rec.truth_p[:, None, :]
    dv = rec.v_est - rec.truth_v[:, None, :]
    err = np.concatenate([dth, dp, dv], axis=-1)          # (steps, n, 9)

    pos = np.linalg.norm(dp, axis=-1)
    ori = ang
    try:
        sol = np.linalg.solve(rec.P, err[..., None])[..., 0]
        nees = np.einsum("snk,snk->sn", err, sol)
    except np.linalg.LinAlgError:
        steps, n = pos.shape
        nees = np.full((steps, n), np.nan)
        for k in range(steps):
            for i in range(n):
                try:
                    nees[k, i] = err[k, i] @ np.linalg.solve(rec.P[k, i], err[k, i])
                except np.linalg.LinAlgError:
                    pass
    return pos, ori, nees


@dataclass
class AggregateReport:
    """Monte-Carlo aggregate for one (variant, comm_rate) run."""

    variant: str
    comm_rate: float
    trials: int
    steps: int
    n_agents: int
    dof: int
    pos_rmse_step: np.ndarray        # (n, steps) RMSE over trials
    ori_rmse_step_deg: np.ndarray    # (n, steps)
    nees_step: np.ndarray            # (n, steps) mean over trials
    pos_rmse_agent: np.ndarray       # (n,)
    ori_rmse_agent_deg: np.ndarray   # (n,)
    nees_agent: np.ndarray           # (n,)
    pos_rmse_network: float
    ori_rmse_network_deg: float
    nees_series: np.ndarray          # (steps,) mean over agents and trials
    nees_mean: float
    nees_band_95: tuple              # for the statistic averaged over trials*agents
    diverged_trials_per_agent: np.ndarray  # (n,)
    divergence_rate: float
    valid_cells: int
    total_cells: int

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "comm_rate": self.comm_rate,
            "trials": self.trials,
            "steps": self.steps,
            "n_agents": self.n_agents,
            "nees_dof": self.dof,
            "pos_rmse_agent_m": self.pos_rmse_agent.tolist(),
            "ori_rmse_agent_deg": self.ori_rmse_agent_deg.tolist(),
            "nees_agent": self.nees_agent.tolist(),
            "pos_rmse_network_m": self.pos_rmse_network,
            "ori_rmse_network_deg": self.ori_rmse_network_deg,
            "nees_mean": self.nees_mean,
            "nees_band_95": list(self.nees_band_95),
            "diverged_trials_per_agent": self.diverged_trials_per_agent.tolist(),
            "divergence_rate": self.divergence_rate,
            "valid_cells": self.valid_cells,
            "total_cells": self.total_cells,
        }


class MetricsAccumulator:
    """Order-independent fold of trial records into sums.

    aggregate(records) is exactly this fold applied in trial order; the CLI
    feeds records as they complete and sorts by trial index first.
    """

    def __init__(self):
        self._sq_pos = None
        self._sq_ori = None
        self._nees_sum = None
        self._cnt = None
        self._nees_cnt = None
        self._div = None
        self._meta = None
        self._trials = 0

    def add(self, rec: TrialRecord) -> None:
        pos, ori, nees = _record_errors(rec)
        self.add_arrays(pos, ori, nees, rec.valid_mask(), rec.diverged_at,
                        rec.variant, rec.comm_rate)

    def add_arrays(self, pos, ori, nees, valid, diverged_at,
                   variant: str, comm_rate: float) -> None:
        """Fold one trial's per-cell error arrays (all shaped (steps, n))."""
        nees_ok = valid & np.isfinite(nees)
        if self._cnt is None:
            steps, n = pos.shape
            self._sq_pos = np.zeros((steps, n))
            self._sq_ori = np.zeros((steps, n))
            self._nees_sum = np.zeros((steps, n))
            self._cnt = np.zeros((steps, n), dtype=np.int64)
            self._nees_cnt = np.zeros((steps, n), dtype=np.int64)
            self._div = np.zeros(n, dtype=np.int64)
            self._meta = (variant, comm_rate, steps, n)
        self._sq_pos += np.where(valid, pos**2, 0.0)
        self._sq_ori += np.where(valid, ori**2, 0.0)
        self._nees_sum += np.where(nees_ok, np.nan_to_num(nees), 0.0)
        self._cnt += valid
        self._nees_cnt += nees_ok
        self._div += np.asarray(diverged_at) >= 0
        self._trials += 1

    def report(self) -> AggregateReport:
        if self._trials == 0:
            raise ValueError("no records accumulated")
        variant, comm_rate, steps, n = self._meta
        with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mse_pos = np.where(self._cnt > 0, self._sq_pos / np.maximum(self._cnt, 1), np.nan)
            mse_ori = np.where(self._cnt > 0, self._sq_ori / np.maximum(self._cnt, 1), np.nan)
            nees_step = np.where(self._nees_cnt > 0,
                                 self._nees_sum / np.maximum(self._nees_cnt, 1), np.nan)
            pos_rmse_step = np.sqrt(mse_pos).T                     # (n, steps)
            ori_rmse_step = np.sqrt(mse_ori).T
            pos_agent = np.sqrt(np.nanmean(mse_pos, axis=0))       # (n,)
            ori_agent = np.sqrt(np.nanmean(mse_ori, axis=0))
            nees_agent = np.nanmean(nees_step, axis=0)
            nees_series = np.nanmean(nees_step, axis=1)
            nees_mean = float(np.nanmean(nees_series))

        n_avg = self._trials * n
        band = (chi2.ppf(0.025, n_avg * DOF) / n_avg,
                chi2.ppf(0.975, n_avg * DOF) / n_avg)
        return AggregateReport(
            variant=variant, comm_rate=comm_rate, trials=self._trials,
            steps=steps, n_agents=n, dof=DOF,
            pos_rmse_step=pos_rmse_step,
            ori_rmse_step_deg=ori_rmse_step * RAD2DEG,
            nees_step=nees_step.T,
            pos_rmse_agent=pos_agent,
            ori_rmse_agent_deg=ori_agent * RAD2DEG,
            nees_agent=nees_agent,
            pos_rmse_network=float(np.mean(pos_agent)),
            ori_rmse_network_deg=float(np.mean(ori_agent) * RAD2DEG),
            nees_series=nees_series,
            nees_mean=nees_mean,
            nees_band_95=band,
            diverged_trials_per_agent=self._div.copy(),
            divergence_rate=float(self._div.sum() / (self._trials * n)),
            valid_cells=int(self._cnt.sum()),
            total_cells=int(self._trials * steps * n),
        )


def aggregate(records) -> AggregateReport:
    """Fold a list of TrialRecords into an AggregateReport."""
    acc = MetricsAccumulator()
    for rec in records:
        acc.add(rec)
    return acc.report()
