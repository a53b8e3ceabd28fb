"""Communication-graph sampling, trajectory generation and the trial engine.

A trial advances a synchronous loop: sample the step's directed graph, let
every agent propagate, exchange priors along edges and fuse (ICI or CI),
generate camera measurements from the ground truth, then update.  All
randomness comes from purpose-keyed streams derived from (seed, trial), so
variants compared on the same seed consume identical truth, measurement
noise and graph realizations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from hashlib import sha256

import numpy as np

from . import quat
from .models import GRAVITY, CameraModel, ImuReading, NoiseSpec
from .state import ERR_DIM, Estimate, TargetState

VARIANTS = ("ici", "ci", "centralized", "none")

# purpose codes for the per-trial random streams
_STREAM_IMU = 1
_STREAM_PIXEL = 2
_STREAM_GRAPH = 3
_STREAM_INIT = 4


# ---------------------------------------------------------------------------
# communication graph

@dataclass
class CommGraph:
    """Directed adjacency for one time step; adj[i, j] means i hears j."""

    adj: np.ndarray

    def __post_init__(self):
        self.adj = np.asarray(self.adj, dtype=bool)
        n = self.adj.shape[0]
        if self.adj.shape != (n, n):
            raise ValueError("adjacency must be square")
        if not np.all(np.diag(self.adj)):
            raise ValueError("all self-loops must be present")

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def edges(self) -> set:
        """Ordered pairs (j, i): agent i receives from agent j."""
        ii, jj = np.nonzero(self.adj)
        return {(int(j), int(i)) for i, j in zip(ii, jj)}

    def neighbors_of(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[i])

    def packed(self) -> bytes:
        return np.packbits(self.adj.reshape(-1)).tobytes()


def sample_graph(n: int, rate: float, rng, symmetric: bool = False) -> CommGraph:
    """Each ordered pair (j -> i), j != i, is a link with probability ``rate``.

    Self-loops are always present.  With ``symmetric`` the two directions of
    every pair are forced equal (one draw per unordered pair).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"communication rate {rate} outside [0, 1]")
    draws = rng.random((n, n))
    if symmetric:
        draws = np.triu(draws, 1)
        draws = draws + draws.T
    adj = draws < rate
    np.fill_diagonal(adj, True)
    return CommGraph(adj)


# ---------------------------------------------------------------------------
# ground-truth trajectory and IMU readings

@dataclass
class TrajectorySpec:
    """Parametric flight path; presets stand in for unpublished test paths.

    ``preset-a`` is a circle with a vertical bob, ``preset-b`` a lemniscate
    (figure eight).  Orientation spins in yaw at a constant rate with small
    sinusoidal pitch/roll, independent of the path.
    """

    preset: str = "preset-a"
    center: tuple = (0.0, 0.0, 1.5)
    radius: float = 3.5
    omega: float = 0.63          # path angular frequency (rad/s)
    phase: float = 0.0
    z_amp: float = 0.5
    z_omega: float = 1.26
    yaw_rate: float = 0.6
    pitch_amp: float = 0.15
    pitch_omega: float = 0.9
    roll_amp: float = 0.1
    roll_omega: float = 0.7

    def __post_init__(self):
        if self.preset not in ("preset-a", "preset-b"):
            raise ValueError(f"unknown trajectory preset {self.preset!r}")
        self.center = tuple(float(c) for c in self.center)

    def key(self) -> tuple:
        return (self.preset, self.center, self.radius, self.omega, self.phase,
                self.z_amp, self.z_omega, self.yaw_rate, self.pitch_amp,
                self.pitch_omega, self.roll_amp, self.roll_omega)

    def position(self, t: np.ndarray) -> np.ndarray:
        """Analytic path position, shape (..., 3)."""
        t = np.asarray(t, dtype=float)
        a = self.omega * t + self.phase
        if self.preset == "preset-a":
            xy = np.stack([self.radius * np.cos(a), self.radius * np.sin(a)], axis=-1)
        else:
            xy = np.stack([self.radius * np.sin(a),
                           0.5 * self.radius * np.sin(2.0 * a)], axis=-1)
        z = self.z_amp * np.sin(self.z_omega * t)
        return np.asarray(self.center) + np.concatenate([xy, z[..., None]], axis=-1)

    def velocity(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = self.omega * t + self.phase
        if self.preset == "preset-a":
            xy = np.stack([-self.radius * self.omega * np.sin(a),
                           self.radius * self.omega * np.cos(a)], axis=-1)
        else:
            xy = np.stack([self.radius * self.omega * np.cos(a),
                           self.radius * self.omega * np.cos(2.0 * a)], axis=-1)
        z = self.z_amp * self.z_omega * np.cos(self.z_omega * t)
        return np.concatenate([xy, z[..., None]], axis=-1)

    def orientation(self, t: float) -> np.ndarray:
        """Unit quaternion (G->L) at time t."""
        roll = self.roll_amp * math.sin(self.roll_omega * t)
        pitch = self.pitch_amp * math.sin(self.pitch_omega * t)
        yaw = self.yaw_rate * t
        qx = quat.from_axis_angle([1.0, 0.0, 0.0], roll)
        qy = quat.from_axis_angle([0.0, 1.0, 0.0], pitch)
        qz = quat.from_axis_angle([0.0, 0.0, 1.0], yaw)
        return quat.multiply(quat.multiply(qx, qy), qz)


@dataclass
class _TruthArrays:
    """Ground truth sampled at steps 0..K plus the exact IMU inputs."""

    q: np.ndarray       # (K+1, 4)
    p: np.ndarray       # (K+1, 3)
    v: np.ndarray       # (K+1, 3)
    omega: np.ndarray   # (K, 3) noiseless body rates
    accel: np.ndarray   # (K, 3) noiseless gravity-inclusive accelerometer


@lru_cache(maxsize=8)
def _truth_arrays(key: tuple, dt: float, steps: int) -> _TruthArrays:
    """Integrate the exact IMU inputs that reproduce the analytic path.

    The body rate is the exact zeroth-order-hold inverse of the orientation
    transition and the accelerometer reading maps the exact velocity
    difference, so re-running the propagator on these inputs reproduces the
    stored states bit for bit.
    """
    spec = TrajectorySpec(key[0], key[1], *key[2:])
    times = np.arange(steps + 1) * dt
    v_ref = spec.velocity(times)
    q_ref = np.stack([spec.orientation(t) for t in times])

    q = np.empty((steps + 1, 4))
    p = np.empty((steps + 1, 3))
    v = np.empty((steps + 1, 3))
    om = np.empty((steps, 3))
    ac = np.empty((steps, 3))

    q[0] = q_ref[0]
    p[0] = spec.position(0.0)
    v[0] = v_ref[0]
    for k in range(steps):
        z_rot = quat.multiply_raw(q_ref[k + 1], quat.inverse(q[k]))
        om[k] = quat.to_rotvec(quat.normalize(z_rot)) / dt
        r = quat.rot_matrix(q[k])
        ac[k] = r @ ((v_ref[k + 1] - v[k]) / dt + GRAVITY)
        # replicate the propagator arithmetic exactly
        q[k + 1] = quat.multiply(quat.from_rotvec(om[k] * dt), q[k])
        acc_world = r.T @ ac[k] - GRAVITY
        v[k + 1] = v[k] + acc_world * dt
        p[k + 1] = p[k] + v[k] * dt + 0.5 * acc_world * dt * dt
    return _TruthArrays(q, p, v, om, ac)


def generate_trajectory(spec: TrajectorySpec, dt: float, steps: int,
                        noise: NoiseSpec, rng):
    """Ground-truth states plus noisy IMU readings for the filters.

    Returns (states, readings) where states[k+1] equals the propagation of
    states[k] under the noiseless reading; the returned readings add white
    noise with per-sample deviation sigma/sqrt(dt).  The truth itself is
    deterministic — different seeds change only the noise realization.
    """
    truth = _truth_arrays(spec.key(), float(dt), int(steps))
    states = [TargetState(truth.q[k], truth.p[k], truth.v[k])
              for k in range(steps + 1)]
    s_om = noise.sigma_omega / math.sqrt(dt)
    s_ac = noise.sigma_accel / math.sqrt(dt)
    noise_om = rng.standard_normal((steps, 3)) * s_om
    noise_ac = rng.standard_normal((steps, 3)) * s_ac
    readings = [ImuReading(truth.omega[k] + noise_om[k], truth.accel[k] + noise_ac[k])
                for k in range(steps)]
    return states, readings


# ---------------------------------------------------------------------------
# scenario and trial record

@dataclass
class Scenario:
    """Everything a trial needs: sensors, path, timing, noise and seed."""

    cameras: list
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    comm_rate: float = 0.3
    dt: float = 0.01
    steps: int = 1000
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    init_sigma_ori: float = 0.1     # rad, per axis
    init_sigma_pos: float = 0.5     # m
    init_sigma_vel: float = 0.1     # m/s
    symmetric_links: bool = False
    two_round: bool = False

    def __post_init__(self):
        if not 0.0 <= self.comm_rate <= 1.0:
            raise ValueError("comm_rate must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.cameras:
            raise ValueError("need at least one camera")

    @property
    def n_agents(self) -> int:
        return len(self.cameras)


@dataclass
class TrialRecord:
    """Per-step, per-agent posteriors plus everything metrics need.

    Arrays are indexed [step, agent]; step k holds the posterior of time
    step k+1 (after the measurement update) and the matching ground truth.
    Agents flagged as diverged keep their last finite posterior frozen from
    ``diverged_at`` on.
    """

    variant: str
    comm_rate: float
    seed: int
    trial: int
    q_est: np.ndarray        # (steps, n, 4)
    p_est: np.ndarray        # (steps, n, 3)
    v_est: np.ndarray        # (steps, n, 3)
    P: np.ndarray            # (steps, n, 9, 9)
    truth_q: np.ndarray      # (steps, 4)
    truth_p: np.ndarray      # (steps, 3)
    truth_v: np.ndarray      # (steps, 3)
    visible: np.ndarray      # (steps, n) bool
    graph_bits: np.ndarray   # (steps, ceil(n*n/8)) uint8 packed adjacency
    diverged_at: np.ndarray  # (n,) first diverged step index, -1 if never
    fusion_fallbacks: int = 0
    # optional phase capture (record_phases=True): priors after propagation
    prior_q: np.ndarray | None = None
    prior_p: np.ndarray | None = None
    prior_v: np.ndarray | None = None
    prior_P: np.ndarray | None = None
    trace_intermediate: np.ndarray | None = None   # (steps, n)

    @property
    def steps(self) -> int:
        return self.q_est.shape[0]

    @property
    def n_agents(self) -> int:
        return self.q_est.shape[1]

    def valid_mask(self) -> np.ndarray:
        """(steps, n) bool: cells not yet frozen by divergence."""
        steps, n = self.q_est.shape[:2]
        mask = np.ones((steps, n), dtype=bool)
        for i in range(n):
            d = self.diverged_at[i]
            if d >= 0:
                mask[d:, i] = False
        return mask

    def estimate_at(self, step: int, agent: int) -> Estimate:
        return Estimate(
            TargetState(self.q_est[step, agent], self.p_est[step, agent],
                        self.v_est[step, agent]),
            self.P[step, agent])

    def truth_at(self, step: int) -> TargetState:
        return TargetState(self.truth_q[step], self.truth_p[step], self.truth_v[step])

    def digest(self) -> str:
        h = sha256()
        for arr in (self.q_est, self.p_est, self.v_est, self.P,
                    self.truth_q, self.truth_p, self.truth_v,
                    self.visible, self.graph_bits, self.diverged_at):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def trial_streams(seed: int, trial: int) -> dict:
    """Purpose-keyed generators so variants share noise realizations."""
    def make(purpose):
        return np.random.default_rng(
            np.random.SeedSequence((int(seed) & 0xFFFFFFFFFFFFFFFF, int(trial), purpose)))
    return {
        "imu": make(_STREAM_IMU),
        "pixel": make(_STREAM_PIXEL),
        "graph": make(_STREAM_GRAPH),
        "init": make(_STREAM_INIT),
    }


# ---------------------------------------------------------------------------
# engine kernels (raw-array mirrors of the estimator reference operations)

def _batch_normalize(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    flip = q[..., 3] < 0.0
    q[flip] = -q[flip]
    return q


def _batch_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for a (n, 4) stack of unit quaternions."""
    qv = q[:, :3]
    q4 = q[:, 3]
    n = q.shape[0]
    s = np.zeros((n, 3, 3))
    s[:, 0, 1] = -qv[:, 2]
    s[:, 0, 2] = qv[:, 1]
    s[:, 1, 0] = qv[:, 2]
    s[:, 1, 2] = -qv[:, 0]
    s[:, 2, 0] = -qv[:, 1]
    s[:, 2, 1] = qv[:, 0]
    eye = np.eye(3)
    return ((2.0 * q4 * q4 - 1.0)[:, None, None] * eye
            - (2.0 * q4)[:, None, None] * s
            + 2.0 * qv[:, :, None] * qv[:, None, :])


def _batch_skew(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    s = np.zeros((n, 3, 3))
    s[:, 0, 1] = -v[:, 2]
    s[:, 0, 2] = v[:, 1]
    s[:, 1, 0] = v[:, 2]
    s[:, 1, 2] = -v[:, 0]
    s[:, 2, 0] = -v[:, 1]
    s[:, 2, 1] = v[:, 0]
    return s


def _rotvec_rows(rel: np.ndarray) -> np.ndarray:
    """Axis-angle vectors of a stack of unit quaternions (sign-folded)."""
    flip = rel[:, 3] < 0.0
    rel = np.where(flip[:, None], -rel, rel)
    s = np.linalg.norm(rel[:, :3], axis=1)
    ang = 2.0 * np.arctan2(s, rel[:, 3])
    factor = np.divide(ang, s, out=np.zeros_like(s), where=s > 0.0)
    return rel[:, :3] * factor[:, None]


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _chol_ok(m: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(m)
        return True
    except np.linalg.LinAlgError:
        return False


class _Engine:
    """One trial's state machine on raw arrays, vectorized over agents.

    Working arrays always hold the last valid posterior for every filter;
    diverged agents simply stop being committed to, so batched linear
    algebra never sees non-finite inputs.  Mirrors the reference estimator
    operations arithmetically (equivalence is pinned by tests).
    """

    def __init__(self, scenario: Scenario, variant: str, trial: int):
        variant = variant.lower()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.sc = scenario
        self.variant = variant
        self.trial = trial
        self.rate = 0.0 if variant == "none" else scenario.comm_rate
        self.n = scenario.n_agents
        self.n_filters = 1 if variant == "centralized" else self.n
        self.streams = trial_streams(scenario.seed, trial)
        self.truth = _truth_arrays(scenario.trajectory.key(),
                                   float(scenario.dt), int(scenario.steps))

        self.cam_rot = np.stack([c.rot_gc for c in scenario.cameras])
        self.cam_pos = np.stack([c.pos for c in scenario.cameras])
        self.cam_rinv = np.stack([np.linalg.inv(c.pix_cov) for c in scenario.cameras])
        self.cam_rchol = np.stack([np.linalg.cholesky(c.pix_cov) for c in scenario.cameras])
        self.cam_range = np.array([c.range for c in scenario.cameras])
        self.cam_zmin = np.array([c.z_min for c in scenario.cameras])

        ns = scenario.noise
        o = np.zeros((ERR_DIM, ERR_DIM))
        o[0:3, 0:3] = np.eye(3) * ns.sigma_omega**2
        o[6:9, 6:9] = np.eye(3) * ns.sigma_accel**2
        self.o_const = o * scenario.dt

        self.fusion_fallbacks = 0

    # -- phases ------------------------------------------------------------

    def init_filters(self):
        """Each filter starts from its own perturbation of the truth.

        The centralized filter consumes the first draw, so it matches agent
        0 of the distributed variants on the same trial streams.
        """
        sc = self.sc
        rng = self.streams["init"]
        m = self.n_filters
        sig = np.array([sc.init_sigma_ori] * 3 + [sc.init_sigma_pos] * 3
                       + [sc.init_sigma_vel] * 3)
        q = np.empty((m, 4))
        p = np.empty((m, 3))
        v = np.empty((m, 3))
        for i in range(m):
            delta = rng.standard_normal(ERR_DIM) * sig
            q[i] = quat.multiply(self.truth.q[0], quat.small_angle_to_quat(delta[0:3]))
            p[i] = self.truth.p[0] + delta[3:6]
            v[i] = self.truth.v[0] + delta[6:9]
        P = np.broadcast_to(np.diag(sig**2), (m, ERR_DIM, ERR_DIM)).copy()
        return q, p, v, P

    def propagate_all(self, q, p, v, P, omega, accel):
        dt = self.sc.dt
        z_rot = quat.from_rotvec(omega * dt)
        q_new = _batch_normalize(q @ quat.left_matrix(z_rot).T)
        r = _batch_rot(q)
        aw = np.einsum("nji,j->ni", r, accel) - GRAVITY
        v_new = v + aw * dt
        p_new = p + v * dt + 0.5 * aw * dt * dt

        a_skew = _batch_skew(aw + GRAVITY)     # skew(R^T a_m)
        m = q.shape[0]
        phi = np.broadcast_to(np.eye(ERR_DIM), (m, ERR_DIM, ERR_DIM)).copy()
        phi[:, 3:6, 6:9] = np.eye(3) * dt
        phi[:, 6:9, 0:3] = -a_skew * dt
        phi[:, 3:6, 0:3] = -0.5 * a_skew * dt * dt
        P_new = _sym(phi @ P @ np.swapaxes(phi, 1, 2) + self.o_const)
        return q_new, p_new, v_new, P_new

    def fuse_all(self, adj, q, p, v, P, P_inv):
        """Intermediate estimates for all agents at once.

        adj[i, j] marks j as a usable neighbor of i (self-loops included,
        diverged columns already cleared).  Agents with a single neighbor
        (themselves) keep their prior bit for bit; agents whose fused
        information matrix fails the SPD check fall back to their prior.
        """
        n = self.n
        m_cnt = adj.sum(axis=1)
        multi = m_cnt > 1

        inv_tr = 1.0 / np.trace(P, axis1=1, axis2=2)
        w = adj * inv_tr[None, :]
        w_sum = w.sum(axis=1, keepdims=True)
        w = w / np.where(w_sum > 0.0, w_sum, 1.0)

        ok = multi.copy()
        if self.variant == "ici":
            p_beta = np.einsum("ij,jab->iab", w, P)
            beta_inv, ok_b = _batch_inv_spd(p_beta, multi)
            ok &= ok_b
            info = _sym(np.einsum("ij,jab->iab", adj.astype(float), P_inv)
                        - (m_cnt - 1.0)[:, None, None] * beta_inv)
        else:
            info = _sym(np.einsum("ij,jab->iab", w, P_inv))
        p_check, ok_i = _batch_inv_spd(info, ok)
        ok &= ok_i
        self.fusion_fallbacks += int(np.count_nonzero(multi & ~ok))

        # pairwise error states relative to each agent's own prior
        l_inv = _batch_left_matrix_conj(q)          # (n, 4, 4), rows L(q_i^-1)
        rel = np.einsum("iab,jb->ija", l_inv, q)
        delta = np.empty((n, n, ERR_DIM))
        delta[:, :, 0:3] = _rotvec_pairs(rel)
        delta[:, :, 3:6] = p[None, :, :] - p[:, None, :]
        delta[:, :, 6:9] = v[None, :, :] - v[:, None, :]

        if self.variant == "ici":
            s = np.einsum("ij,jab,ijb->ia", adj.astype(float), P_inv, delta)
            t = np.einsum("ij,ijb->ib", w, delta)
            s -= (m_cnt - 1.0)[:, None] * np.einsum("iab,ib->ia", beta_inv, t)
        else:
            s = np.einsum("ij,jab,ijb->ia", w, P_inv, delta)
        corr = np.einsum("iab,ib->ia", p_check, s)

        use = ok
        q_out = q.copy()
        p_out = p.copy()
        v_out = v.copy()
        P_out = P.copy()
        info_out = P_inv.copy()
        if np.any(use):
            q_out[use] = _batch_normalize(_batch_quat_mul(
                q[use], _batch_small_angle(corr[use, 0:3])))
            p_out[use] = p[use] + corr[use, 3:6]
            v_out[use] = v[use] + corr[use, 6:9]
            P_out[use] = p_check[use]
            info_out[use] = info[use]
        return q_out, p_out, v_out, P_out, info_out

    def contributions(self, adj, pos, zs_val, zs_has):
        """Summed position-block information per agent.

        adj[i, j]: camera j contributes to agent i; pos[i]: linearization
        point of agent i (its own intermediate estimate).  In two-round
        mode call with pos of the contributing agents and a diagonal-style
        adjacency instead.
        """
        rel = np.einsum("jab,ijb->ija", self.cam_rot,
                        pos[:, None, :] - self.cam_pos[None, :, :])
        cz = rel[..., 2]
        usable = adj & zs_has[None, :] & (cz > self.cam_zmin[None, :])
        czs = np.where(cz > 0.0, cz, 1.0)
        u = rel[..., 0] / czs
        t = rel[..., 1] / czs
        n_i, n_c = usable.shape
        h_p = np.zeros((n_i, n_c, 2, 3))
        inv_z = np.where(usable, 1.0 / czs, 0.0)
        h_p[..., 0, 0] = inv_z
        h_p[..., 1, 1] = inv_z
        h_p[..., 0, 2] = -u * inv_z
        h_p[..., 1, 2] = -t * inv_z
        h_col = np.einsum("ijxy,jyb->ijxb", h_p, self.cam_rot)
        resid = np.where(usable[..., None], zs_val[None, :, :] - np.stack([u, t], axis=-1), 0.0)
        blk = np.einsum("ijxa,jxy,ijyb->iab", h_col, self.cam_rinv, h_col)
        vec = np.einsum("ijxa,jxy,ijy->ia", h_col, self.cam_rinv, resid)
        return blk, vec

    def update_all(self, q, p, v, P, info, blk, vec):
        """Information-form update; agents with zero contribution are exact no-ops."""
        has = np.einsum("iab->i", np.abs(blk)) + np.abs(vec).sum(axis=1) > 0.0
        if not np.any(has):
            return q, p, v, P, np.zeros(q.shape[0], dtype=bool)
        info_post = info.copy()
        info_post[:, 3:6, 3:6] += blk
        p_post, ok = _batch_inv_spd(info_post, has)
        use = has & ok
        q_out = q.copy()
        p_out = p.copy()
        v_out = v.copy()
        P_out = P.copy()
        if np.any(use):
            delta = np.einsum("iab,ib->ia", p_post[:, :, 3:6], vec)
            q_out[use] = _batch_normalize(_batch_quat_mul(
                q[use], _batch_small_angle(delta[use, 0:3])))
            p_out[use] = p[use] + delta[use, 3:6]
            v_out[use] = v[use] + delta[use, 6:9]
            P_out[use] = p_post[use]
        return q_out, p_out, v_out, P_out, has & ~ok

    # -- main loop ----------------------------------------------------------

    def run(self, record_phases: bool = False) -> TrialRecord:
        sc = self.sc
        n, steps, m = self.n, sc.steps, self.n_filters
        q, p, v, P = self.init_filters()

        imu_rng = self.streams["imu"]
        s_om = sc.noise.sigma_omega / math.sqrt(sc.dt)
        s_ac = sc.noise.sigma_accel / math.sqrt(sc.dt)
        noise_om = imu_rng.standard_normal((steps, 3)) * s_om
        noise_ac = imu_rng.standard_normal((steps, 3)) * s_ac

        rec_q = np.empty((steps, n, 4))
        rec_p = np.empty((steps, n, 3))
        rec_v = np.empty((steps, n, 3))
        rec_P = np.empty((steps, n, ERR_DIM, ERR_DIM))
        visible = np.zeros((steps, n), dtype=bool)
        graph_bits = np.empty((steps, (n * n + 7) // 8), dtype=np.uint8)
        diverged = np.full(m, -1, dtype=np.int64)

        cap_q = cap_p = cap_v = cap_P = cap_tr = None
        if record_phases:
            cap_q = np.empty((steps, m, 4))
            cap_p = np.empty((steps, m, 3))
            cap_v = np.empty((steps, m, 3))
            cap_P = np.empty((steps, m, ERR_DIM, ERR_DIM))
            cap_tr = np.full((steps, m), np.nan)

        graph_rng = self.streams["graph"]
        pixel_rng = self.streams["pixel"]
        zs_val = np.zeros((n, 2))
        eye_n = np.eye(max(n, 1), dtype=bool)

        for k in range(steps):
            draws = graph_rng.random((n, n))
            if sc.symmetric_links:
                draws = np.triu(draws, 1)
                draws = draws + draws.T
            adj = draws < self.rate
            np.fill_diagonal(adj, True)
            graph_bits[k] = np.frombuffer(
                np.packbits(adj.reshape(-1)).tobytes(), dtype=np.uint8)

            # measurements from the true state at step k+1
            p_true = self.truth.p[k + 1]
            rel_t = np.einsum("jab,jb->ja", self.cam_rot, p_true[None, :] - self.cam_pos)
            dist = np.linalg.norm(p_true[None, :] - self.cam_pos, axis=1)
            zs_has = (rel_t[:, 2] > self.cam_zmin) & (dist <= self.cam_range)
            visible[k] = zs_has
            zs_val.fill(0.0)
            for j in np.flatnonzero(zs_has):
                noise = self.cam_rchol[j] @ pixel_rng.standard_normal(2)
                zs_val[j] = rel_t[j, :2] / rel_t[j, 2] + noise

            alive = diverged < 0
            if np.any(alive):
                q_pr, p_pr, v_pr, P_pr = self.propagate_all(
                    q, p, v, P, self.truth.omega[k] + noise_om[k],
                    self.truth.accel[k] + noise_ac[k])
                prop_ok = _finite_rows(q_pr, p_pr, v_pr, P_pr)
                newly_bad = alive & ~prop_ok
                diverged[newly_bad] = k
                alive = alive & prop_ok
                # keep last valid values in the working arrays
                q_pr = np.where(alive[:, None], q_pr, q)
                p_pr = np.where(alive[:, None], p_pr, p)
                v_pr = np.where(alive[:, None], v_pr, v)
                P_pr = np.where(alive[:, None, None], P_pr, P)
                if record_phases:
                    cap_q[k], cap_p[k], cap_v[k], cap_P[k] = q_pr, p_pr, v_pr, P_pr

                if self.variant == "centralized":
                    if alive[0]:
                        info0, ok0 = _batch_inv_spd(P_pr, alive)
                        if record_phases:
                            cap_tr[k, 0] = np.trace(P_pr[0])
                        if not ok0[0]:
                            diverged[0] = k
                        else:
                            blk, vec = self.contributions(
                                np.ones((1, n), dtype=bool), p_pr[:1],
                                zs_val, zs_has)
                            q_up, p_up, v_up, P_up, failed = self.update_all(
                                q_pr, p_pr, v_pr, P_pr, info0, blk, vec)
                            fin = _finite_rows(q_up, p_up, v_up, P_up)
                            good = alive & fin & ~failed
                            diverged[alive & ~good] = k
                            q = np.where(good[:, None], q_up, q_pr)
                            p = np.where(good[:, None], p_up, p_pr)
                            v = np.where(good[:, None], v_up, v_pr)
                            P = np.where(good[:, None, None], P_up, P_pr)
                            if not good[0]:
                                q, p, v, P = q_pr, p_pr, v_pr, P_pr
                else:
                    P_inv, inv_ok = _batch_inv_spd(P_pr, alive)
                    newly_bad = alive & ~inv_ok
                    diverged[newly_bad] = k
                    alive = alive & inv_ok

                    # neighbors usable by i: j alive and edge present; always self
                    use_adj = ((adj & alive[None, :]) | eye_n) & alive[:, None]

                    q_it, p_it, v_it, P_it, info_it = self.fuse_all(
                        use_adj, q_pr, p_pr, v_pr, P_pr, P_inv)
                    if record_phases:
                        cap_tr[k][alive] = np.trace(P_it[alive], axis1=1, axis2=2)

                    if sc.two_round:
                        blk_d, vec_d = self.contributions(
                            eye_n.copy(), p_it, zs_val, zs_has)
                        blk = np.einsum("ij,jab->iab", use_adj.astype(float), blk_d)
                        vec = np.einsum("ij,ja->ia", use_adj.astype(float), vec_d)
                    else:
                        blk, vec = self.contributions(use_adj, p_it, zs_val, zs_has)

                    q_up, p_up, v_up, P_up, failed = self.update_all(
                        q_it, p_it, v_it, P_it, info_it, blk, vec)
                    fin = _finite_rows(q_up, p_up, v_up, P_up)
                    good = alive & fin & ~failed
                    diverged[alive & ~good] = k
                    q = np.where(good[:, None], q_up, np.where(alive[:, None], q_pr, q))
                    p = np.where(good[:, None], p_up, np.where(alive[:, None], p_pr, p))
                    v = np.where(good[:, None], v_up, np.where(alive[:, None], v_pr, v))
                    P = np.where(good[:, None, None], P_up,
                                 np.where(alive[:, None, None], P_pr, P))

            if self.variant == "centralized":
                rec_q[k] = q[0]
                rec_p[k] = p[0]
                rec_v[k] = v[0]
                rec_P[k] = P[0]
            else:
                rec_q[k], rec_p[k], rec_v[k], rec_P[k] = q, p, v, P

        div_out = diverged if m == n else np.full(n, diverged[0], dtype=np.int64)
        return TrialRecord(
            variant=self.variant, comm_rate=self.rate, seed=sc.seed,
            trial=self.trial,
            q_est=rec_q, p_est=rec_p, v_est=rec_v, P=rec_P,
            truth_q=self.truth.q[1:steps + 1].copy(),
            truth_p=self.truth.p[1:steps + 1].copy(),
            truth_v=self.truth.v[1:steps + 1].copy(),
            visible=visible, graph_bits=graph_bits, diverged_at=div_out,
            fusion_fallbacks=self.fusion_fallbacks,
            prior_q=cap_q, prior_p=cap_p, prior_v=cap_v, prior_P=cap_P,
            trace_intermediate=cap_tr)


def _batch_quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise JPL product of two (n, 4) stacks (raw, no normalization)."""
    a1, a2, a3, a4 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    b1, b2, b3, b4 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        a4 * b1 + b4 * a1 - (a2 * b3 - a3 * b2),
        a4 * b2 + b4 * a2 - (a3 * b1 - a1 * b3),
        a4 * b3 + b4 * a3 - (a1 * b2 - a2 * b1),
        a4 * b4 - (a1 * b1 + a2 * b2 + a3 * b3),
    ], axis=1)


def _batch_small_angle(dth: np.ndarray) -> np.ndarray:
    g = 1.0 / np.sqrt(1.0 + 0.25 * np.einsum("ni,ni->n", dth, dth))
    return np.concatenate([0.5 * g[:, None] * dth, g[:, None]], axis=1)


def _batch_left_matrix_conj(q: np.ndarray) -> np.ndarray:
    """Stack of left-multiplication matrices L(q_i^-1)."""
    n = q.shape[0]
    qv = -q[:, :3]
    q4 = q[:, 3]
    out = np.zeros((n, 4, 4))
    out[:, 0, 0] = q4
    out[:, 1, 1] = q4
    out[:, 2, 2] = q4
    out[:, 0, 1] = qv[:, 2]
    out[:, 0, 2] = -qv[:, 1]
    out[:, 1, 0] = -qv[:, 2]
    out[:, 1, 2] = qv[:, 0]
    out[:, 2, 0] = qv[:, 1]
    out[:, 2, 1] = -qv[:, 0]
    out[:, 3, :3] = -qv
    out[:, :3, 3] = qv
    out[:, 3, 3] = q4
    return out


def _rotvec_pairs(rel: np.ndarray) -> np.ndarray:
    """Axis-angle vectors of an (n, n, 4) stack of unit quaternions."""
    flip = rel[..., 3] < 0.0
    rel = np.where(flip[..., None], -rel, rel)
    s = np.linalg.norm(rel[..., :3], axis=-1)
    ang = 2.0 * np.arctan2(s, rel[..., 3])
    factor = np.divide(ang, s, out=np.zeros_like(s), where=s > 0.0)
    return rel[..., :3] * factor[..., None]


def _batch_inv_spd(mats: np.ndarray, want: np.ndarray):
    """Batched SPD inverse over the rows marked in ``want``.

    Returns (inverses, ok): rows not wanted or failing the Cholesky check
    are identity and flagged not-ok.
    """
    d = mats.shape[-1]
    out = np.broadcast_to(np.eye(d), mats.shape).copy()
    ok = np.zeros(mats.shape[0], dtype=bool)
    idx = np.flatnonzero(want)
    if idx.size == 0:
        return out, ok
    sel = mats[idx]
    try:
        np.linalg.cholesky(sel)
        out[idx] = _sym(np.linalg.inv(sel))
        ok[idx] = True
    except np.linalg.LinAlgError:
        for i in idx:
            try:
                np.linalg.cholesky(mats[i])
                out[i] = _sym(np.linalg.inv(mats[i]))
                ok[i] = True
            except np.linalg.LinAlgError:
                pass
    return out, ok


def _finite_rows(q, p, v, P) -> np.ndarray:
    """Per-row finiteness of all state pieces (sums catch inf and NaN)."""
    tot = (q.sum(axis=1) + p.sum(axis=1) + v.sum(axis=1)
           + P.reshape(P.shape[0], -1).sum(axis=1))
    return np.isfinite(tot)


def run_trial(scenario: Scenario, variant: str = "ici", trial: int = 0,
              record_phases: bool = False) -> TrialRecord:
    """Simulate one trial; deterministic in (scenario.seed, trial, variant)."""
    return _Engine(scenario, variant, trial).run(record_phases=record_phases)


def run_monte_carlo(scenario: Scenario, variant: str = "ici", trials: int = 1,
                    workers: int = 1) -> list:
    """Independent trials with child streams keyed by (seed, trial index).

    Results are returned in trial order regardless of scheduling, so any
    aggregation over them is independent of execution order.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if workers <= 1 or trials == 1:
        return [run_trial(scenario, variant, t) for t in range(trials)]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = {pool.submit(run_trial, scenario, variant, t): t
                for t in range(trials)}
        out: dict[int, TrialRecord] = {}
        for f, t in futs.items():
            out[t] = f.result()
    return [out[t] for t in range(trials)]
