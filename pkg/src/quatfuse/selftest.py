"""Fast property suite behind the ``quatfuse selftest`` subcommand.

A compact subset of the full pytest suite, runnable without pytest: core
algebraic identities, fusion equivalences, graph laws and engine
determinism.  Prints one PASS/FAIL line per check.
"""

from __future__ import annotations

import numpy as np

from . import fusion, quat
from .config import default_config, scenario_from_config
from .simnet import run_trial, sample_graph


def _rand_quat(rng):
    return quat.normalize(rng.standard_normal(4))


def _rand_spd(rng, d, lo=0.2, hi=5.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q @ np.diag(rng.uniform(lo, hi, d)) @ q.T


def _check_quat_identity(rng) -> float:
    worst = 0.0
    for _ in range(200):
        q1, q2 = _rand_quat(rng), _rand_quat(rng)
        lhs = quat.multiply(quat.inverse(q1), q2)
        rhs = quat.left_matrix(q1).T @ q2
        if rhs[3] < 0.0:
            rhs = -rhs
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def _check_homomorphism(rng) -> float:
    worst = 0.0
    for _ in range(200):
        a, b = _rand_quat(rng), _rand_quat(rng)
        err = quat.rot_matrix(quat.multiply(a, b)) - quat.rot_matrix(a) @ quat.rot_matrix(b)
        worst = max(worst, float(np.abs(err).max()))
    return worst


def _check_fusion_pair_equivalence(rng) -> float:
    worst = 0.0
    for _ in range(100):
        d = 3
        e1 = fusion.VectorEstimate(rng.standard_normal(d), _rand_spd(rng, d))
        e2 = fusion.VectorEstimate(rng.standard_normal(d), _rand_spd(rng, d))
        a = rng.uniform(0.05, 0.95)
        w = [a, 1.0 - a]
        for two, multi in ((fusion.ici_fuse_two, fusion.ici_fuse_multi),
                           (fusion.ci_fuse_two, fusion.ci_fuse_multi)):
            r2 = two(e1, e2, a)
            rm = multi([e1, e2], w)
            worst = max(worst, float(np.abs(r2.x - rm.x).max()),
                        float(np.abs(r2.P - rm.P).max()))
    return worst


def _check_fusion_idempotence(rng) -> float:
    d = 4
    e = fusion.VectorEstimate(rng.standard_normal(d), _rand_spd(rng, d))
    out = fusion.ici_fuse_multi([e, e, e], [1 / 3] * 3)
    return max(float(np.abs(out.x - e.x).max()), float(np.abs(out.P - e.P).max()))


def _check_graph_laws(rng) -> float:
    for _ in range(500):
        g = sample_graph(6, rng.random(), rng)
        if not np.all(np.diag(g.adj)):
            return 1.0
    g0 = sample_graph(5, 0.0, rng)
    g1 = sample_graph(5, 1.0, rng)
    if g0.adj.sum() != 5 or not g1.adj.all():
        return 1.0
    return 0.0


def _tiny_scenario():
    cfg = default_config()
    cfg["cameras"] = cfg["cameras"][:3]
    cfg["steps"] = 50
    return scenario_from_config(cfg)


def _check_determinism() -> float:
    sc = _tiny_scenario()
    a = run_trial(sc, "ici", trial=0).digest()
    b = run_trial(sc, "ici", trial=0).digest()
    return 0.0 if a == b else 1.0


def _check_single_agent_variants() -> float:
    cfg = default_config()
    cfg["cameras"] = cfg["cameras"][:1]
    cfg["steps"] = 50
    cfg["comm_rate"] = 1.0
    sc = scenario_from_config(cfg)
    recs = [run_trial(sc, v, trial=0) for v in ("ici", "ci", "centralized")]
    worst = 0.0
    for rec in recs[1:]:
        worst = max(worst, float(np.abs(rec.p_est - recs[0].p_est).max()),
                    float(np.abs(rec.q_est - recs[0].q_est).max()))
    return worst


def run_selftest() -> int:
    rng = np.random.default_rng(7)
    checks = [
        ("quaternion inverse-product identity", _check_quat_identity(rng), 1e-12),
        ("rotation homomorphism", _check_homomorphism(rng), 1e-8),
        ("two-vs-multi fusion equivalence", _check_fusion_pair_equivalence(rng), 1e-10),
        ("ici idempotence on identical inputs", _check_fusion_idempotence(rng), 1e-10),
        ("graph self-loop and rate laws", _check_graph_laws(rng), 0.5),
        ("trial determinism", _check_determinism(), 0.5),
        ("single-agent variant agreement", _check_single_agent_variants(), 1e-8),
    ]
    failed = 0
    for name, err, tol in checks:
        ok = err <= tol
        failed += not ok
        print(f"selftest: {name:<40} {'PASS' if ok else 'FAIL'} (err={err:.3g})")
    return 1 if failed else 0
