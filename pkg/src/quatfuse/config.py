"""Scenario configuration: a single JSON document with embedded defaults.

The config carries camera extrinsics (orientation quaternion + position),
the trajectory preset, timing, noise levels, communication rate, trial count
and seed, so every run is self-describing.  ``default_config()`` returns the
full document with all defaults expanded.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from . import quat
from .models import CameraModel, NoiseSpec
from .simnet import Scenario, TrajectorySpec


def ring_cameras(n: int = 8, radius: float = 6.5, height: float = 2.0,
                 look_at=(0.0, 0.0, 1.5), sensing_range: float = 5.0,
                 pixel_sigma: float = 2e-3) -> list:
    """Cameras evenly spaced on a ring, each looking at a common point."""
    look_at = np.asarray(look_at, dtype=float)
    cams = []
    for k in range(n):
        ang = 2.0 * math.pi * k / n
        pos = np.array([radius * math.cos(ang), radius * math.sin(ang), height])
        fwd = look_at - pos
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross([0.0, 0.0, 1.0], fwd)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot_gc = np.stack([right, down, fwd])   # rows: camera axes in G
        cams.append(CameraModel(rot_gc=rot_gc, pos=pos,
                                pix_cov=np.eye(2) * pixel_sigma**2,
                                range=sensing_range))
    return cams


def camera_to_json(cam: CameraModel) -> dict:
    return {
        "quat": quat.from_rot_matrix(cam.rot_gc).tolist(),
        "pos": cam.pos.tolist(),
        "pixel_sigma": float(math.sqrt(cam.pix_cov[0, 0])),
        "range": float(cam.range),
        "z_min": float(cam.z_min),
    }


def camera_from_json(doc: dict) -> CameraModel:
    sigma = float(doc.get("pixel_sigma", 2e-3))
    return CameraModel(
        rot_gc=quat.rot_matrix(np.asarray(doc["quat"], dtype=float)),
        pos=np.asarray(doc["pos"], dtype=float),
        pix_cov=np.eye(2) * sigma**2,
        range=float(doc.get("range", 5.0)),
        z_min=float(doc.get("z_min", 0.1)),
    )


def default_config() -> dict:
    """Full default scenario: 8 ring cameras, 5 m range, preset-a path."""
    traj = TrajectorySpec()
    return {
        "seed": 20240811,
        "dt": 0.01,
        "steps": 1000,
        "trials": 50,
        "comm_rate": 0.3,
        "symmetric_links": False,
        "two_round": False,
        "noise": {"sigma_omega": 0.03, "sigma_accel": 0.02},
        "init_sigma": {"ori": 0.1, "pos": 0.5, "vel": 0.1},
        "trajectory": {
            "preset": traj.preset,
            "center": list(traj.center),
            "radius": traj.radius,
            "omega": traj.omega,
            "phase": traj.phase,
            "z_amp": traj.z_amp,
            "z_omega": traj.z_omega,
            "yaw_rate": traj.yaw_rate,
            "pitch_amp": traj.pitch_amp,
            "pitch_omega": traj.pitch_omega,
            "roll_amp": traj.roll_amp,
            "roll_omega": traj.roll_omega,
        },
        "cameras": [camera_to_json(c) for c in ring_cameras()],
    }


def trajectory_from_json(doc: dict) -> TrajectorySpec:
    fields = {k: doc[k] for k in (
        "preset", "center", "radius", "omega", "phase", "z_amp", "z_omega",
        "yaw_rate", "pitch_amp", "pitch_omega", "roll_amp", "roll_omega")
        if k in doc}
    if "center" in fields:
        fields["center"] = tuple(fields["center"])
    return TrajectorySpec(**fields)


def scenario_from_config(cfg: dict, comm_rate: float | None = None,
                         seed: int | None = None) -> Scenario:
    """Build a Scenario from a config document, with optional overrides."""
    noise = cfg.get("noise", {})
    init = cfg.get("init_sigma", {})
    return Scenario(
        cameras=[camera_from_json(c) for c in cfg["cameras"]],
        trajectory=trajectory_from_json(cfg.get("trajectory", {})),
        comm_rate=float(cfg["comm_rate"] if comm_rate is None else comm_rate),
        dt=float(cfg.get("dt", 0.01)),
        steps=int(cfg.get("steps", 1000)),
        noise=NoiseSpec(sigma_omega=float(noise.get("sigma_omega", 0.03)),
                        sigma_accel=float(noise.get("sigma_accel", 0.02))),
        seed=int(cfg["seed"] if seed is None else seed),
        init_sigma_ori=float(init.get("ori", 0.1)),
        init_sigma_pos=float(init.get("pos", 0.5)),
        init_sigma_vel=float(init.get("vel", 0.1)),
        symmetric_links=bool(cfg.get("symmetric_links", False)),
        two_round=bool(cfg.get("two_round", False)),
    )


def validate_config(cfg: dict) -> None:
    """Raise ValueError on a structurally invalid config document."""
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    for key in ("seed", "cameras"):
        if key not in cfg:
            raise ValueError(f"config is missing required key {key!r}")
    scenario_from_config(cfg)  # full constructor-level validation


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    validate_config(cfg)
    return cfg


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
