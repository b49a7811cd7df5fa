"""Run configuration: sensor roster, noise, gating, and initial state.

The on-disk format is a single JSON file whose key tree mirrors RunConfig;
see README for the documented schema.  Angles in the file are degrees for
readability and radians everywhere in code.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .ekf import ProcessNoiseConfig
from .errors import DatasetError
from .features import RadarExtrinsics
from .geometry import exp_so3, quat_mul, quat_to_rotmat
from .manager import GatingConfig
from .motion import GRAVITY_DEFAULT, NavState
from .radar import MeasurementNoise


@dataclass
class SensorConfig:
    id: str
    extrinsics: RadarExtrinsics
    noise: MeasurementNoise = field(default_factory=MeasurementNoise)
    fov_az: float = math.radians(60.0)  # half-angle
    fov_el: float = math.radians(15.0)  # half-angle
    range_min: float = 0.5
    range_max: float = 100.0
    rate: float = 15.0  # Hz
    phase: float = 0.0  # s, scan epoch offset


@dataclass
class RunConfig:
    sensors: Dict[str, SensorConfig]
    process_noise: ProcessNoiseConfig = field(default_factory=ProcessNoiseConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)
    max_features: int = 50
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_DEFAULT.copy())
    initial_nav: NavState = field(default_factory=NavState.at_rest)
    initial_cov_diag: np.ndarray = field(default_factory=lambda: np.full(9, 1e-6))
    seed: int = 0

    def __post_init__(self):
        if not self.sensors:
            raise DatasetError("configuration needs at least one radar sensor")
        if self.max_features < self.gating.min_features:
            raise DatasetError("max_features must be >= gating.min_features")


def extrinsics_from_rpy(rpy_deg, lever_arm):
    """Body->radar rotation from roll/pitch/yaw (degrees, applied z-y-x)."""
    roll, pitch, yaw = (math.radians(a) for a in rpy_deg)
    q = quat_mul(
        exp_so3(np.array([0.0, 0.0, yaw])),
        quat_mul(exp_so3(np.array([0.0, pitch, 0.0])), exp_so3(np.array([roll, 0.0, 0.0]))),
    )
    # q rotates radar-frame vectors into the body frame; body->radar is its inverse
    return RadarExtrinsics(quat_to_rotmat(q).T, np.asarray(lever_arm, dtype=float))


def sensor_from_dict(d):
    noise = d.get("noise", {})
    return SensorConfig(
        id=str(d["id"]),
        extrinsics=extrinsics_from_rpy(
            d.get("rpy_deg", [0.0, 0.0, 0.0]), d.get("lever_arm", [0.0, 0.0, 0.0])
        ),
        noise=MeasurementNoise(
            sigma_az=math.radians(noise.get("sigma_az_deg", 0.5)),
            sigma_el=math.radians(noise.get("sigma_el_deg", 0.5)),
            sigma_range=noise.get("sigma_range", 0.1),
            sigma_doppler=noise.get("sigma_doppler", 0.05),
        ),
        fov_az=math.radians(d.get("fov_az_deg", 60.0)),
        fov_el=math.radians(d.get("fov_el_deg", 15.0)),
        range_min=d.get("range_min", 0.5),
        range_max=d.get("range_max", 100.0),
        rate=d.get("rate", 15.0),
        phase=d.get("phase", 0.0),
    )


def config_from_dict(d):
    pn = d.get("process_noise", {})
    gt = d.get("gating", {})
    init = d.get("initial", {})
    nav = NavState(
        v=np.asarray(init.get("velocity", [0.0, 0.0, 0.0]), dtype=float),
        q=exp_so3(np.array([0.0, 0.0, math.radians(init.get("yaw_deg", 0.0))])),
        p=np.asarray(init.get("position", [0.0, 0.0, 0.0]), dtype=float),
    )
    return RunConfig(
        sensors={s["id"]: sensor_from_dict(s) for s in d["sensors"]},
        process_noise=ProcessNoiseConfig(
            sigma_a=pn.get("sigma_a", 0.02),
            sigma_w=pn.get("sigma_w", 0.001),
            sigma_feature_bearing=pn.get("sigma_feature_bearing", 1e-3),
            sigma_feature_depth=pn.get("sigma_feature_depth", 1e-2),
        ),
        gating=GatingConfig(
            chi2_gate=gt.get("chi2_gate", GatingConfig.chi2_gate),
            doppler_stationarity_sigma=gt.get("doppler_stationarity_sigma", 3.0),
            prune_interval=gt.get("prune_interval", 0.5),
            min_features=gt.get("min_features", 8),
            staleness_window=gt.get("staleness_window", 2.0),
        ),
        max_features=d.get("max_features", 50),
        gravity=np.asarray(d.get("gravity", GRAVITY_DEFAULT), dtype=float),
        initial_nav=nav,
        initial_cov_diag=np.asarray(
            init.get("cov_diag", [1e-6] * 9), dtype=float
        ),
        seed=d.get("seed", 0),
    )


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read config {path}: {exc}", path=str(path)) from exc
    try:
        return config_from_dict(data)
    except KeyError as exc:
        raise DatasetError(f"config {path} is missing key {exc}", path=str(path)) from exc


def sensor_to_dict(s):
    return {
        "id": s.id,
        "rpy_deg": _rpy_from_extrinsics(s.extrinsics),
        "lever_arm": list(map(float, s.extrinsics.lever_arm_b)),
        "noise": {
            "sigma_az_deg": math.degrees(s.noise.sigma_az),
            "sigma_el_deg": math.degrees(s.noise.sigma_el),
            "sigma_range": s.noise.sigma_range,
            "sigma_doppler": s.noise.sigma_doppler,
        },
        "fov_az_deg": math.degrees(s.fov_az),
        "fov_el_deg": math.degrees(s.fov_el),
        "range_min": s.range_min,
        "range_max": s.range_max,
        "rate": s.rate,
        "phase": s.phase,
    }


def _rpy_from_extrinsics(ext):
    r = ext.r_rb.T  # radar -> body
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return [math.degrees(roll), math.degrees(pitch), math.degrees(yaw)]


def config_to_dict(cfg):
    yaw = 2.0 * math.atan2(cfg.initial_nav.q[3], cfg.initial_nav.q[0])
    return {
        "sensors": [sensor_to_dict(s) for s in cfg.sensors.values()],
        "process_noise": {
            "sigma_a": cfg.process_noise.sigma_a,
            "sigma_w": cfg.process_noise.sigma_w,
            "sigma_feature_bearing": cfg.process_noise.sigma_feature_bearing,
            "sigma_feature_depth": cfg.process_noise.sigma_feature_depth,
        },
        "gating": {
            "chi2_gate": cfg.gating.chi2_gate,
            "doppler_stationarity_sigma": cfg.gating.doppler_stationarity_sigma,
            "prune_interval": cfg.gating.prune_interval,
            "min_features": cfg.gating.min_features,
            "staleness_window": cfg.gating.staleness_window,
        },
        "max_features": cfg.max_features,
        "gravity": list(map(float, cfg.gravity)),
        "initial": {
            "position": list(map(float, cfg.initial_nav.p)),
            "velocity": list(map(float, cfg.initial_nav.v)),
            "yaw_deg": math.degrees(yaw),
            "cov_diag": list(map(float, cfg.initial_cov_diag)),
        },
        "seed": cfg.seed,
    }


def save_run_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
