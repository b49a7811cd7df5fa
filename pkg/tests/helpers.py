"""Shared test builders: random states, sensor rigs, manifold helpers."""

import numpy as np

from radarslam.config import SensorConfig, extrinsics_from_rpy
from radarslam.ekf import FilterState, NAV_DIM
from radarslam.features import Feature, RadarExtrinsics
from radarslam.geometry import (
    bearing_quat,
    exp_so3,
    quat_mul,
    quat_normalize,
    quat_to_rotmat,
    rot_boxminus,
    rot_boxplus,
)
from radarslam.motion import ImuSample, NavState


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


def random_bearing_quat(rng):
    """Random bearing with a random gauge twist about the bearing axis."""
    b = random_unit(rng)
    return quat_mul(exp_so3(b * rng.uniform(-2.0, 2.0)), bearing_quat(b))


def random_extrinsics(rng, lever_scale=1.0):
    return RadarExtrinsics(quat_to_rotmat(random_quat(rng)), rng.normal(size=3) * lever_scale)


def random_nav(rng, speed=3.0):
    return NavState(rng.normal(size=3) * speed, random_quat(rng), rng.normal(size=3) * 10.0)


def random_imu(rng, accel=2.0, rate=0.5):
    return ImuSample(0.0, rng.normal(size=3) * accel, rng.normal(size=3) * rate)


def random_filter_state(rng, m, anchors=("fl", "fr"), scale=0.05):
    nav = random_nav(rng)
    feats = [
        Feature(i, anchors[i % len(anchors)], random_bearing_quat(rng), rng.uniform(2.0, 25.0))
        for i in range(m)
    ]
    n = NAV_DIM + 3 * m
    a = rng.normal(size=(n, n))
    p = (a @ a.T / n) * scale + scale * 0.1 * np.eye(n)
    return FilterState(0.0, nav, feats, p, capacity=max(50, m))


def corner_sensors(rate=10.0, mount_deg=45.0, fov_az_deg=60.0):
    return [
        SensorConfig(
            id="fl",
            extrinsics=extrinsics_from_rpy([0.0, 0.0, mount_deg], [1.0, 0.5, 0.0]),
            rate=rate,
            fov_az=np.radians(fov_az_deg),
        ),
        SensorConfig(
            id="fr",
            extrinsics=extrinsics_from_rpy([0.0, 0.0, -mount_deg], [1.0, -0.5, 0.0]),
            rate=rate,
            fov_az=np.radians(fov_az_deg),
            phase=0.05,
        ),
    ]


def nav_boxplus(nav, d):
    return NavState(nav.v + d[0:3], rot_boxplus(nav.q, d[3:6]), nav.p + d[6:9])


def nav_boxminus(a, b):
    return np.concatenate([a.v - b.v, rot_boxminus(a.q, b.q), a.p - b.p])


def rel_error(approx, exact):
    denom = max(np.linalg.norm(exact), 1e-12)
    return np.linalg.norm(np.asarray(approx) - np.asarray(exact)) / denom
