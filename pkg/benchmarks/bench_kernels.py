#!/usr/bin/env python3
"""Timing comparison of the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--features N] [--reps N]

Covers the per-step hot path (feature RK4, Jacobian blocks, covariance
prediction, measurement update core, bearing retraction, nav RK4) plus a
whole-replay comparison on a short synthetic parking run.
"""

import argparse
import os
import sys
import time

import numpy as np

from radarslam._kernels import _fallback

try:
    from radarslam._kernels import _core
except ImportError:
    _core = None


def bearing_quats(rng, m):
    from radarslam.geometry import bearing_quat, exp_so3, quat_mul

    out = []
    for _ in range(m):
        b = rng.normal(size=3)
        b /= np.linalg.norm(b)
        out.append(quat_mul(exp_so3(b * rng.uniform(-2, 2)), bearing_quat(b)))
    return np.stack(out)


def run_benchmarks(m, reps):
    rng = np.random.default_rng(0)
    qf = bearing_quats(rng, m)
    rho = rng.uniform(1, 20, m)
    vrs = rng.normal(size=(4, 3)) * 2
    vr, wr = vrs[0].copy(), rng.normal(size=3) * 0.4
    n = 9 + 3 * m
    a = rng.normal(size=(n, n))
    p = a @ a.T / n + 0.5 * np.eye(n)
    phi_bb = np.eye(9) + 0.01 * rng.normal(size=(9, 9))
    phi_fb = 0.01 * rng.normal(size=(3 * m, 9))
    phi_ff = np.eye(3)[None] + 0.01 * rng.normal(size=(m, 3, 3))
    g = rng.normal(size=(n, 6))
    qc = rng.uniform(0.1, 1, 6)
    floor = rng.uniform(0, 1e-4, n)
    h_sub = rng.normal(size=(4, 6))
    cols = np.array([0, 1, 2, 9, 10, 11], dtype=np.int64)
    resid = rng.normal(size=4) * 0.1
    r_cov = np.diag(rng.uniform(0.01, 0.1, 4))
    delta = rng.normal(size=(m, 2)) * 0.1
    v3, q4, p3 = rng.normal(size=3), np.array([1.0, 0, 0, 0]), np.zeros(3)
    acc, w3, grav = rng.normal(size=3), rng.normal(size=3) * 0.3, np.array([0, 0, -9.81])

    cases = [
        ("propagate_features_rk4", lambda k: k.propagate_features_rk4(qf, rho, vrs, wr, 0.01)),
        ("feature_state_blocks", lambda k: k.feature_state_blocks(qf, rho, vr, wr)),
        ("predict_blocks", lambda k: k.predict_blocks(qf, rho, vr, wr, np.eye(3), np.zeros(3), phi_bb, 0.01)),
        ("cov_predict", lambda k: k.cov_predict(p, phi_bb, phi_fb, phi_ff, g, qc, floor, 0.01)),
        ("ekf_update_core", lambda k: k.ekf_update_core(p, h_sub, cols, resid, r_cov, 1e12)),
        ("retract_bearings", lambda k: k.retract_bearings(qf, delta)),
        ("nav_rk4", lambda k: k.nav_rk4(v3, q4, p3, acc, w3, grav, 0.01)),
    ]

    print(f"kernel benchmark: {m} features, state dim {n}, {reps} reps")
    print(f"{'kernel':<24}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases:
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(_fallback)
        t_py = (time.perf_counter() - t0) / reps * 1e6
        if _core is None:
            print(f"{name:<24}{t_py:>12.1f}{'n/a':>12}{'':>10}")
            continue
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(_core)
        t_cy = (time.perf_counter() - t0) / reps * 1e6
        print(f"{name:<24}{t_py:>12.1f}{t_cy:>12.1f}{t_py / t_cy:>9.1f}x")


def bench_replay():
    from radarslam.config import SensorConfig, extrinsics_from_rpy
    from radarslam.replay import events_from_sim, run_replay
    from radarslam.sim import ScenarioSpec, generate_dataset, run_config_for

    sensors = [
        SensorConfig(id="fl", extrinsics=extrinsics_from_rpy([0, 0, 30], [1.0, 0.5, 0]), rate=10.0),
        SensorConfig(id="fr", extrinsics=extrinsics_from_rpy([0, 0, -30], [1.0, -0.5, 0]), rate=10.0, phase=0.05),
    ]
    spec = ScenarioSpec(
        kind="parking", duration=10.0, speed=2.0, landmark_count=150,
        sensors=sensors, seed=0, imu_noise=True, radar_noise=True,
    )
    gt, imu, scans = generate_dataset(spec)
    cfg = run_config_for(spec, gt)
    stream = events_from_sim(imu, scans)
    t0 = time.perf_counter()
    run_replay(stream, cfg)
    elapsed = time.perf_counter() - t0
    backend = "cython" if (_core is not None and not os.environ.get("RADARSLAM_PURE_PYTHON")) else "python"
    print(f"\n10 s parking replay ({backend} backend): {elapsed:.2f} s wall")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--features", type=int, default=50)
    parser.add_argument("--reps", type=int, default=2000)
    args = parser.parse_args()
    if _core is None:
        print("compiled kernels not available; showing numpy fallback only", file=sys.stderr)
    run_benchmarks(args.features, args.reps)
    bench_replay()


if __name__ == "__main__":
    main()
