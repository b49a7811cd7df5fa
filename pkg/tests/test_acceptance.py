"""Acceptance suite: one test per criterion, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s`.  The Monte-Carlo
benchmarks (criteria 3-7) share fixtures; 50-run batches execute in two
worker processes.
"""

import time

import numpy as np
import pytest
from scipy.stats import chi2

import mc_runs
from helpers import corner_sensors
from mc_runs import run_batch
from radarslam.evaluation import nearest_rank_percentile
from radarslam.manager import GatingConfig
from radarslam.replay import ReplayOptions, events_from_sim, run_replay
from radarslam.sim import ScenarioSpec, generate_dataset, run_config_for


def _announce(num, text):
    print(f"\nPASS criterion {num}: {text}")


@pytest.fixture(scope="module")
def mc_full():
    t0 = time.time()
    results = run_batch("full", mc_runs.N_RUNS)
    return results, time.time() - t0


@pytest.fixture(scope="module")
def mc_ablation():
    out = {}
    for variant in ("no_cross", "no_doppler", "maxfeat12"):
        out[variant] = run_batch(variant, mc_runs.N_ABLATION_RUNS)
    return out


@pytest.fixture(scope="module")
def mc_movers():
    return run_batch("movers", mc_runs.N_RUNS)


def test_criterion_1_jacobian_suite():
    from test_features import _fd_own_jacobian
    from test_motion import fd_nav_jacobian
    from test_radar import _fd_h
    from helpers import (
        random_bearing_quat,
        random_extrinsics,
        random_imu,
        random_nav,
        rel_error,
    )
    from radarslam import _kernels
    from radarslam.errors import DegenerateGeometryError
    from radarslam.features import Feature, feature_jacobians
    from radarslam.geometry import bearing_boxplus
    from radarslam.motion import nav_jacobian
    from radarslam.radar import (
        measurement_jacobians,
        measurement_jacobians_cross,
        predict_measurement,
        predict_measurement_cross,
        transform_feature_to_sensor,
    )

    t0 = time.time()
    rng = np.random.default_rng(42)
    worst = {"nav": 0.0, "feature": 0.0, "meas": 0.0, "cross": 0.0, "transform": 0.0}

    for _ in range(100):
        nav, imu = random_nav(rng), random_imu(rng)
        worst["nav"] = max(worst["nav"], rel_error(nav_jacobian(nav, imu), fd_nav_jacobian(nav, imu)))

    for _ in range(100):
        qf = random_bearing_quat(rng)
        rho = rng.uniform(1.0, 20.0)
        vr, wr = rng.normal(size=3) * 3, rng.normal(size=3) * 0.5
        ext = random_extrinsics(rng)
        f = Feature(0, "r0", qf, rho)
        f_own, _ = feature_jacobians(f, vr, wr, ext)
        worst["feature"] = max(worst["feature"], rel_error(f_own, _fd_own_jacobian(qf, rho, vr, wr)))

    def boxplus_feat(feat, e):
        return Feature(0, feat.anchor_sensor, bearing_boxplus(feat.qf, e[0:2]), feat.rho + e[2])

    for _ in range(100):
        f = Feature(0, "r0", random_bearing_quat(rng), rng.uniform(1.0, 20.0))
        ext = random_extrinsics(rng)
        vr = rng.normal(size=3) * 3
        h_fd = _fd_h(lambda x: predict_measurement(x, vr), boxplus_feat, f, 3)
        h_f, _ = measurement_jacobians(f, vr, ext)
        worst["meas"] = max(worst["meas"], rel_error(h_f, h_fd))

    done = 0
    while done < 100:
        f = Feature(0, "r0", random_bearing_quat(rng), rng.uniform(3.0, 20.0))
        e_from, e_to = random_extrinsics(rng), random_extrinsics(rng)
        vr2 = rng.normal(size=3) * 3
        try:
            h_fd = _fd_h(lambda x: predict_measurement_cross(x, e_from, e_to, vr2), boxplus_feat, f, 3)
            h_f, _ = measurement_jacobians_cross(f, e_from, e_to, vr2)
            p2, jac = transform_feature_to_sensor(f, e_from, e_to)
        except DegenerateGeometryError:
            continue
        worst["cross"] = max(worst["cross"], rel_error(h_f, h_fd))
        # transform Jacobian by direct central differences (linear output)
        jac_fd = np.zeros((3, 3))
        eps = 1e-6
        for j in range(3):
            e = np.zeros(3)
            e[j] = eps
            pp, _ = transform_feature_to_sensor(boxplus_feat(f, e), e_from, e_to)
            pm, _ = transform_feature_to_sensor(boxplus_feat(f, -e), e_from, e_to)
            jac_fd[:, j] = (pp - pm) / (2 * eps)
        worst["transform"] = max(worst["transform"], rel_error(jac, jac_fd))
        done += 1

    elapsed = time.time() - t0
    assert all(v <= 1e-5 for v in worst.values()), worst
    assert elapsed < 10.0
    _announce(1, f"all Jacobians match finite differences, worst rel {max(worst.values()):.2e}, {elapsed:.1f}s")


def test_criterion_2_noise_free_closed_loop():
    t0 = time.time()
    spec = mc_runs.parking_spec(0, noisy=False)
    gt, imu, scans = generate_dataset(spec)
    cfg = run_config_for(spec, gt)
    traj, diag = run_replay(events_from_sim(imu, scans), cfg, ReplayOptions(health_check_interval=0))
    n = len(traj.t)
    end_err = float(np.linalg.norm(traj.p[n - 1] - gt.p[n - 1]))
    traj_rmse = float(np.sqrt(np.mean(np.sum((traj.p - gt.p[:n]) ** 2, axis=1))))
    elapsed = time.time() - t0
    assert end_err <= 0.01, end_err
    assert traj_rmse <= 0.01, traj_rmse
    assert elapsed < 10.0
    _announce(2, f"noise-free end error {end_err*1000:.2f} mm, RMSE {traj_rmse*1000:.2f} mm, {elapsed:.1f}s")


def test_criterion_3_noisy_monte_carlo(mc_full):
    results, elapsed = mc_full
    assert all(not r["aborted"] for r in results)
    errs = [r["end_err"] for r in results]
    p63 = nearest_rank_percentile(errs, 63.0)
    p95 = nearest_rank_percentile(errs, 95.0)
    assert p95 <= 0.30, p95
    assert p63 <= 0.15, p63
    assert elapsed < 300.0, elapsed
    _announce(3, f"50 runs: end-pose p63 {p63*100:.1f} cm (<=15), p95 {p95*100:.1f} cm (<=30), {elapsed:.0f}s")


def test_criterion_4_ablation_directions(mc_full, mc_ablation):
    n = mc_runs.N_ABLATION_RUNS
    full_med = float(np.median([r["end_err"] for r in mc_full[0][:n]]))
    meds = {v: float(np.median([r["end_err"] for r in runs])) for v, runs in mc_ablation.items()}
    assert full_med < meds["no_cross"], (full_med, meds)
    assert meds["no_cross"] < meds["no_doppler"], meds
    assert meds["maxfeat12"] > full_med, (full_med, meds)
    _announce(
        4,
        "medians order full {:.2f} < w/o-cross {:.2f} < w/o-doppler {:.2f} cm; "
        "12 features {:.2f} > 50 features {:.2f} cm".format(
            full_med * 100,
            meds["no_cross"] * 100,
            meds["no_doppler"] * 100,
            meds["maxfeat12"] * 100,
            full_med * 100,
        ),
    )


def test_criterion_5_filter_consistency(mc_full):
    results, _ = mc_full
    nees = np.array([r["nees"] for r in results])
    n = len(nees)
    # the stated gate: the 95% interval of the chi-square(9) distribution
    lo, hi = chi2.ppf(0.025, 9), chi2.ppf(0.975, 9)
    # tighter reference interval for the mean of n iid chi-square(9) draws
    lo_mean, hi_mean = chi2.ppf(0.025, 9 * n) / n, chi2.ppf(0.975, 9 * n) / n
    mean = float(nees.mean())
    assert lo <= mean <= hi, (lo, mean, hi)
    # symmetry/PSD: every-step health checks ran inside every run (interval 1
    # raises on any PSD loss and covariances are symmetric by construction)
    assert all(not r["aborted"] for r in results)
    assert all(r["p_sym_err"] == 0.0 for r in results)
    _announce(
        5,
        f"mean NEES {mean:.2f} inside the 95% chi2(9) interval [{lo:.2f}, {hi:.2f}] "
        f"(mean-of-{n} reference [{lo_mean:.2f}, {hi_mean:.2f}]); PSD held every step",
    )


def test_criterion_6_gating_calibration():
    # the production gate truncates matched distances at the gate value, so
    # calibration is measured on label-verified pairs with the gate opened
    d2 = []
    for seed in (101, 102):
        spec = mc_runs.parking_spec(seed)
        gt, imu, scans = generate_dataset(spec)
        cfg = run_config_for(spec, gt)
        cfg.gating = GatingConfig(chi2_gate=30.0)
        _, diag = run_replay(
            events_from_sim(imu, scans),
            cfg,
            ReplayOptions(health_check_interval=0, collect_mahalanobis=True),
        )
        d2.extend(diag.mahalanobis_sq_true)
    d2 = np.asarray(d2)
    assert len(d2) >= 10000
    p95 = float(np.percentile(d2, 95.0))
    assert 9.488 * 0.95 <= p95 <= 9.488 * 1.05, p95
    _announce(6, f"inlier d^2 95th percentile {p95:.3f} vs 9.488 +/- 5% over {len(d2)} matches")


def test_criterion_7_outlier_robustness(mc_movers):
    results = mc_movers
    errs = [r["end_err"] for r in results]
    p63 = nearest_rank_percentile(errs, 63.0)
    p95 = nearest_rank_percentile(errs, 95.0)
    strong_total = sum(r["movers_strong_total"] for r in results)
    strong_accepted = sum(r["movers_strong_accepted"] for r in results)
    reject_rate = 1.0 - strong_accepted / max(strong_total, 1)
    assert p95 <= 0.30 and p63 <= 0.15, (p63, p95)
    assert strong_total > 10000
    assert reject_rate >= 0.99, reject_rate
    _announce(
        7,
        f"20% movers: p63 {p63*100:.1f} cm, p95 {p95*100:.1f} cm; "
        f"{reject_rate*100:.2f}% of {strong_total} strong movers rejected",
    )


def test_criterion_8_sequential_batch_equivalence():
    from test_ekf import test_sequential_equals_batch_update

    test_sequential_equals_batch_update()
    _announce(8, "sequential updates equal stacked batch within 1e-9 on 100 random states")


def test_criterion_9_metrics_correctness():
    from radarslam.evaluation import compute_metrics
    from test_evaluation import make_traj, rigidly_move

    traj = make_traj()
    rep = compute_metrics(traj, traj)
    assert (
        rep.ape_rmse == 0.0
        and rep.rpe_rmse == 0.0
        and rep.rre_rmse_deg == 0.0
        and rep.end_pose_error == 0.0
        and rep.trajectory_rmse == 0.0
    )
    moved = rigidly_move(traj, np.array([0.2, -0.1, 0.9]), [5.0, -3.0, 0.5])
    rep2 = compute_metrics(moved, traj)
    assert rep2.rpe_rmse <= 1e-12 and rep2.rre_rmse_deg <= 1e-12

    import math

    rng = np.random.default_rng(9)
    for _ in range(1000):
        vals = rng.normal(size=int(rng.integers(1, 80)))
        for pct in (63.0, 95.0):
            want = np.sort(vals)[max(1, math.ceil(pct / 100.0 * len(vals))) - 1]
            assert nearest_rank_percentile(vals, pct) == want
    _announce(9, "exact zeros on identical, rigid invariance <=1e-12, percentiles match sorting oracle")


def test_criterion_10_determinism_and_performance(tmp_path):
    sensors = corner_sensors(rate=15.625, mount_deg=45.0)
    spec = ScenarioSpec(
        kind="figure8",
        duration=60.0,
        speed=2.0,
        scale=9.0,
        landmark_count=70,
        landmark_box=[-16.0, 16.0, -10.0, 10.0, -1.5, 1.5],
        sensors=sensors,
        seed=3,
        imu_noise=True,
        radar_noise=True,
    )
    gt, imu, scans = generate_dataset(spec)
    cfg = run_config_for(spec, gt)
    stream = events_from_sim(imu, scans)

    blobs, elapsed = [], []
    for run in range(2):
        t0 = time.time()
        traj, diag = run_replay(stream, cfg)
        elapsed.append(time.time() - t0)
        path = tmp_path / f"run{run}.csv"
        traj.write_csv(path)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]
    assert min(elapsed) < 10.0, elapsed
    # the dataset itself is regenerated identically from its seed
    gt2, imu2, scans2 = generate_dataset(spec)
    assert np.array_equal(gt.p, gt2.p)
    _announce(
        10,
        f"byte-identical replays; 60 s dataset (100 Hz IMU, 2x15 Hz radar, "
        f"50-feature filter) replayed in {min(elapsed):.1f} s",
    )
