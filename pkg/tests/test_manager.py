import itertools
import math

import numpy as np

from radarslam.config import SensorConfig
from radarslam.ekf import FilterState, insert_feature
from radarslam.features import Feature, RadarExtrinsics, radar_frame_motion
from radarslam.geometry import bearing_quat
from radarslam.manager import (
    GatingConfig,
    associate,
    candidate_gains,
    candidate_information,
    credit_update,
    debit_prediction,
    info_entropy,
    nav_entropy,
    note_association,
    prune_and_select,
    stationarity_gate,
)
from radarslam.motion import ImuSample, NavState
from radarslam.radar import RadarDetection, detection_to_measurement

RNG = np.random.default_rng(606)
CFG = GatingConfig()


def make_sensor(sensor_id="fl", ext=None):
    return SensorConfig(id=sensor_id, extrinsics=ext or RadarExtrinsics(np.eye(3)))


def sensor_map(*sensors):
    return {s.id: s for s in sensors}


def static_state(m=0, v=None, p_scale=1e-4):
    nav = NavState(np.asarray(v if v is not None else np.zeros(3), dtype=float),
                   np.array([1.0, 0, 0, 0]), np.zeros(3))
    state = FilterState(0.0, nav, [], np.eye(9) * p_scale, capacity=50)
    for i in range(m):
        b = RNG.normal(size=3)
        b[0] = abs(b[0]) + 1.0
        b /= np.linalg.norm(b)
        state = insert_feature(
            state,
            Feature(i, "fl", bearing_quat(b), RNG.uniform(4, 20)),
            np.diag([1e-4, 1e-4, 0.01]),
        )
    return state


def test_stationarity_gate_rejects_movers():
    sensor = make_sensor()
    state = static_state()
    imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
    # stationary vehicle: a closing 3 m/s detection must be a mover
    dets = [RadarDetection(0.0, 0.0, 10.0, -3.0), RadarDetection(0.2, 0.0, 8.0, 0.0)]
    keep = stationarity_gate(dets, state, imu, sensor, CFG)
    assert keep == [1]


def test_stationarity_gate_keeps_consistent():
    sensor = make_sensor()
    state = static_state(v=[5.0, 0.0, 0.0])
    imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
    dets = [RadarDetection(0.0, 0.0, 20.0, -5.0 + 0.01)]
    assert stationarity_gate(dets, state, imu, sensor, CFG) == [0]


def test_associate_exact_match():
    sensor = make_sensor()
    sensors = sensor_map(sensor)
    state = static_state(m=1, v=[1.0, 0.0, 0.0])
    imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
    f = state.features[0]
    vr, _ = radar_frame_motion(state.nav, imu, sensor.extrinsics)
    from radarslam.geometry import angles_from_bearing, bearing_vector

    az, el = angles_from_bearing(bearing_vector(f.qf))
    det = RadarDetection(az, el, f.rho, -float(bearing_vector(f.qf) @ vr))
    res = associate([det], state, imu, sensor, sensors, CFG)
    assert len(res.matches) == 1
    fid, di, d = res.matches[0]
    assert fid == f.id and di == 0 and d < 1e-6
    assert res.unmatched_detections == []


def test_associate_gate_rejects_far_pair():
    # a pair at d^2 = 20 > 9.488 stays unmatched; chi-square 95 percent
    # quantile for 4 dof from the inverse-CDF oracle
    from scipy.stats import chi2

    assert np.isclose(chi2.ppf(0.95, 4), 9.488, atol=5e-4)
    sensor = make_sensor()
    sensors = sensor_map(sensor)
    state = static_state(m=1)
    imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
    f = state.features[0]
    from radarslam.geometry import angles_from_bearing, bearing_vector

    az, el = angles_from_bearing(bearing_vector(f.qf))
    # push the range far enough that d^2 lands around 20
    sig_r = math.sqrt(0.01 + sensor.noise.sigma_range**2)
    det = RadarDetection(az, el, f.rho + math.sqrt(20.0) * sig_r, 0.0)
    res = associate([det], state, imu, sensor, sensors, CFG)
    assert res.matches == []
    assert res.unmatched_detections == [0]
    assert f.id in res.unmatched_features


def test_greedy_matches_exhaustive_assignment():
    # greedy nearest neighbor vs brute-force minimum-total-distance
    # one-to-one assignment over random small scenes
    sensor = make_sensor()
    sensors = sensor_map(sensor)
    agree = 0
    trials = 300
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        state = static_state(m=5, v=[1.5, 0.0, 0.0])
        imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
        vr, _ = radar_frame_motion(state.nav, imu, sensor.extrinsics)
        from radarslam.geometry import angles_from_bearing, bearing_vector

        dets = []
        for f in state.features:
            az, el = angles_from_bearing(bearing_vector(f.qf))
            dets.append(
                RadarDetection(
                    az + rng.normal(0, sensor.noise.sigma_az),
                    el + rng.normal(0, sensor.noise.sigma_el),
                    f.rho + rng.normal(0, sensor.noise.sigma_range),
                    -(float(bearing_vector(f.qf) @ vr) + rng.normal(0, sensor.noise.sigma_doppler)),
                )
            )
        for _ in range(2):
            dets.append(RadarDetection(rng.uniform(-0.8, 0.8), rng.uniform(-0.2, 0.2), rng.uniform(4, 20), 0.0))
        res = associate(dets, state, imu, sensor, sensors, CFG)
        assert len({m[0] for m in res.matches}) == len(res.matches)
        assert len({m[1] for m in res.matches}) == len(res.matches)

        # oracle: exhaustive search over one-to-one assignments using the
        # same gated pair distances
        pair_d2 = {}
        for f in state.features:
            single = FilterState(0.0, state.nav, [f], np.zeros((12, 12)), 50)
            single.P[:9, :9] = state.P[:9, :9]
            sl = state.feature_slice(state.feature_index(f.id))
            single.P[9:, 9:] = state.P[sl, sl]
            r1 = associate(dets, single, imu, sensor, sensors, CFG)
            # recover each candidate distance by probing one detection at a time
            for di, det in enumerate(dets):
                r_one = associate([det], single, imu, sensor, sensors, CFG)
                if r_one.matches:
                    pair_d2[(f.id, di)] = r_one.matches[0][2] ** 2
        best_cost, best_assign = None, None
        fids = [f.id for f in state.features]
        for k in range(len(fids), -1, -1):
            if best_assign is not None:
                break
            for fsub in itertools.combinations(fids, k):
                for dsub in itertools.permutations(range(len(dets)), k):
                    if any((f, d) not in pair_d2 for f, d in zip(fsub, dsub)):
                        continue
                    cost = sum(pair_d2[(f, d)] for f, d in zip(fsub, dsub))
                    if best_cost is None or cost < best_cost:
                        best_cost, best_assign = cost, set(zip(fsub, dsub))
        greedy_assign = {(m[0], m[1]) for m in res.matches}
        if best_assign is not None and len(greedy_assign) == len(best_assign):
            if greedy_assign == best_assign:
                agree += 1
        elif best_assign is None:
            agree += 1
    assert agree / trials >= 0.95


def test_info_entropy_closed_forms():
    assert np.isclose(info_entropy(np.eye(1)).value, 0.5 * math.log(2 * math.pi * math.e), atol=1e-9)
    assert np.isclose(info_entropy(np.eye(3)).value, 1.5 * (1 + math.log(2 * math.pi)), atol=1e-9)
    base = info_entropy(np.eye(3)).value
    scaled = info_entropy(4.0 * np.eye(3)).value
    assert np.isclose(scaled - base, 1.5 * math.log(4.0), atol=1e-12)


def test_scoring_update_and_prediction_events():
    state = static_state(m=2)
    e0 = nav_entropy(state)
    # zero-gain update: entropy unchanged, score unchanged
    s2 = credit_update(state, 0, e0, e0)
    assert s2.features[0].score == 0.0
    assert s2.features[0].hits == 1
    # an informative update strictly reduces entropy -> positive score
    s3 = credit_update(state, 0, e0, e0 - 0.25)
    assert np.isclose(s3.features[0].score, 0.25)
    # prediction event: equal split of the entropy growth
    s4 = debit_prediction(state, e0, e0 + 0.1)
    assert np.isclose(s4.features[0].score, -0.05)
    assert np.isclose(s4.features[1].score, -0.05)


def test_candidate_information_matches_direct_entropy():
    # the rank-one fast path equals a direct hypothetical-update evaluation
    state = static_state(m=0, v=[2.0, 0.0, 0.0], p_scale=0.05)
    sensor = make_sensor()
    imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
    vr, _ = radar_frame_motion(state.nav, imu, sensor.extrinsics)
    for trial in range(20):
        det = RadarDetection(
            RNG.uniform(-0.8, 0.8), RNG.uniform(-0.2, 0.2), RNG.uniform(3, 30), 0.0
        )
        fast = candidate_information(state, det, sensor, vr)
        # direct oracle: build the full hypothetical update on the nav block
        m = detection_to_measurement(det, sensor.noise)
        from radarslam.geometry import nq_projection, skew
        from radarslam.manager import init_feature_cov

        h_nav = np.zeros((4, 9))
        h_nav[0, 0:3] = m.bearing @ sensor.extrinsics.r_rb
        h_f = np.zeros((4, 3))
        h_f[0, 0:2] = -vr @ skew(m.bearing) @ nq_projection(m.bearing_q)
        h_f[1:3, 0:2] = np.eye(2)
        h_f[3, 2] = 1.0
        p_nav = state.nav_cov()
        p_f0 = init_feature_cov(m)
        s = h_nav @ p_nav @ h_nav.T + h_f @ p_f0 @ h_f.T + m.cov
        bn = p_nav @ h_nav.T
        p_after = p_nav - bn @ np.linalg.solve(s, bn.T)
        direct = info_entropy(p_nav).value - info_entropy(0.5 * (p_after + p_after.T)).value
        assert np.isclose(fast, direct, rtol=1e-8, atol=1e-12)


def test_candidate_ranking_prefers_radial():
    # a detection along the velocity vector informs the velocity through
    # Doppler; a near-perpendicular one cannot
    state = static_state(m=0, v=[2.0, 0.0, 0.0], p_scale=0.05)
    sensor = make_sensor()
    vr = np.array([2.0, 0.0, 0.0])
    radial = candidate_information(state, RadarDetection(0.0, 0.0, 10.0, -2.0), sensor, vr)
    perp = candidate_information(state, RadarDetection(1.3, 0.0, 10.0, 0.0), sensor, vr)
    assert radial > perp > 0.0


def test_prune_and_select_fills_capacity():
    state = static_state(m=0, v=[1.0, 0.0, 0.0])
    sensor = make_sensor()
    dets = [
        RadarDetection(RNG.uniform(-0.6, 0.6), RNG.uniform(-0.2, 0.2), RNG.uniform(3, 30), 0.0)
        for _ in range(10)
    ]
    candidates = [(d, detection_to_measurement(d, sensor.noise)) for d in dets]
    out, next_id = prune_and_select(state, candidates, sensor, np.array([1.0, 0, 0]), CFG, 0)
    assert len(out.features) == 10
    assert next_id == 10
    for f in out.features:
        assert f.anchor_sensor == "fl"


def test_prune_and_select_no_change_when_full_and_matched():
    cfg = GatingConfig()
    state = static_state(m=12)
    state.capacity = 12
    # all matched recently, none stale, no candidates
    out, next_id = prune_and_select(state, [], make_sensor(), np.zeros(3), cfg, 100)
    assert [f.id for f in out.features] == [f.id for f in state.features]
    assert next_id == 100


def test_prune_removes_stale_features():
    cfg = GatingConfig(min_features=1, staleness_window=2.0)
    state = static_state(m=4)
    feats = list(state.features)
    # feature 2 left every FOV 3 seconds ago
    from dataclasses import replace

    feats[2] = replace(feats[2], last_in_fov=-3.0)
    state = FilterState(0.0, state.nav, feats, state.P, state.capacity)
    out, _ = prune_and_select(state, [], make_sensor(), np.zeros(3), cfg, 50)
    assert [f.id for f in out.features] == [0, 1, 3]


def test_selection_order_matches_exhaustive_candidate_oracle():
    # capacity 2, three candidates with ordered predicted information:
    # the chosen pair maximizes the total predicted gain over all pairs
    cfg = GatingConfig(min_features=0)
    state = static_state(m=0, v=[2.0, 0.0, 0.0], p_scale=0.05)
    state.capacity = 2
    sensor = make_sensor()
    vr = np.array([2.0, 0.0, 0.0])
    dets = [
        RadarDetection(0.0, 0.0, 8.0, -2.0),  # radial: most informative
        RadarDetection(0.7, 0.0, 8.0, -2.0 * math.cos(0.7)),
        RadarDetection(1.35, 0.0, 8.0, -2.0 * math.cos(1.35)),  # near-perpendicular
    ]
    candidates = [(d, detection_to_measurement(d, sensor.noise)) for d in dets]
    gains = candidate_gains(state, [m for _, m in candidates], sensor, vr)
    assert gains[0] > gains[1] > gains[2]
    out, _ = prune_and_select(state, candidates, sensor, vr, cfg, 0)
    chosen = sorted(f.rho for f in out.features)
    # oracle: evaluate every insertion pair by total predicted gain
    best_pair = max(itertools.combinations(range(3), 2), key=lambda pr: gains[pr[0]] + gains[pr[1]])
    assert best_pair == (0, 1)
    assert len(out.features) == 2
    bearings = {round(float(f.qf[0]), 6) for f in out.features}
    expected = {
        round(float(detection_to_measurement(dets[i], sensor.noise).bearing_q[0]), 6)
        for i in best_pair
    }
    assert bearings == expected


def test_note_association_bookkeeping():
    from radarslam.manager import AssociationResult

    state = static_state(m=2)
    assoc = AssociationResult(
        matches=[], unmatched_detections=[], unmatched_features=[0, 1],
        predictions={}, in_fov_ids=frozenset([0]),
    )
    out = note_association(state, assoc)
    assert out.features[0].last_in_fov == state.t
    assert out.features[0].misses == 1
    assert out.features[1].misses == 0
