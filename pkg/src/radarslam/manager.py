"""Feature lifecycle: outlier rejection, association, scoring, pruning.

Association is greedy nearest-neighbor on the full 4D Mahalanobis distance
(doppler, bearing tangent, range) with a chi-square gate; heavier
alternatives (JCBB, joint likelihood) buy nothing once Doppler is in the
distance.  Feature value is tracked as the cumulative differential-entropy
reduction of the 9-dof nav block attributed to each feature's updates,
debited equally when prediction inflates the nav entropy.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Tuple

import numpy as np

from .ekf import NAV_DIM, _group_by_anchor
from .errors import FilterHealthError
from .features import RHO_MIN, Feature, radar_frame_motion
from .geometry import angles_from_bearing, bearing_quat, bearing_vector
from .radar import (
    PredictedMeasurement,
    detection_to_measurement,
    detections_to_arrays,
    measurement_jacobians,
    measurement_jacobians_cross,
    predict_measurement,
    predict_measurement_cross,
)

CHI2_GATE_4DOF_95 = 9.488


@dataclass
class GatingConfig:
    chi2_gate: float = CHI2_GATE_4DOF_95
    doppler_stationarity_sigma: float = 3.0
    prune_interval: float = 0.5  # s
    min_features: int = 8
    staleness_window: float = 2.0  # s out of all FOVs before prune-eligible


@dataclass
class AssociationResult:
    matches: List[Tuple[int, int, float]]  # (feature id, detection index, d_M)
    unmatched_detections: List[int]
    unmatched_features: List[int]
    predictions: Dict[int, "FeaturePrediction"] = field(default_factory=dict)
    in_fov_ids: frozenset = frozenset()


@dataclass
class FeaturePrediction:
    predicted: object  # PredictedMeasurement
    h_f: np.ndarray
    h_nav: np.ndarray
    in_fov: bool


@dataclass
class InfoScore:
    value: float  # nats


def info_entropy(p_dyn):
    """Differential entropy 0.5 ln((2 pi e)^n |P|) via Cholesky, nats."""
    try:
        chol = np.linalg.cholesky(p_dyn)
    except np.linalg.LinAlgError as exc:
        raise FilterHealthError("entropy of a non-PSD covariance") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    n = p_dyn.shape[0]
    return InfoScore(0.5 * (n * math.log(2.0 * math.pi * math.e) + logdet))


def nav_entropy(state):
    return info_entropy(state.nav_cov()).value


def in_fov(bearing, rng, sensor):
    az, el = angles_from_bearing(bearing)
    return (
        abs(az) <= sensor.fov_az
        and abs(el) <= sensor.fov_el
        and sensor.range_min <= rng <= sensor.range_max
    )


def stationarity_gate(detections, state, imu, sensor, cfg, det_arrays=None):
    """Indices of detections consistent with a stationary world.

    Compares raw Doppler against the ego-velocity prediction along the
    *measured* bearing; the acceptance band combines the Doppler noise with
    the projected velocity covariance.
    """
    if not detections:
        return []
    vr, _ = radar_frame_motion(state.nav, imu, sensor.extrinsics)
    p_vv = state.P[0:3, 0:3]
    dop, bearings = (
        det_arrays[:2] if det_arrays is not None else detections_to_arrays(detections, sensor.noise)[:2]
    )
    directions = bearings @ sensor.extrinsics.r_rb
    sigma2 = sensor.noise.sigma_doppler**2 + np.einsum(
        "ni,ij,nj->n", directions, p_vv, directions
    )
    mismatch = dop - bearings @ vr
    keep = np.abs(mismatch) <= cfg.doppler_stationarity_sigma * np.sqrt(sigma2)
    return list(np.nonzero(keep)[0])


def predict_feature_measurement(state, f, sensor, sensors, vr):
    """Cheap 4D prediction of one feature in one sensor's frame (no H)."""
    if f.anchor_sensor == sensor.id:
        return predict_measurement(f, vr)
    return predict_measurement_cross(
        f, sensors[f.anchor_sensor].extrinsics, sensor.extrinsics, vr
    )


def predict_one(state, fi, sensor, sensors, vr):
    """Array-backed prediction of feature index fi in one sensor's frame."""
    qf_all, rho_all = state.feature_arrays()
    f = state.meta()[fi]
    if f.anchor_sensor == sensor.id:
        p = bearing_vector(qf_all[fi])
        return PredictedMeasurement(
            float(p @ vr), p, float(rho_all[fi]), qf_all[fi]
        )
    ext_from = sensors[f.anchor_sensor].extrinsics
    ext_to = sensor.extrinsics
    r21 = ext_to.r_rb @ ext_from.r_rb.T
    p2 = r21 @ (bearing_vector(qf_all[fi]) * rho_all[fi]) + ext_to.r_rb @ (
        ext_from.lever_arm_b - ext_to.lever_arm_b
    )
    rng = float(np.linalg.norm(p2))
    if rng < RHO_MIN:
        from .errors import DegenerateGeometryError

        raise DegenerateGeometryError("feature too close to target sensor")
    b2 = p2 / rng
    return PredictedMeasurement(float(b2 @ vr), b2, rng, bearing_quat(b2))


def feature_h_blocks(state, f, sensor, sensors, vr, doppler_coupling=True, measured_bearing=None):
    """Measurement Jacobian blocks of one feature for one sensor."""
    if f.anchor_sensor == sensor.id:
        return measurement_jacobians(
            f, vr, sensor.extrinsics, doppler_coupling, measured_bearing
        )
    return measurement_jacobians_cross(
        f,
        sensors[f.anchor_sensor].extrinsics,
        sensor.extrinsics,
        vr,
        doppler_coupling,
        measured_bearing,
    )


def predict_for_sensor(
    state, f, sensor, sensors, imu, doppler_coupling=True, measured_bearing=None, vr=None
):
    """Prediction + H blocks of one feature in one sensor's frame.

    Uses the direct model when the sensor is the feature's anchor and the
    extrinsic transform chain otherwise.
    """
    if vr is None:
        vr, _ = radar_frame_motion(state.nav, imu, sensor.extrinsics)
    pred = predict_feature_measurement(state, f, sensor, sensors, vr)
    h_f, h_nav = feature_h_blocks(
        state, f, sensor, sensors, vr, doppler_coupling, measured_bearing
    )
    return pred, h_f, h_nav


def predict_all_features(state, sensor, sensors, vr, cross_matching=True):
    """Vectorized 4D predictions of every feature in one sensor's frame.

    Returns (pred_b (m,3), pred_r (m,), pred_d (m,), considered (m,) bool,
    cross_parts {anchor: (ext_from, r21)}).  Features whose transform is
    degenerate or excluded by the cross-matching flag are not considered.
    """
    from ._kernels import _fallback

    m = state.n_features
    qf_all, rho_all = state.feature_arrays()
    pred_b = np.zeros((m, 3))
    pred_r = np.zeros(m)
    pred_d = np.zeros(m)
    considered = np.zeros(m, dtype=bool)
    cross_parts = {}
    for anchor, idxs in _group_by_anchor(state.meta()).items():
        idx = np.asarray(idxs)
        if anchor == sensor.id:
            b = _fallback._bearings(qf_all[idx])
            pred_b[idx] = b
            pred_r[idx] = rho_all[idx]
            pred_d[idx] = b @ vr
            considered[idx] = True
            continue
        if not cross_matching:
            continue
        ext_from = sensors[anchor].extrinsics
        ext_to = sensor.extrinsics
        r21 = ext_to.r_rb @ ext_from.r_rb.T
        t2 = ext_to.r_rb @ (ext_from.lever_arm_b - ext_to.lever_arm_b)
        cross_parts[anchor] = (ext_from, r21)
        b_anchor = _fallback._bearings(qf_all[idx])
        p2 = (b_anchor * rho_all[idx][:, None]) @ r21.T + t2
        rng = np.linalg.norm(p2, axis=1)
        good = rng >= RHO_MIN
        ii = idx[good]
        b2 = p2[good] / rng[good][:, None]
        pred_b[ii] = b2
        pred_r[ii] = rng[good]
        pred_d[ii] = b2 @ vr
        considered[ii] = True
    return pred_b, pred_r, pred_d, considered, cross_parts


def associate(detections, state, imu, sensor, sensors, cfg, cross_matching=True, det_arrays=None):
    """Greedy one-to-one nearest-neighbor association with a chi^2 gate.

    Every filter feature visible in this sensor's FOV is predicted (via the
    cross-sensor transform when anchored elsewhere) and scored against every
    detection with the full 4x4 innovation covariance.  A coarse window from
    the covariance diagonals (2x margin over the 3.1-sigma-per-axis extent
    of the gate) prunes pairs before the exact Mahalanobis distance is paid.
    """
    from ._kernels import _fallback

    n_det = len(detections)
    m = state.n_features
    if m == 0:
        return AssociationResult([], list(range(n_det)), [])
    if n_det:
        if det_arrays is None:
            det_arrays = detections_to_arrays(detections, sensor.noise)
        dop_m, bearings_m, rng_m, cov_m = det_arrays[:4]
    vr, _ = radar_frame_motion(state.nav, imu, sensor.extrinsics)
    pred_b, pred_r, pred_d, considered, cross_parts = predict_all_features(
        state, sensor, sensors, vr, cross_matching
    )
    az = np.arctan2(pred_b[:, 1], pred_b[:, 0])
    el = np.arcsin(np.clip(pred_b[:, 2], -1.0, 1.0))
    visible = (
        considered
        & (np.abs(az) <= sensor.fov_az)
        & (np.abs(el) <= sensor.fov_el)
        & (pred_r >= sensor.range_min)
        & (pred_r <= sensor.range_max)
    )
    in_fov_ids = frozenset(state.meta()[i].id for i in np.nonzero(visible)[0])

    predictions = {}
    rows = []  # (d2, feature id, feature list-index, det index)
    feats = np.zeros(0, dtype=int)
    vis = np.nonzero(visible)[0]
    if n_det and vis.size:
        p_diag = np.diag(state.P)
        base_vis = NAV_DIM + 3 * vis
        sig_b = np.sqrt(
            np.maximum(p_diag[base_vis], p_diag[base_vis + 1]) + sensor.noise.sigma_az**2
        )
        sig_r = np.sqrt(p_diag[base_vis + 2] + sensor.noise.sigma_range**2)
        sig_d = math.sqrt(float(np.max(p_diag[0:3])) + sensor.noise.sigma_doppler**2)
        cs_all = pred_b[vis] @ bearings_m.T  # (k, n_det)
        near = (
            (cs_all > np.cos(np.minimum(6.0 * sig_b, 1.5))[:, None])
            & (np.abs(pred_r[vis][:, None] - rng_m[None, :]) < (6.0 * sig_r)[:, None])
            & (np.abs(pred_d[vis][:, None] - dop_m[None, :]) < 6.0 * sig_d)
        )
        sel = np.nonzero(near.any(axis=1))[0]
        feats = vis[sel]

    if feats.size:
        qf_all, rho_all = state.feature_arrays()
        meta = state.meta()
        c = feats.size
        pos = {int(fi): j for j, fi in enumerate(feats)}
        # measurement rows, batched per anchor group; columns [dv | db, drho]
        h_sub = np.zeros((c, 4, 6))
        h_sub[:, 1, 3] = 1.0
        h_sub[:, 2, 4] = 1.0
        h_sub[:, 3, 5] = 1.0
        pred_q = np.empty((c, 4))
        for anchor, idxs in _group_by_anchor([meta[int(fi)] for fi in feats]).items():
            j = np.asarray(idxs)
            fis = feats[j]
            qfa = qf_all[fis]
            pa = _fallback._bearings(qfa)
            nqa = _fallback._nq(qfa)
            pxn = np.cross(pa[:, :, None], nqa, axisa=1, axisb=1, axisc=1)
            if anchor == sensor.id:
                h_sub[j, 0, 0:3] = pa @ sensor.extrinsics.r_rb
                h_sub[j, 0, 3:5] = -np.einsum("i,kij->kj", vr, pxn)
                pred_q[j] = qfa
            else:
                _, r21 = cross_parts[anchor]
                jac = np.empty((len(idxs), 3, 3))
                jac[:, :, 0:2] = -rho_all[fis][:, None, None] * np.einsum(
                    "ab,kbc->kac", r21, pxn
                )
                jac[:, :, 2] = pa @ r21.T
                b2 = pred_b[fis]
                rng = pred_r[fis]
                q2 = _fallback._bearing_quats(b2)
                n2 = _fallback._nq(q2)
                vperp = vr[None, :] - (b2 @ vr)[:, None] * b2
                h_sub[j, 0, 0:3] = b2 @ sensor.extrinsics.r_rb
                h_sub[j, 0, 3:6] = np.einsum("ki,kij->kj", vperp, jac) / rng[:, None]
                b2xjac = np.cross(b2[:, :, None], jac, axisa=1, axisb=1, axisc=1)
                h_sub[j, 1:3, 3:6] = (
                    np.einsum("kit,kic->ktc", n2, b2xjac) / rng[:, None, None]
                )
                h_sub[j, 3, 3:6] = np.einsum("ki,kij->kj", b2, jac)
                pred_q[j] = q2
        base = NAV_DIM + 3 * feats
        cols = np.empty((c, 6), dtype=int)
        cols[:, 0:3] = [0, 1, 2]
        cols[:, 3] = base
        cols[:, 4] = base + 1
        cols[:, 5] = base + 2
        p_sub = state.P[cols[:, :, None], cols[:, None, :]]  # (c,6,6)
        hpht = h_sub @ p_sub @ h_sub.transpose(0, 2, 1)
        hpht = 0.5 * (hpht + hpht.transpose(0, 2, 1))

        # exact gate over the surviving pairs, fully batched
        frow, dpair = np.nonzero(near[sel])
        fi_pair = feats[frow]
        pb = pred_b[fi_pair]
        bm = bearings_m[dpair]
        cvec = np.cross(pb, bm)
        sn = np.linalg.norm(cvec, axis=1)
        cs = np.sum(pb * bm, axis=1)
        safe = np.where(sn > 1e-12, sn, 1.0)
        phi = (np.where(sn > 1e-12, np.arctan2(sn, cs) / safe, 1.0))[:, None] * cvec
        r = np.empty((len(frow), 4))
        r[:, 0] = dop_m[dpair] - pred_d[fi_pair]
        r[:, 1:3] = np.einsum("pi,pit->pt", phi, _fallback._nq(pred_q[frow]))
        r[:, 3] = rng_m[dpair] - pred_r[fi_pair]
        s = hpht[frow] + cov_m[dpair]
        d2 = np.einsum("pi,pi->p", r, np.linalg.solve(s, r[:, :, None])[:, :, 0])
        for k in np.nonzero(d2 <= cfg.chi2_gate)[0]:
            rows.append((float(d2[k]), meta[int(fi_pair[k])].id, int(fi_pair[k]), int(dpair[k])))

    rows.sort(key=lambda r: (r[0], r[1], r[3]))
    matched_f, matched_d, matches = set(), set(), []
    for d2, fid, fi, di in rows:
        if fi in matched_f or di in matched_d:
            continue
        matched_f.add(fi)
        matched_d.add(di)
        matches.append((fid, di, math.sqrt(d2)))

    if matches:
        meta = state.meta()
        for fid, di, _ in matches:
            fi = state.feature_index(fid)
            j = pos[fi]
            h_nav = np.zeros((4, NAV_DIM))
            h_nav[:, 0:3] = h_sub[j, :, 0:3]
            pred = PredictedMeasurement(
                float(pred_d[fi]), pred_b[fi], float(pred_r[fi]), pred_q[j]
            )
            predictions[fid] = FeaturePrediction(pred, h_sub[j, :, 3:6], h_nav, True)
    unmatched_d = [i for i in range(len(detections)) if i not in matched_d]
    unmatched_f = [f.id for i, f in enumerate(state.meta()) if i not in matched_f]
    return AssociationResult(matches, unmatched_d, unmatched_f, predictions, in_fov_ids)


def credit_update(state, feature_id, entropy_before, entropy_after):
    """Add the nav-entropy reduction of an update to the feature's score."""
    return credit_updates(state, {feature_id: entropy_before - entropy_after})


def credit_updates(state, credit_map):
    """Apply accumulated update credits in one metadata pass."""
    if not credit_map:
        return state
    features = [
        replace(f, score=f.score + credit_map[f.id], hits=f.hits + 1, last_seen=state.t)
        if f.id in credit_map
        else f
        for f in state.meta()
    ]
    return replace_features(state, features)


def debit_prediction(state, entropy_before, entropy_after):
    """Spread the prediction's nav-entropy growth equally over all features."""
    m = state.n_features
    if m == 0:
        return state
    per_feature = (entropy_after - entropy_before) / m
    features = [
        Feature(
            f.id,
            f.anchor_sensor,
            f.qf,
            f.rho,
            f.score - per_feature,
            f.hits,
            f.misses,
            f.last_seen,
            f.last_in_fov,
            f.depth_clamped,
        )
        for f in state.meta()
    ]
    return replace_features(state, features)


def replace_features(state, features):
    """New state with swapped feature metadata (qf/rho untouched)."""
    from .ekf import FilterState

    return FilterState(
        state.t,
        state.nav,
        features,
        state.P,
        state.capacity,
        qf_arr=state._qf,
        rho_arr=state._rho,
        clamped=state._clamped,
        fresh=state._fresh,
    )


def candidate_information(state, det, sensor, vr):
    """Predicted nav-entropy drop of a hypothetical first update.

    A fresh feature carries no cross-covariance, so only the Doppler row
    couples it to the nav block; detections radial to the velocity promise
    the most information.
    """
    m = detection_to_measurement(det, sensor.noise)
    return float(candidate_gains(state, [m], sensor, vr)[0])


def candidate_gains(state, measurements, sensor, vr):
    """Batched candidate_information over a list of Measurements.

    Only the Doppler row of a fresh candidate touches the nav block, so the
    update is rank one in the nav covariance and the entropy drop reduces to
    0.5 ln(s / (s - h P h^T)) with s the Schur-complement variance of the
    Doppler row against the other three.
    """
    n = len(measurements)
    if n == 0:
        return np.zeros(0)
    b = np.stack([m.bearing for m in measurements])
    q = np.stack([m.bearing_q for m in measurements])
    cov = np.stack([m.cov for m in measurements])
    from ._kernels import _fallback

    p_nav = state.nav_cov()
    h0 = b @ sensor.extrinsics.r_rb  # (n,3) doppler row wrt dv
    hph = np.einsum("ni,ij,nj->n", h0, p_nav[0:3, 0:3], h0)
    # Doppler row wrt the candidate's own bearing tangent
    nq = _fallback._nq(q)
    bxn = np.cross(b[:, :, None], nq, axisa=1, axisb=1, axisc=1)  # (n,3,2)
    a = -np.einsum("i,nij->nj", vr, bxn)
    sigma_b = cov[:, 1:3, 1:3]  # candidate init covariance = mapped noise
    s = cov.copy()
    s[:, 0, 0] += hph + np.einsum("ni,nij,nj->n", a, sigma_b, a)
    s01 = np.einsum("ni,nij->nj", a, sigma_b)
    s[:, 0, 1:3] += s01
    s[:, 1:3, 0] += s01
    s[:, 1:3, 1:3] += sigma_b
    s[:, 3, 3] += cov[:, 3, 3]
    schur = s[:, 0, 0] - np.einsum(
        "ni,ni->n", s[:, 0, 1:], np.linalg.solve(s[:, 1:, 1:], s[:, 0, 1:, None])[:, :, 0]
    )
    ratio = np.clip(hph / np.maximum(schur, 1e-300), 0.0, 1.0 - 1e-15)
    return -0.5 * np.log1p(-ratio)


def init_feature_cov(measurement):
    """Initial 3x3 feature covariance from the mapped measurement noise."""
    cov = np.zeros((3, 3))
    cov[0:2, 0:2] = measurement.cov[1:3, 1:3]
    cov[2, 2] = measurement.cov[3, 3]
    return cov


def make_feature(feature_id, sensor_id, measurement, t):
    return Feature(
        id=feature_id,
        anchor_sensor=sensor_id,
        qf=measurement.bearing_q.copy(),
        rho=measurement.range,
        score=0.0,
        hits=0,
        misses=0,
        last_seen=t,
        last_in_fov=t,
    )


def note_association(state, assoc):
    """Refresh FOV/miss bookkeeping from an association result."""
    unmatched = set(assoc.unmatched_features)
    features = []
    for f in state.meta():
        if f.id in assoc.in_fov_ids:
            features.append(
                replace(
                    f,
                    last_in_fov=state.t,
                    misses=f.misses + 1 if f.id in unmatched else f.misses,
                )
            )
        else:
            features.append(f)
    return replace_features(state, features)


def prune_and_select(state, candidates, sensor, vr, cfg, next_feature_id, inserted=None):
    """Drop stale/low-value features and admit the most informative candidates.

    candidates: list of (detection, Measurement) pairs that survived the
    stationarity gate but matched no feature.  Returns the new state and the
    next unused feature id; when `inserted` is a list it receives
    (feature id, candidate index) for every admitted candidate.
    """
    from .ekf import insert_feature, remove_feature

    now = state.t
    # stale: out of every sensor's FOV longer than the staleness window
    for f in list(state.features):
        if state.n_features <= cfg.min_features:
            break
        if now - f.last_in_fov > cfg.staleness_window or f.depth_clamped:
            state = remove_feature(state, f.id)

    if not candidates:
        return state, next_feature_id

    gains = candidate_gains(state, [m for _, m in candidates], sensor, vr)
    ranked = sorted(
        ((float(gains[di]), di, det, m) for di, (det, m) in enumerate(candidates)),
        key=lambda r: (-r[0], r[1]),
    )
    fresh = set()
    for gain, di, det, meas in ranked:
        if state.n_features < state.capacity:
            state = insert_feature(
                state, make_feature(next_feature_id, sensor.id, meas, now), init_feature_cov(meas)
            )
            fresh.add(next_feature_id)
            if inserted is not None:
                inserted.append((next_feature_id, di))
            next_feature_id += 1
            continue
        # capacity-bound: evict the lowest-scoring incumbent only when the
        # candidate promises more than the incumbent has accumulated; never
        # evict a feature inserted during this same event (it has had no
        # chance to earn a score yet)
        evictable = (
            [f for f in state.features if f.id not in fresh]
            if state.n_features > cfg.min_features
            else []
        )
        if not evictable:
            break
        worst = min(evictable, key=lambda f: (f.score, f.id))
        if worst.score >= gain:
            break
        state = remove_feature(state, worst.id)
        state = insert_feature(
            state, make_feature(next_feature_id, sensor.id, meas, now), init_feature_cov(meas)
        )
        fresh.add(next_feature_id)
        if inserted is not None:
            inserted.append((next_feature_id, di))
        next_feature_id += 1
    return state, next_feature_id
