"""Discrete error-state EKF over the joint nav + feature state.

Error-state layout: [dv(3), dtheta(3), dp(3) | db_1(2), drho_1 | ...],
so P is (9 + 3m) x (9 + 3m) with feature blocks in list order.

Prediction propagates the mean by joint RK4 (features see the nav stage
velocities) and the covariance by a second-order truncation of the matrix
exponential with F frozen at the interval start.  The block sparsity of
Phi = [[A, 0], [B, C]] (C block-diagonal per feature) is exploited so the
cost stays linear in the number of features for everything except the
feature-feature covariance block.

Updates are sequential per feature with a 4x4 innovation, Joseph-form
covariance arithmetic, and manifold retraction of the correction.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional

import numpy as np

from . import _kernels
from .errors import CapacityError, FilterHealthError
from .features import RHO_MIN, Feature, radar_velocity_stages
from .geometry import bearing_boxminus, rot_boxplus
from .motion import NavState, nav_input_jacobian, nav_jacobian, propagate_nav_stages

NAV_DIM = 9
FEAT_DIM = 3
COND_LIMIT = 1e12
PSD_JITTER = 1e-12


@dataclass
class ProcessNoiseConfig:
    sigma_a: float = 0.02  # m/s^2/sqrt(Hz), consumer-grade MEMS accel
    sigma_w: float = 0.001  # rad/s/sqrt(Hz), consumer-grade MEMS gyro
    sigma_feature_bearing: float = 1e-3  # rad/sqrt(Hz)
    sigma_feature_depth: float = 1e-2  # m/sqrt(Hz)


class FilterState:
    """Joint filter state: nav + features + covariance.

    The numeric feature states (bearing quaternions, depths) are held in
    arrays; the Feature objects in `features` are materialized from them
    lazily so the per-update hot path never rebuilds object lists.  All
    operations return new states (value semantics); shared arrays/lists are
    never mutated.
    """

    __slots__ = ("t", "nav", "P", "capacity", "_meta", "_qf", "_rho", "_clamped", "_fresh")

    def __init__(self, t, nav, features=None, P=None, capacity=50,
                 qf_arr=None, rho_arr=None, clamped=None, fresh=True):
        self.t = t
        self.nav = nav
        self._meta = list(features) if features is not None else []
        self.P = P if P is not None else np.zeros((NAV_DIM, NAV_DIM))
        self.capacity = capacity
        self._qf = qf_arr
        self._rho = rho_arr
        self._clamped = clamped
        self._fresh = fresh

    @property
    def features(self) -> List[Feature]:
        if not self._fresh:
            self._meta = [
                Feature(
                    f.id,
                    f.anchor_sensor,
                    self._qf[i],
                    float(self._rho[i]),
                    f.score,
                    f.hits,
                    f.misses,
                    f.last_seen,
                    f.last_in_fov,
                    f.depth_clamped or bool(self._clamped[i]),
                )
                for i, f in enumerate(self._meta)
            ]
            self._fresh = True
        return self._meta

    def meta(self):
        """Feature records for metadata-only access (qf/rho may be stale)."""
        return self._meta

    @property
    def dim(self):
        return NAV_DIM + FEAT_DIM * len(self._meta)

    @property
    def n_features(self):
        return len(self._meta)

    def feature_slice(self, index):
        start = NAV_DIM + FEAT_DIM * index
        return slice(start, start + FEAT_DIM)

    def feature_index(self, feature_id):
        for i, f in enumerate(self._meta):
            if f.id == feature_id:
                return i
        raise CapacityError(f"unknown feature id {feature_id}")

    def feature_arrays(self):
        if self._qf is None:
            self._qf = (
                np.stack([f.qf for f in self._meta]) if self._meta else np.zeros((0, 4))
            )
            self._rho = np.array([f.rho for f in self._meta])
        return self._qf, self._rho

    def clamped_mask(self):
        if self._clamped is not None:
            return self._clamped.copy()
        return np.array([f.depth_clamped for f in self._meta], dtype=bool)

    def nav_cov(self):
        return self.P[:NAV_DIM, :NAV_DIM]

    def copy(self):
        return FilterState(
            self.t, self.nav.copy(), list(self.features), self.P.copy(), self.capacity
        )


@dataclass
class UpdateInfo:
    accepted: bool
    residual: Optional[np.ndarray] = None
    innovation_cov: Optional[np.ndarray] = None
    mahalanobis_sq: Optional[float] = None
    reason: str = ""
    nav_logdet: Optional[float] = None  # of the posterior nav block


def symmetrize(p):
    return 0.5 * (p + p.T)


def check_psd(p, jitter=PSD_JITTER):
    """Cholesky with a bounded jitter retry; raises FilterHealthError."""
    if not _kernels.psd_ok(p, jitter):
        raise FilterHealthError("covariance lost positive semi-definiteness")


@lru_cache(maxsize=128)
def _update_cols(feature_index):
    start = NAV_DIM + FEAT_DIM * feature_index
    return np.array([0, 1, 2, start, start + 1, start + 2], dtype=np.int64)


@lru_cache(maxsize=8)
def _noise_vectors(sig_a, sig_w, sig_fb, sig_fd, m):
    qc = np.concatenate([np.full(3, sig_a**2), np.full(3, sig_w**2)])
    floor = np.zeros(NAV_DIM + FEAT_DIM * m)
    floor[NAV_DIM:] = np.tile([sig_fb**2, sig_fb**2, sig_fd**2], m)
    return qc, floor


def _group_by_anchor(features):
    groups = {}
    for i, f in enumerate(features):
        groups.setdefault(f.anchor_sensor, []).append(i)
    return groups


def predict(state, imu, dt, cfg, sensors, check_health=True):
    """EKF time update. `sensors` maps anchor sensor id -> RadarExtrinsics."""
    m = state.n_features
    nav_new, v_stages = propagate_nav_stages(state.nav, imu, dt)

    f_bb = nav_jacobian(state.nav, imu)
    g_nav = nav_input_jacobian(state.nav)
    phi_bb = np.eye(NAV_DIM) + f_bb * dt + 0.5 * (f_bb @ f_bb) * dt * dt

    qf_all, rho_all = state.feature_arrays()
    qf_out = np.empty((m, 4))
    rho_out = np.empty(m)
    clamped = state.clamped_mask()
    phi_fb = np.zeros((FEAT_DIM * m, NAV_DIM))
    phi_ff = np.zeros((m, FEAT_DIM, FEAT_DIM))
    g_feat = np.zeros((m, FEAT_DIM, 3))  # gyro-noise columns

    groups = _group_by_anchor(state.meta())
    for sensor_id, idxs in groups.items():
        ext = sensors[sensor_id]
        vr_stages = radar_velocity_stages(v_stages, imu, ext)
        wr = ext.r_rb @ imu.w
        if len(groups) == 1:
            idx = slice(None)
            qf, rho = qf_all, rho_all
        else:
            idx = np.asarray(idxs)
            qf = np.ascontiguousarray(qf_all[idx])
            rho = np.ascontiguousarray(rho_all[idx])

        qf_new, rho_new = _kernels.propagate_features_rk4(qf, rho, vr_stages, wr, dt)
        phi_own, phi_fb_grp, gyro_map = _kernels.predict_blocks(
            qf, rho, vr_stages[0], wr, ext.r_rb, ext.lever_arm_b, f_bb, dt
        )
        qf_out[idx] = qf_new
        rho_out[idx] = np.maximum(rho_new, RHO_MIN)
        clamped[idx] |= rho_new < RHO_MIN
        phi_ff[idx] = phi_own
        g_feat[idx] = gyro_map
        if len(groups) == 1:
            phi_fb[:] = phi_fb_grp.reshape(-1, NAV_DIM)
        else:
            rows = np.repeat(FEAT_DIM * idx, FEAT_DIM) + np.tile(
                np.arange(FEAT_DIM), len(idxs)
            )
            phi_fb[rows] = phi_fb_grp.reshape(-1, NAV_DIM)

    # process noise: IMU densities through the input Jacobian + feature floor
    g_full = np.zeros((state.dim, 6))
    g_full[:NAV_DIM] = g_nav
    if m:
        g_full[NAV_DIM:, 3:6] = g_feat.reshape(FEAT_DIM * m, 3)
    qc, floor = _noise_vectors(
        cfg.sigma_a, cfg.sigma_w, cfg.sigma_feature_bearing, cfg.sigma_feature_depth, m
    )
    new_p = _kernels.cov_predict(state.P, phi_bb, phi_fb, phi_ff, g_full, qc, floor, dt)
    if check_health:
        check_psd(new_p)
    return FilterState(
        state.t + dt, nav_new, state.meta(), new_p, state.capacity,
        qf_arr=qf_out, rho_arr=rho_out, clamped=clamped, fresh=m == 0,
    )


def update_feature(state, feature_index, measured, predicted, h_f, h_nav):
    """Sequential EKF measurement update for one matched feature.

    Residual is measurement-minus-prediction with the bearing component in
    the tangent plane of the predicted bearing.  Covariance uses the
    Joseph-form expansion P - K B^T - B K^T + K S K^T with B = P H^T.
    """
    residual = np.array(
        [
            measured.doppler - predicted.doppler,
            *bearing_boxminus(measured.bearing_q, predicted.bearing_q),
            measured.range - predicted.range,
        ]
    )
    # H is nonzero only in the dv block and this feature's own block
    cols = _update_cols(feature_index)
    h_sub = np.ascontiguousarray(np.hstack([h_nav[:, 0:3], h_f]))
    accepted, dx, p_new, s, d2, nav_logdet = _kernels.ekf_update_core(
        state.P, h_sub, cols, residual, np.ascontiguousarray(measured.cov), COND_LIMIT
    )
    if not accepted:
        return state, UpdateInfo(False, residual, s, reason="ill-conditioned innovation")

    nav = NavState(
        state.nav.v + dx[0:3],
        rot_boxplus(state.nav.q, dx[3:6]),
        state.nav.p + dx[6:9],
    )
    qf_new = rho_new = clamped = None
    fresh = state.n_features == 0
    if not fresh:
        qf_all, rho_all = state.feature_arrays()
        d_feat = dx[NAV_DIM:].reshape(-1, FEAT_DIM)
        qf_new = _kernels.retract_bearings(qf_all, np.ascontiguousarray(d_feat[:, 0:2]))
        rho_raw = rho_all + d_feat[:, 2]
        rho_new = np.maximum(rho_raw, RHO_MIN)
        clamped = state.clamped_mask() | (rho_raw < RHO_MIN)
    new_state = FilterState(
        state.t, nav, state.meta(), p_new, state.capacity,
        qf_arr=qf_new, rho_arr=rho_new, clamped=clamped, fresh=fresh,
    )
    return new_state, UpdateInfo(True, residual, s, d2, nav_logdet=nav_logdet)


def insert_feature(state, f, init_cov):
    """Append a feature with the given 3x3 block and zero cross-covariance."""
    if state.n_features >= state.capacity:
        raise CapacityError("feature capacity exceeded")
    n = state.dim
    p = np.zeros((n + FEAT_DIM, n + FEAT_DIM))
    p[:n, :n] = state.P
    p[n:, n:] = init_cov
    qf_all, rho_all = state.feature_arrays()
    return FilterState(
        state.t, state.nav.copy(), state.meta() + [f], p, state.capacity,
        qf_arr=np.vstack([qf_all, f.qf[None, :]]),
        rho_arr=np.append(rho_all, f.rho),
        clamped=np.append(state.clamped_mask(), f.depth_clamped),
        fresh=state._fresh,
    )


def remove_feature(state, feature_id):
    """Marginalize a feature out: delete its covariance rows/columns."""
    idx = state.feature_index(feature_id)
    sl = state.feature_slice(idx)
    keep = [i for i in range(state.dim) if not (sl.start <= i < sl.stop)]
    p = state.P[np.ix_(keep, keep)]
    meta = [f for f in state.meta() if f.id != feature_id]
    mask = np.ones(state.n_features, dtype=bool)
    mask[idx] = False
    qf_all, rho_all = state.feature_arrays()
    return FilterState(
        state.t, state.nav.copy(), meta, p, state.capacity,
        qf_arr=qf_all[mask], rho_arr=rho_all[mask],
        clamped=state.clamped_mask()[mask], fresh=state._fresh,
    )
