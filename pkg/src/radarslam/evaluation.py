"""Trajectory accuracy metrics: APE, RPE, RRE, end-pose and trajectory RMSE.

Both trajectories are resampled to a fixed rate by nearest-timestamp
association (50 ms window).  Relative metrics compare body-frame motion
increments between consecutive resampled poses, which makes them invariant
to any global rigid transform of the estimate; APE is computed after a
rigid (no scale) least-squares alignment.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import DatasetError, DegenerateGeometryError
from .geometry import quat_to_rotmat


@dataclass
class MetricReport:
    ape_rmse: float
    rpe_rmse: float
    rre_rmse_deg: float
    end_pose_error: float
    trajectory_rmse: float
    n_samples: int
    rpe_series: np.ndarray = field(repr=False, default=None)
    rre_series_deg: np.ndarray = field(repr=False, default=None)
    ape_series: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {
            "ape_rmse": self.ape_rmse,
            "rpe_rmse": self.rpe_rmse,
            "rre_rmse_deg": self.rre_rmse_deg,
            "end_pose_error": self.end_pose_error,
            "trajectory_rmse": self.trajectory_rmse,
            "n_samples": self.n_samples,
        }


def align_umeyama(est_p, ref_p):
    """Rigid SE(3) alignment minimizing sum ||R p_est + t - p_ref||^2.

    Returns (R, t).  No scale: metric sensors.  Raises for degenerate
    (fewer than 3 points or collinear) geometry.
    """
    est_p = np.asarray(est_p, dtype=float)
    ref_p = np.asarray(ref_p, dtype=float)
    if est_p.shape[0] < 3:
        raise DegenerateGeometryError("alignment needs at least 3 positions")
    mu_e = est_p.mean(axis=0)
    mu_r = ref_p.mean(axis=0)
    cov = (ref_p - mu_r).T @ (est_p - mu_e) / est_p.shape[0]
    u, s, vt = np.linalg.svd(cov)
    spread = np.linalg.norm(est_p - mu_e, axis=1).max()
    if spread < 1e-12 or s[1] < 1e-12 * max(s[0], 1e-30):
        raise DegenerateGeometryError("degenerate (coincident/collinear) point set")
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    t = mu_r - r @ mu_e
    return r, t


def _associate_times(t_a, t_b, window=0.05):
    """Nearest-timestamp pairing of two sorted stamp arrays."""
    idx_b = np.searchsorted(t_b, t_a)
    pairs = []
    for i, ti in enumerate(t_a):
        best, best_dt = -1, window
        for j in (idx_b[i] - 1, idx_b[i]):
            if 0 <= j < len(t_b) and abs(t_b[j] - ti) <= best_dt:
                best, best_dt = j, abs(t_b[j] - ti)
        if best >= 0:
            pairs.append((i, best))
    return pairs


def _resample(t, stamps):
    """Indices of the trajectory samples nearest to the requested stamps."""
    idx = np.searchsorted(t, stamps)
    out = []
    for i, s in enumerate(stamps):
        cands = [j for j in (idx[i] - 1, idx[i]) if 0 <= j < len(t)]
        out.append(min(cands, key=lambda j: abs(t[j] - s)))
    return np.array(out, dtype=int)


def compute_metrics(est, ref, sample_rate=2.0, association_window=0.05):
    """MetricReport for (t, p, q) trajectory tuples at the given rate."""
    t_e, p_e, q_e = est
    t_r, p_r, q_r = ref
    lo = max(t_e[0], t_r[0])
    hi = min(t_e[-1], t_r[-1])
    if hi <= lo:
        raise DatasetError("trajectories do not overlap in time")
    stamps = np.arange(lo, hi + 1e-9, 1.0 / sample_rate)
    ie = _resample(t_e, stamps)
    ir = _resample(t_r, stamps)
    keep = np.abs(t_e[ie] - t_r[ir]) <= association_window
    ie, ir = ie[keep], ir[keep]
    if len(ie) < 2:
        raise DatasetError("not enough associated samples for relative metrics")

    pe, pr = p_e[ie], p_r[ir]
    re = [quat_to_rotmat(q) for q in q_e[ie]]
    rr = [quat_to_rotmat(q) for q in q_r[ir]]

    # relative metrics over consecutive resampled pairs, body-frame deltas
    rpe_sq, rre_sq, rpe_series, rre_series = [], [], [], []
    for k in range(len(ie) - 1):
        dp_e = re[k].T @ (pe[k + 1] - pe[k])
        dp_r = rr[k].T @ (pr[k + 1] - pr[k])
        err_p = np.linalg.norm(dp_e - dp_r)
        dr = (re[k].T @ re[k + 1]) @ (rr[k].T @ rr[k + 1]).T
        ang = math.degrees(_rot_angle(dr))
        rpe_sq.append(err_p**2)
        rre_sq.append(ang**2)
        rpe_series.append(err_p)
        rre_series.append(ang)

    if np.array_equal(pe, pr):
        # alignment cannot improve a zero-residual fit; identity is optimal
        ape_series = np.zeros(len(ie))
    else:
        try:
            r_al, t_al = align_umeyama(pe, pr)
        except DegenerateGeometryError:
            # collinear path: rotation unobservable, best translation only
            r_al, t_al = np.eye(3), pr.mean(axis=0) - pe.mean(axis=0)
        ape_res = (pe @ r_al.T + t_al) - pr
        ape_series = np.linalg.norm(ape_res, axis=1)

    return MetricReport(
        ape_rmse=float(np.sqrt(np.mean(ape_series**2))),
        rpe_rmse=float(np.sqrt(np.mean(rpe_sq))),
        rre_rmse_deg=float(np.sqrt(np.mean(rre_sq))),
        end_pose_error=float(np.linalg.norm(pe[-1] - pr[-1])),
        trajectory_rmse=float(np.sqrt(np.mean(np.sum((pe - pr) ** 2, axis=1)))),
        n_samples=len(ie),
        rpe_series=np.array(rpe_series),
        rre_series_deg=np.array(rre_series),
        ape_series=ape_series,
    )


def _rot_angle(r):
    # atan2 of the skew part against the trace: exact zero for an exactly
    # symmetric input and well-conditioned near both 0 and pi
    s = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return math.atan2(np.linalg.norm(s), 0.5 * (np.trace(r) - 1.0))


def nearest_rank_percentile(values, pct):
    """Smallest value with cumulative fraction >= pct (pct in (0, 100])."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def aggregate_runs(reports: List[MetricReport]) -> Dict[str, Dict[str, float]]:
    """Per-metric 63rd / 95th nearest-rank percentiles and maximum."""
    if not reports:
        raise ValueError("no reports to aggregate")
    table = {}
    for key in ("ape_rmse", "rpe_rmse", "rre_rmse_deg", "end_pose_error", "trajectory_rmse"):
        vals = [getattr(r, key) for r in reports]
        table[key] = {
            "p63": nearest_rank_percentile(vals, 63.0),
            "p95": nearest_rank_percentile(vals, 95.0),
            "max": float(max(vals)),
        }
    return table
