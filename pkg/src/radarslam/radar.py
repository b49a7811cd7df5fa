"""Tightly-coupled 4D radar measurement model.

Measurement order everywhere is (doppler, bearing-tangent x2, range).  The
bearing residual lives in the 2D tangent plane at the predicted bearing;
the raw 3-vector difference is rank-deficient and would make the innovation
covariance singular.

Doppler sign convention: the raw sensor reports the range rate (negative
when closing); the filter works with its negation y_D = -v_D = p_f^T v_R.

Tight coupling means the Doppler prediction projects onto the *estimated*
feature bearing; the decoupled (ablation) variant projects onto the
measured bearing and severs the Doppler-to-feature feedback.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateGeometryError
from .features import RHO_MIN
from .geometry import (
    bearing_from_angles,
    bearing_quat,
    bearing_vector,
    nq_projection,
    skew,
)


@dataclass
class RadarDetection:
    azimuth: float  # rad
    elevation: float  # rad
    range: float  # m, > 0
    doppler: float  # m/s, raw sensor sign (negative when closing)
    snr: Optional[float] = None


@dataclass
class MeasurementNoise:
    sigma_az: float = np.deg2rad(0.5)
    sigma_el: float = np.deg2rad(0.5)
    sigma_range: float = 0.1
    sigma_doppler: float = 0.05


@dataclass
class PredictedMeasurement:
    doppler: float
    bearing: np.ndarray  # unit 3-vector in the measuring sensor frame
    range: float
    bearing_q: np.ndarray  # quaternion fixing the tangent basis for residuals
    cov: Optional[np.ndarray] = None  # 4x4, filled by the association layer


@dataclass
class Measurement:
    """A detection mapped into filter coordinates, with its 4x4 covariance."""

    doppler: float  # y_D^m = -v_D^m
    bearing: np.ndarray
    bearing_q: np.ndarray
    range: float
    cov: np.ndarray


def predict_measurement(f, vr):
    """Anchor-sensor prediction: (p_f^T v_R, p_f, rho)."""
    p = bearing_vector(f.qf)
    return PredictedMeasurement(
        doppler=float(p @ vr), bearing=p, range=f.rho, bearing_q=f.qf.copy()
    )


def detection_to_measurement(det, noise):
    """Raw detection -> measurement tuple with mapped 4x4 covariance.

    The bearing covariance is the first-order push-forward of the angular
    noise through the angle-to-bearing map, expressed in the tangent basis
    at the measured bearing.
    """
    b = bearing_from_angles(det.azimuth, det.elevation)
    q = bearing_quat(b)
    ce, se = np.cos(det.elevation), np.sin(det.elevation)
    ca, sa = np.cos(det.azimuth), np.sin(det.azimuth)
    d_az = np.array([-ce * sa, ce * ca, 0.0])
    d_el = np.array([-se * ca, -se * sa, ce])
    j = nq_projection(q).T @ np.column_stack([d_az, d_el])
    bearing_cov = j @ np.diag([noise.sigma_az**2, noise.sigma_el**2]) @ j.T
    cov = np.zeros((4, 4))
    cov[0, 0] = noise.sigma_doppler**2
    cov[1:3, 1:3] = bearing_cov
    cov[3, 3] = noise.sigma_range**2
    return Measurement(
        doppler=-det.doppler, bearing=b, bearing_q=q, range=det.range, cov=cov
    )


def detections_to_arrays(detections, noise):
    """Vectorized detection_to_measurement for gating and association.

    Returns (doppler (n,), bearings (n,3), ranges (n,), cov (n,4,4),
    bearing_quats (n,4)).
    """
    n = len(detections)
    az = np.array([d.azimuth for d in detections])
    el = np.array([d.elevation for d in detections])
    rng = np.array([d.range for d in detections])
    dop = -np.array([d.doppler for d in detections])
    ce, se = np.cos(el), np.sin(el)
    ca, sa = np.cos(az), np.sin(az)
    b = np.stack([ce * ca, ce * sa, se], axis=1)
    # canonical bearing quaternion (shortest rotation from e1), batched;
    # antipodal rows (impossible inside any FOV) fall back to a z-flip
    q = np.stack([1.0 + b[:, 0], np.zeros(n), -b[:, 2], b[:, 1]], axis=1)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    bad = qn[:, 0] < 1e-9
    if np.any(bad):
        q[bad] = [0.0, 0.0, 0.0, 1.0]
        qn[bad] = 1.0
    q /= qn
    from ._kernels import _fallback

    nq = _fallback._nq(q)
    d_az = np.stack([-ce * sa, ce * ca, np.zeros(n)], axis=1)
    d_el = np.stack([-se * ca, -se * sa, ce], axis=1)
    j_az = np.einsum("nij,ni->nj", nq, d_az)
    j_el = np.einsum("nij,ni->nj", nq, d_el)
    cov = np.zeros((n, 4, 4))
    cov[:, 0, 0] = noise.sigma_doppler**2
    cov[:, 1:3, 1:3] = noise.sigma_az**2 * np.einsum(
        "ni,nj->nij", j_az, j_az
    ) + noise.sigma_el**2 * np.einsum("ni,nj->nij", j_el, j_el)
    cov[:, 3, 3] = noise.sigma_range**2
    return dop, b, rng, cov, q


def measurement_from_arrays(arrays, i):
    """Measurement view of row i of a detections_to_arrays result."""
    dop, b, rng, cov, q = arrays
    return Measurement(
        doppler=float(dop[i]), bearing=b[i], bearing_q=q[i], range=float(rng[i]), cov=cov[i]
    )


def measurement_rows(qf, vr, ext, doppler_coupling=True, measured_bearing=None):
    """Anchor-sensor H blocks from a bearing quaternion: (H_f 4x3, H_nav 4x9).

    Rows (doppler, bearing x2, range); feature error columns [db, drho];
    nav columns [dv, dtheta, dp].  Only the Doppler row touches the nav
    state (through v_R); with coupling disabled it also leaves the feature
    untouched and uses the measured bearing as projection direction.
    """
    p = bearing_vector(qf)
    n = nq_projection(qf)
    h_f = np.zeros((4, 3))
    h_nav = np.zeros((4, 9))
    if doppler_coupling:
        h_f[0, 0:2] = -vr @ skew(p) @ n
        h_nav[0, 0:3] = p @ ext.r_rb
    else:
        h_nav[0, 0:3] = measured_bearing @ ext.r_rb
    h_f[1:3, 0:2] = np.eye(2)
    h_f[3, 2] = 1.0
    return h_f, h_nav


def measurement_jacobians(f, vr, ext, doppler_coupling=True, measured_bearing=None):
    """measurement_rows for a Feature record."""
    return measurement_rows(f.qf, vr, ext, doppler_coupling, measured_bearing)


def transform_feature_position(f, ext_from, ext_to):
    """Feature position in another sensor's frame (no Jacobian).

    p2 = R_to (R_from^T (p_f rho) + lever_from - lever_to).  Raises when the
    feature lands inside the target sensor's near field.
    """
    p = bearing_vector(f.qf)
    r21 = ext_to.r_rb @ ext_from.r_rb.T
    p2 = r21 @ (p * f.rho) + ext_to.r_rb @ (ext_from.lever_arm_b - ext_to.lever_arm_b)
    if np.linalg.norm(p2) < RHO_MIN:
        raise DegenerateGeometryError("feature too close to target sensor")
    return p2, p, r21


def transform_feature_to_sensor(f, ext_from, ext_to):
    """Feature position in another sensor's frame plus its 3x3 Jacobian.

    The Jacobian is wrt the feature error [db, drho].
    """
    p2, p, r21 = transform_feature_position(f, ext_from, ext_to)
    jac = np.empty((3, 3))
    jac[:, 0:2] = -f.rho * r21 @ skew(p) @ nq_projection(f.qf)
    jac[:, 2] = r21 @ p
    return p2, jac


def cross_doppler(p2, vr2):
    """Radial velocity prediction in the target sensor frame."""
    nrm = np.linalg.norm(p2)
    if nrm <= 0.0:
        raise DegenerateGeometryError("zero-length position has no radial direction")
    return float(p2 @ vr2) / nrm


def predict_measurement_cross(f, ext_from, ext_to, vr2):
    """Prediction of a feature observed by a sensor other than its anchor."""
    p2, _, _ = transform_feature_position(f, ext_from, ext_to)
    rng = float(np.linalg.norm(p2))
    b2 = p2 / rng
    return PredictedMeasurement(
        doppler=float(b2 @ vr2), bearing=b2, range=rng, bearing_q=bearing_quat(b2)
    )


def cross_h_from_parts(
    qf, rho, p_anchor, b2, rng, r21, ext_to, vr2, doppler_coupling=True, measured_bearing=None
):
    """Cross-sensor H blocks from a precomputed transform.

    qf/rho/p_anchor describe the feature in its anchor frame; b2/rng/r21 come
    from transform_feature_position in the target frame.
    """
    jac = np.empty((3, 3))
    jac[:, 0:2] = -rho * r21 @ skew(p_anchor) @ nq_projection(qf)
    jac[:, 2] = r21 @ p_anchor
    n2 = nq_projection(bearing_quat(b2))
    h_f = np.zeros((4, 3))
    h_nav = np.zeros((4, 9))
    if doppler_coupling:
        h_f[0, :] = (vr2 - (vr2 @ b2) * b2) @ jac / rng
        h_nav[0, 0:3] = b2 @ ext_to.r_rb
    else:
        h_nav[0, 0:3] = measured_bearing @ ext_to.r_rb
    h_f[1:3, :] = n2.T @ skew(b2) @ jac / rng
    h_f[3, :] = b2 @ jac
    return h_f, h_nav


def measurement_jacobians_cross(
    f, ext_from, ext_to, vr2, doppler_coupling=True, measured_bearing=None
):
    """Cross-sensor H blocks, chained through the extrinsic transform."""
    p2, p, r21 = transform_feature_position(f, ext_from, ext_to)
    rng = float(np.linalg.norm(p2))
    return cross_h_from_parts(
        f.qf, f.rho, p, p2 / rng, rng, r21, ext_to, vr2, doppler_coupling, measured_bearing
    )
