"""Relative feature motion on the unit sphere and its Jacobians.

A feature is anchored in the radar frame where it was first detected:
bearing quaternion q_f (rotating e1 onto the bearing) plus depth rho.  Its
relative dynamics are driven by the anchor sensor's frame velocity and
angular rate, obtained from the nav state through the extrinsics.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .geometry import cross3, skew

RHO_MIN = 0.5  # m, radar near-field limit; keeps 1/rho bounded


@dataclass
class Feature:
    id: int
    anchor_sensor: str
    qf: np.ndarray  # bearing quaternion in the anchor radar frame
    rho: float  # depth, m
    score: float = 0.0  # accumulated information contribution, nats
    hits: int = 0
    misses: int = 0
    last_seen: float = 0.0
    last_in_fov: float = 0.0
    depth_clamped: bool = False


@dataclass
class RadarExtrinsics:
    r_rb: np.ndarray  # rotation body -> radar
    lever_arm_b: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m, body frame

    def __post_init__(self):
        self.r_rb = np.ascontiguousarray(self.r_rb, dtype=float)
        self.lever_arm_b = np.ascontiguousarray(self.lever_arm_b, dtype=float)


def radar_frame_motion(nav, imu, ext):
    """Velocity and angular rate of the radar frame, in the radar frame.

    v_R = R_rb (v_B + w_B x lever),  w_R = R_rb w_B.
    """
    vr = ext.r_rb @ (nav.v + cross3(imu.w, ext.lever_arm_b))
    wr = ext.r_rb @ imu.w
    return vr, wr


def radar_velocity_stages(v_stages, imu, ext):
    """Map the four nav RK4 stage velocities into the radar frame."""
    lever_rate = cross3(imu.w, ext.lever_arm_b)
    return (v_stages + lever_rate) @ ext.r_rb.T


def propagate_feature(f, vr, wr, dt):
    """RK4 step of the feature dynamics under constant radar-frame motion.

    Depth is clamped at RHO_MIN; a clamped feature is flagged for pruning
    review via depth_clamped.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    vr_stages = np.ascontiguousarray(
        np.broadcast_to(np.asarray(vr, dtype=float), (4, 3))
    )
    qf, rho = _kernels.propagate_features_rk4(
        np.ascontiguousarray(f.qf[None, :]), np.array([f.rho]), vr_stages,
        np.ascontiguousarray(wr, dtype=float), dt
    )
    clamped = rho[0] < RHO_MIN
    return replace(
        f,
        qf=qf[0],
        rho=max(float(rho[0]), RHO_MIN),
        depth_clamped=f.depth_clamped or bool(clamped),
    )


def feature_jacobians(f, vr, wr, ext):
    """Continuous-time error Jacobians (F_f 3x3, F_nav 3x9).

    F_f is wrt the feature's own error [db, drho]; F_nav chains through the
    radar-frame velocity to the nav error [dv, dtheta, dp].  Only the dv
    block is nonzero: v_R depends on neither attitude nor position, and the
    angular rate is an input rather than a state.
    """
    f_own, f_vr, _ = _kernels.feature_state_blocks(
        f.qf[None, :], np.array([f.rho]), np.asarray(vr, dtype=float), np.asarray(wr, dtype=float)
    )
    f_nav = np.zeros((3, 9))
    f_nav[:, 0:3] = f_vr[0] @ ext.r_rb
    return f_own[0], f_nav


def feature_input_jacobian(f, vr, wr, ext):
    """Jacobian of the feature error rates wrt gyro noise, 3x3.

    Gyro noise enters both directly (w_R) and through the lever-arm term of
    v_R; accel noise does not reach the feature dynamics.
    """
    _, f_vr, f_wr = _kernels.feature_state_blocks(
        f.qf[None, :], np.array([f.rho]), np.asarray(vr, dtype=float), np.asarray(wr, dtype=float)
    )
    return f_wr[0] @ ext.r_rb - f_vr[0] @ ext.r_rb @ skew(ext.lever_arm_b)
