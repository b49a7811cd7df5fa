"""IMU mechanization: body-velocity strapdown propagation and its Jacobians.

State is (v_B, q_B, p_B): velocity in the body frame, attitude body->world,
position in the world frame.  Inputs are specific force and angular rate in
the body frame, held constant over each integration interval (ZOH).
The minimal error state is [dv, dtheta, dp] with a left (global)
rotation-vector attitude error.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import PropagationError
from .geometry import cross3, quat_normalize, quat_to_rotmat, skew

GRAVITY_DEFAULT = np.array([0.0, 0.0, -9.81])


@dataclass
class NavState:
    v: np.ndarray  # m/s, body frame
    q: np.ndarray  # unit quaternion, body -> world
    p: np.ndarray  # m, world frame

    @staticmethod
    def at_rest():
        return NavState(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def copy(self):
        return NavState(self.v.copy(), self.q.copy(), self.p.copy())


@dataclass
class ImuSample:
    t: float
    a: np.ndarray  # specific force, m/s^2, body frame
    w: np.ndarray  # angular rate, rad/s, body frame


@dataclass
class GravityModel:
    g_world: np.ndarray = field(default_factory=lambda: GRAVITY_DEFAULT.copy())


def _check_finite(nav, imu):
    for name, value in (("v", nav.v), ("q", nav.q), ("p", nav.p), ("a", imu.a), ("w", imu.w)):
        if not np.all(np.isfinite(value)):
            raise PropagationError(f"non-finite {name} in propagation input", field=name)


def _nav_rates(v, q, a, w, g):
    r = quat_to_rotmat(q)
    vdot = a + r.T @ g - cross3(w, v)
    qdot = 0.5 * np.array(
        [
            -q[1] * w[0] - q[2] * w[1] - q[3] * w[2],
            q[0] * w[0] + q[2] * w[2] - q[3] * w[1],
            q[0] * w[1] - q[1] * w[2] + q[3] * w[0],
            q[0] * w[2] + q[1] * w[1] - q[2] * w[0],
        ]
    )
    pdot = r @ v
    return vdot, qdot, pdot


def propagate_nav_stages(nav, imu, dt, gravity=None):
    """RK4 step; also returns the four stage velocities.

    The stage velocities are what a rigidly attached sensor sees during the
    step, so feature propagation can be co-integrated consistently.
    """
    from . import _kernels

    g = GRAVITY_DEFAULT if gravity is None else gravity.g_world
    _check_finite(nav, imu)
    if not (0.0 < dt <= 0.1):
        raise PropagationError(f"dt={dt} outside (0, 0.1]", field="dt")
    v, q, p, stages = _kernels.nav_rk4(
        np.ascontiguousarray(nav.v, dtype=float),
        np.ascontiguousarray(nav.q, dtype=float),
        np.ascontiguousarray(nav.p, dtype=float),
        np.ascontiguousarray(imu.a, dtype=float),
        np.ascontiguousarray(imu.w, dtype=float),
        np.ascontiguousarray(g, dtype=float),
        dt,
    )
    return NavState(v, quat_normalize(q), p), stages


def propagate_nav(nav, imu, dt, gravity=None):
    """Zero-order-hold RK4 integration of the strapdown equations."""
    return propagate_nav_stages(nav, imu, dt, gravity)[0]


def nav_jacobian(nav, imu, gravity=None):
    """Continuous-time Jacobian F of the error dynamics, 9x9.

    Error order [dv, dtheta, dp]; the dtheta row is zero because a left
    perturbation commutes with body-rate integration.
    """
    g = GRAVITY_DEFAULT if gravity is None else gravity.g_world
    r = quat_to_rotmat(nav.q)
    f = np.zeros((9, 9))
    f[0:3, 0:3] = -skew(imu.w)
    f[0:3, 3:6] = r.T @ skew(g)
    f[6:9, 0:3] = r
    f[6:9, 3:6] = -skew(r @ nav.v)
    return f


def nav_input_jacobian(nav):
    """Jacobian of the error dynamics wrt input noise [n_a, n_w], 9x6."""
    g = np.zeros((9, 6))
    g[0:3, 0:3] = np.eye(3)
    g[0:3, 3:6] = skew(nav.v)
    g[3:6, 3:6] = quat_to_rotmat(nav.q)
    return g
