import numpy as np
import pytest

from radarslam.errors import PropagationError
from radarslam.geometry import quat_normalize
from radarslam.motion import (
    GravityModel,
    ImuSample,
    NavState,
    nav_jacobian,
    propagate_nav,
)
from radarslam.motion import _nav_rates, GRAVITY_DEFAULT

from helpers import nav_boxminus, nav_boxplus, random_imu, random_nav, rel_error

RNG = np.random.default_rng(202)


def test_level_stationary_is_fixed_point():
    nav = NavState.at_rest()
    imu = ImuSample(0.0, np.array([0.0, 0.0, 9.81]), np.zeros(3))
    out = propagate_nav(nav, imu, 0.01, GravityModel(np.array([0.0, 0.0, -9.81])))
    assert np.allclose(out.v, 0.0, atol=1e-12)
    assert np.allclose(out.q, [1, 0, 0, 0], atol=1e-12)
    assert np.allclose(out.p, 0.0, atol=1e-12)


def test_constant_acceleration_zero_gravity():
    nav = NavState.at_rest()
    imu = ImuSample(0.0, np.array([1.0, 0.0, 0.0]), np.zeros(3))
    g0 = GravityModel(np.zeros(3))
    for _ in range(100):
        nav = propagate_nav(nav, imu, 0.01, g0)
    assert np.allclose(nav.v, [1.0, 0.0, 0.0], atol=1e-9)
    assert np.allclose(nav.p, [0.5, 0.0, 0.0], atol=1e-9)


def test_constant_yaw_rate():
    nav = NavState.at_rest()
    w = np.array([0.0, 0.0, np.pi / 2])
    for _ in range(100):
        # specific force cancels gravity in the rotating body frame (level)
        imu = ImuSample(0.0, np.array([0.0, 0.0, 9.81]), w)
        nav = propagate_nav(nav, imu, 0.01)
    yaw = 2.0 * np.arctan2(nav.q[3], nav.q[0])
    assert abs(yaw - np.pi / 2) < 1e-9


def test_nonfinite_input_raises():
    nav = NavState.at_rest()
    with pytest.raises(PropagationError):
        propagate_nav(nav, ImuSample(0.0, np.array([np.nan, 0, 0]), np.zeros(3)), 0.01)
    with pytest.raises(PropagationError):
        propagate_nav(nav, ImuSample(0.0, np.zeros(3), np.zeros(3)), 0.2)


def test_speed_preserved_under_pure_rotation():
    # with gravity compensated, vdot = -w x v and the speed is conserved
    nav = NavState(np.array([2.0, 1.0, 0.5]), quat_normalize(RNG.normal(size=4)), np.zeros(3))
    w = np.array([0.3, -0.2, 0.5])
    g0 = GravityModel(np.zeros(3))
    speed0 = np.linalg.norm(nav.v)
    for _ in range(100):
        nav = propagate_nav(nav, ImuSample(0.0, np.zeros(3), w), 0.01, g0)
    assert abs(np.linalg.norm(nav.v) - speed0) < 1e-9


def _flow(nav, imu, h, nsub=8):
    """RK4 flow valid for negative h as well (test-local oracle)."""
    v, q, p = nav.v.copy(), nav.q.copy(), nav.p.copy()
    step = h / nsub
    for _ in range(nsub):
        k1 = _nav_rates(v, q, imu.a, imu.w, GRAVITY_DEFAULT)
        k2 = _nav_rates(v + 0.5 * step * k1[0], q + 0.5 * step * k1[1], imu.a, imu.w, GRAVITY_DEFAULT)
        k3 = _nav_rates(v + 0.5 * step * k2[0], q + 0.5 * step * k2[1], imu.a, imu.w, GRAVITY_DEFAULT)
        k4 = _nav_rates(v + step * k3[0], q + step * k3[1], imu.a, imu.w, GRAVITY_DEFAULT)
        v = v + step / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        q = quat_normalize(q + step / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
        p = p + step / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return NavState(v, q, p)


def fd_nav_jacobian(nav, imu, eps=1e-5, h=2e-4):
    """Central differences through the flow in both perturbation and time."""
    f = np.zeros((9, 9))
    for j in range(9):
        e = np.zeros(9)
        e[j] = eps
        cols = []
        for hh in (h, -h):
            f0 = _flow(nav, imu, hh)
            fp = _flow(nav_boxplus(nav, e), imu, hh)
            fm = _flow(nav_boxplus(nav, -e), imu, hh)
            cols.append((nav_boxminus(fp, f0) - nav_boxminus(fm, f0)) / (2 * eps))
        f[:, j] = (cols[0] - cols[1]) / (2 * h)
    return f


def test_jacobian_zero_rate_and_identity_blocks():
    nav = NavState(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0, 0, 0]), np.zeros(3))
    imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
    f = nav_jacobian(nav, imu)
    assert np.allclose(f[0:3, 0:3], 0.0)  # dvdot/dv = -[w x] with w = 0
    assert np.allclose(f[6:9, 0:3], np.eye(3))  # dpdot/dv = R = I at identity


def test_jacobian_matches_finite_differences():
    worst = 0.0
    for _ in range(100):
        nav, imu = random_nav(RNG), random_imu(RNG)
        worst = max(worst, rel_error(nav_jacobian(nav, imu), fd_nav_jacobian(nav, imu)))
    assert worst <= 1e-5
