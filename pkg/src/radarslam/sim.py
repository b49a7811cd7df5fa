"""Synthetic ground truth: closed-form trajectories, ideal IMU, radar scans.

Every trajectory kind provides exact (position, velocity, acceleration,
yaw, yaw rate) as functions of time, so the sampled ground truth is
kinematically consistent to machine precision and the synthesized IMU can
be evaluated at interval midpoints (which is what makes zero-order-hold
integration of it reproduce the truth almost exactly).

Scan epochs are quantized onto the IMU grid: real radars are asynchronous,
but the replay deliberately ignores sub-interval latency, so an unaligned
epoch would inject a pseudo-error of up to one IMU interval of motion into
every noise-free experiment.

All randomness (landmark placement, movers, measurement noise, detection
order) flows from the single scenario seed.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .ekf import ProcessNoiseConfig
from .geometry import angles_from_bearing, exp_so3
from .motion import GRAVITY_DEFAULT, ImuSample


@dataclass
class ScenarioSpec:
    kind: str = "parking"  # straight | circle | figure8 | parking
    duration: float = 15.0
    speed: float = 2.0  # straight/circle: constant; figure8/parking: peak
    radius: float = 10.0  # circle
    scale: float = 8.0  # figure8
    waypoints: Optional[List[List[float]]] = None  # parking Bezier control points
    imu_rate: float = 100.0
    landmark_count: int = 200
    landmark_box: List[float] = field(
        default_factory=lambda: [-10.0, 30.0, -20.0, 20.0, -2.0, 2.0]
    )
    clearance: float = 1.0  # m, no landmarks this close to the path
    mover_fraction: float = 0.0
    mover_speed: List[float] = field(default_factory=lambda: [0.5, 2.0])
    sensors: list = field(default_factory=list)  # SensorConfig roster
    imu_noise: bool = False
    radar_noise: bool = False
    process_noise: ProcessNoiseConfig = field(default_factory=ProcessNoiseConfig)
    seed: int = 0


@dataclass
class GroundTruth:
    t: np.ndarray
    p: np.ndarray  # (n,3) world position
    q: np.ndarray  # (n,4) attitude body->world
    v_body: np.ndarray  # (n,3)
    a_body: np.ndarray  # (n,3) body-frame velocity derivative
    w_body: np.ndarray  # (n,3)
    landmark_pos: np.ndarray  # (L,3) at t=0
    landmark_vel: np.ndarray  # (L,3)
    model: object = None
    imu_rate: float = 100.0

    def landmark_positions(self, t):
        return self.landmark_pos + t * self.landmark_vel


class PlanarPath:
    """Base: subclasses supply world position derivatives and heading."""

    def plane_state(self, t):
        raise NotImplementedError

    def state(self, t):
        """(p, pdot, yaw, yawrate, v_body, a_body, w_body) at time t."""
        p, pdot, pddot, yaw, yawrate = self.plane_state(t)
        c, s = math.cos(yaw), math.sin(yaw)
        v_body = np.array([c * pdot[0] + s * pdot[1], -s * pdot[0] + c * pdot[1], pdot[2]])
        rt_pddot = np.array(
            [c * pddot[0] + s * pddot[1], -s * pddot[0] + c * pddot[1], pddot[2]]
        )
        w_body = np.array([0.0, 0.0, yawrate])
        a_body = rt_pddot - np.cross(w_body, v_body)
        return p, pdot, yaw, yawrate, v_body, a_body, w_body


class StraightPath(PlanarPath):
    def __init__(self, speed):
        self.speed = speed

    def plane_state(self, t):
        v = self.speed
        return (
            np.array([v * t, 0.0, 0.0]),
            np.array([v, 0.0, 0.0]),
            np.zeros(3),
            0.0,
            0.0,
        )


class CirclePath(PlanarPath):
    def __init__(self, radius, speed):
        self.r = radius
        self.speed = speed
        self.thdot = speed / radius

    def plane_state(self, t):
        th = self.thdot * t
        r, v = self.r, self.speed
        p = np.array([r * math.sin(th), r * (1.0 - math.cos(th)), 0.0])
        pdot = np.array([v * math.cos(th), v * math.sin(th), 0.0])
        pddot = np.array([-v * self.thdot * math.sin(th), v * self.thdot * math.cos(th), 0.0])
        return p, pdot, pddot, th, self.thdot


class FigureEightPath(PlanarPath):
    """Lemniscate x = A sin(wt), y = (A/2) sin(2wt); peak speed = `speed`."""

    def __init__(self, scale, speed):
        self.a = scale
        self.w = speed / (scale * math.sqrt(2.0))

    def plane_state(self, t):
        a, w = self.a, self.w
        wt = w * t
        p = np.array([a * math.sin(wt), 0.5 * a * math.sin(2 * wt), 0.0])
        pdot = a * w * np.array([math.cos(wt), math.cos(2 * wt), 0.0])
        pddot = a * w * w * np.array([-math.sin(wt), -2.0 * math.sin(2 * wt), 0.0])
        yaw = math.atan2(pdot[1], pdot[0])
        sp2 = pdot[0] ** 2 + pdot[1] ** 2
        yawrate = (pdot[0] * pddot[1] - pdot[1] * pddot[0]) / sp2
        return p, pdot, pddot, yaw, yawrate


class ParkingPath(PlanarPath):
    """Bezier control polygon traversed with a quintic rest-to-rest profile.

    Heading follows the curve tangent, which stays defined at the standstill
    endpoints because the Bezier derivative never vanishes for a
    non-degenerate control polygon.
    """

    DEFAULT_WAYPOINTS = [
        [0.0, 0.0, 0.0],
        [5.0, 0.0, 0.0],
        [8.5, 0.2, 0.0],
        [10.5, 2.8, 0.0],
        [10.8, 5.5, 0.0],
    ]

    def __init__(self, waypoints, max_speed, duration):
        pts = np.asarray(waypoints if waypoints is not None else self.DEFAULT_WAYPOINTS, dtype=float)
        if pts.shape[0] < 2:
            raise ValueError("parking path needs at least two control points")
        self.ctrl = pts
        self.d1 = (pts.shape[0] - 1) * np.diff(pts, axis=0)
        self.d2 = (self.d1.shape[0] - 1) * np.diff(self.d1, axis=0) if self.d1.shape[0] > 1 else np.zeros((1, 3))
        self.duration = float(duration)
        # rest-to-rest quintic: sdot peaks at 1.875/T; rescale T if too fast
        vmax = 1.875 * self._max_speed_u() / self.duration
        if vmax > max_speed:
            self.duration *= vmax / max_speed

    def _max_speed_u(self):
        u = np.linspace(0.0, 1.0, 401)
        return max(np.linalg.norm(self._bezier(self.d1, x)) for x in u)

    @staticmethod
    def _bezier(ctrl, u):
        pts = ctrl.copy()
        while pts.shape[0] > 1:
            pts = (1.0 - u) * pts[:-1] + u * pts[1:]
        return pts[0]

    def plane_state(self, t):
        tau = min(max(t / self.duration, 0.0), 1.0)
        u = tau**3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
        udot = 30.0 * tau * tau * (1.0 - tau) ** 2 / self.duration
        uddot = (60.0 * tau - 180.0 * tau**2 + 120.0 * tau**3) / self.duration**2
        p = self._bezier(self.ctrl, u)
        b1 = self._bezier(self.d1, u)
        b2 = self._bezier(self.d2, u) if self.d2.shape[0] else np.zeros(3)
        pdot = b1 * udot
        pddot = b2 * udot * udot + b1 * uddot
        yaw = math.atan2(b1[1], b1[0])
        sp2 = b1[0] ** 2 + b1[1] ** 2
        yawrate = (b1[0] * b2[1] - b1[1] * b2[0]) / sp2 * udot
        return p, pdot, pddot, yaw, yawrate


def make_path(spec):
    if spec.kind == "straight":
        return StraightPath(spec.speed)
    if spec.kind == "circle":
        return CirclePath(spec.radius, spec.speed)
    if spec.kind == "figure8":
        return FigureEightPath(spec.scale, spec.speed)
    if spec.kind == "parking":
        if spec.speed > 3.0:
            raise ValueError("parking maneuvers are limited to 3 m/s")
        return ParkingPath(spec.waypoints, spec.speed, spec.duration)
    raise ValueError(f"unknown trajectory kind {spec.kind!r}")


def _sample_landmarks(spec, path, rng):
    lo = np.array(spec.landmark_box[0::2], dtype=float)
    hi = np.array(spec.landmark_box[1::2], dtype=float)
    probe_t = np.linspace(0.0, spec.duration, 200)
    track = np.stack([path.plane_state(t)[0] for t in probe_t])
    pos = np.empty((spec.landmark_count, 3))
    count = 0
    while count < spec.landmark_count:
        cand = lo + rng.random(3) * (hi - lo)
        if np.min(np.linalg.norm(track[:, :2] - cand[:2], axis=1)) < spec.clearance:
            continue
        pos[count] = cand
        count += 1
    vel = np.zeros_like(pos)
    n_movers = int(round(spec.mover_fraction * spec.landmark_count))
    if n_movers:
        idx = rng.choice(spec.landmark_count, size=n_movers, replace=False)
        speed = rng.uniform(spec.mover_speed[0], spec.mover_speed[1], size=n_movers)
        heading = rng.uniform(0.0, 2.0 * math.pi, size=n_movers)
        vel[idx, 0] = speed * np.cos(heading)
        vel[idx, 1] = speed * np.sin(heading)
    return pos, vel


def generate_trajectory(spec):
    """Sample the closed-form trajectory at the IMU rate."""
    path = make_path(spec)
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * spec.imu_rate)) + 1
    t = np.arange(n) / spec.imu_rate
    p = np.empty((n, 3))
    q = np.empty((n, 4))
    v_body = np.empty((n, 3))
    a_body = np.empty((n, 3))
    w_body = np.empty((n, 3))
    for i, ti in enumerate(t):
        pi, _, yaw, _, vb, ab, wb = path.state(ti)
        p[i] = pi
        q[i] = exp_so3(np.array([0.0, 0.0, yaw]))
        v_body[i] = vb
        a_body[i] = ab
        w_body[i] = wb
    lm_pos, lm_vel = _sample_landmarks(spec, path, rng)
    return GroundTruth(t, p, q, v_body, a_body, w_body, lm_pos, lm_vel, path, spec.imu_rate)


def synthesize_imu(gt, gravity=None, noise=None, seed=0, sampling="midpoint"):
    """Ideal IMU stream: a = vdot_body + w x v - R^T g, w = body rate.

    With sampling="midpoint" each row carries the interval-midpoint value,
    the best constant stand-in for zero-order-hold integration; "sample"
    uses the instantaneous value at the row time.
    """
    g = GRAVITY_DEFAULT if gravity is None else np.asarray(gravity)
    rng = np.random.default_rng(seed ^ 0x494D55)
    dt = 1.0 / gt.imu_rate
    samples = []
    n = len(gt.t) - 1
    for k in range(n):
        tk = gt.t[k]
        te = tk + 0.5 * dt if sampling == "midpoint" else tk
        _, _, yaw, _, vb, ab, wb = gt.model.state(te)
        c, s = math.cos(yaw), math.sin(yaw)
        g_body = np.array([c * g[0] + s * g[1], -s * g[0] + c * g[1], g[2]])
        a_meas = ab + np.cross(wb, vb) - g_body
        w_meas = wb.copy()
        if noise is not None:
            a_meas = a_meas + rng.normal(0.0, noise.sigma_a * math.sqrt(gt.imu_rate), 3)
            w_meas = w_meas + rng.normal(0.0, noise.sigma_w * math.sqrt(gt.imu_rate), 3)
        samples.append(ImuSample(float(tk), a_meas, w_meas))
    return samples


@dataclass
class SimScan:
    t: float
    sensor_id: str
    detections: list  # RadarDetection
    labels: np.ndarray  # landmark index per detection
    moving: np.ndarray  # bool per detection
    mismatch: np.ndarray = None  # |radial speed error| vs a static world, m/s


def render_scans(gt, sensors, noise=False, seed=0):
    """Render per-sensor detection scans with FOV/range limits.

    Returns a time-sorted list of SimScan.  Epochs are quantized to the IMU
    grid (see module docstring).
    """
    from .radar import RadarDetection

    rng = np.random.default_rng(seed ^ 0x52414441)
    dt_imu = 1.0 / gt.imu_rate
    t_end = gt.t[-1]
    scans = []
    for sensor in sensors:
        period = 1.0 / sensor.rate
        epochs = np.arange(sensor.phase, t_end + 1e-9, period)
        epochs = np.unique(np.round(epochs / dt_imu).astype(int)) * dt_imu
        for te in epochs:
            p_veh, _, yaw, _, vb, _, wb = gt.model.state(te)
            c, s = math.cos(yaw), math.sin(yaw)
            r_bw = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
            ext = sensor.extrinsics
            lm_world = gt.landmark_positions(te)
            rel_body = (lm_world - p_veh) @ r_bw.T - ext.lever_arm_b
            rel_radar = rel_body @ ext.r_rb.T
            rngs = np.linalg.norm(rel_radar, axis=1)
            vr = ext.r_rb @ (vb + np.cross(wb, ext.lever_arm_b))
            # sensor velocity relative to each landmark, in the radar frame
            lm_vel_radar = gt.landmark_vel @ (ext.r_rb @ r_bw).T
            dets, labels, moving, mism = [], [], [], []
            for j in np.nonzero((rngs > 1e-6))[0]:
                b = rel_radar[j] / rngs[j]
                az, el = angles_from_bearing(b)
                if not (
                    abs(az) <= sensor.fov_az
                    and abs(el) <= sensor.fov_el
                    and sensor.range_min <= rngs[j] <= sensor.range_max
                ):
                    continue
                doppler = -float(b @ (vr - lm_vel_radar[j]))
                az_m, el_m, rng_m, dop_m = az, el, rngs[j], doppler
                if noise:
                    az_m += rng.normal(0.0, sensor.noise.sigma_az)
                    el_m += rng.normal(0.0, sensor.noise.sigma_el)
                    rng_m += rng.normal(0.0, sensor.noise.sigma_range)
                    dop_m += rng.normal(0.0, sensor.noise.sigma_doppler)
                dets.append(RadarDetection(float(az_m), float(el_m), float(rng_m), float(dop_m)))
                labels.append(j)
                moving.append(bool(np.any(gt.landmark_vel[j] != 0.0)))
                mism.append(abs(float(b @ lm_vel_radar[j])))
            order = rng.permutation(len(dets))
            scans.append(
                SimScan(
                    float(te),
                    sensor.id,
                    [dets[i] for i in order],
                    np.array([labels[i] for i in order], dtype=int),
                    np.array([moving[i] for i in order], dtype=bool),
                    np.array([mism[i] for i in order]),
                )
            )
    scans.sort(key=lambda sc: (sc.t, sc.sensor_id))
    return scans


def generate_dataset(spec):
    """Full synthetic dataset: (ground truth, imu samples, scans)."""
    gt = generate_trajectory(spec)
    imu = synthesize_imu(
        gt,
        noise=spec.process_noise if spec.imu_noise else None,
        seed=spec.seed,
    )
    scans = render_scans(gt, spec.sensors, noise=spec.radar_noise, seed=spec.seed)
    return gt, imu, scans


def run_config_for(spec, gt):
    """RunConfig matched to a scenario: sensors, noise, and the true initial
    state (trajectories that start in motion would otherwise fight an
    at-rest prior)."""
    from .config import RunConfig
    from .motion import NavState

    return RunConfig(
        sensors={s.id: s for s in spec.sensors},
        process_noise=spec.process_noise,
        initial_nav=NavState(gt.v_body[0].copy(), gt.q[0].copy(), gt.p[0].copy()),
        seed=spec.seed,
    )


def write_dataset(out_dir, gt, imu, scans, spec=None):
    """Write the canonical CSV files (imu, per-sensor radar, gt, landmarks)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "imu.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,ax,ay,az,wx,wy,wz\n")
        for s in imu:
            fh.write(",".join(f"{x:.17g}" for x in [s.t, *s.a, *s.w]) + "\n")
    by_sensor = {}
    for sc in scans:
        by_sensor.setdefault(sc.sensor_id, []).append(sc)
    for sid, slist in sorted(by_sensor.items()):
        path = os.path.join(out_dir, f"radar_{sid}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,azimuth,elevation,range,doppler\n")
            for sc in slist:
                for d in sc.detections:
                    fh.write(
                        ",".join(
                            f"{x:.17g}"
                            for x in [sc.t, d.azimuth, d.elevation, d.range, d.doppler]
                        )
                        + "\n"
                    )
    with open(os.path.join(out_dir, "gt.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n")
        for i in range(len(gt.t)):
            fh.write(
                ",".join(f"{x:.17g}" for x in [gt.t[i], *gt.p[i], *gt.q[i], *gt.v_body[i]])
                + "\n"
            )
    with open(os.path.join(out_dir, "landmarks.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,x,y,z,vx,vy,vz\n")
        for j in range(len(gt.landmark_pos)):
            fh.write(
                ",".join(
                    f"{x:.17g}" for x in [j, *gt.landmark_pos[j], *gt.landmark_vel[j]]
                )
                + "\n"
            )


def scenario_from_dict(d):
    """ScenarioSpec from a JSON-style dict (sensors via config schema)."""
    from .config import sensor_from_dict

    pn = d.get("process_noise", {})
    return ScenarioSpec(
        kind=d.get("kind", "parking"),
        duration=d.get("duration", 15.0),
        speed=d.get("speed", 2.0),
        radius=d.get("radius", 10.0),
        scale=d.get("scale", 8.0),
        waypoints=d.get("waypoints"),
        imu_rate=d.get("imu_rate", 100.0),
        landmark_count=d.get("landmark_count", 200),
        landmark_box=d.get("landmark_box", [-10.0, 30.0, -20.0, 20.0, -2.0, 2.0]),
        clearance=d.get("clearance", 1.0),
        mover_fraction=d.get("mover_fraction", 0.0),
        mover_speed=d.get("mover_speed", [0.5, 2.0]),
        sensors=[sensor_from_dict(s) for s in d.get("sensors", [])],
        imu_noise=d.get("imu_noise", False),
        radar_noise=d.get("radar_noise", False),
        process_noise=ProcessNoiseConfig(
            sigma_a=pn.get("sigma_a", 0.02),
            sigma_w=pn.get("sigma_w", 0.001),
            sigma_feature_bearing=pn.get("sigma_feature_bearing", 1e-3),
            sigma_feature_depth=pn.get("sigma_feature_depth", 1e-2),
        ),
        seed=d.get("seed", 0),
    )


def load_scenario(path):
    import json

    from .errors import DatasetError

    try:
        with open(path, "r", encoding="utf-8") as fh:
            return scenario_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read scenario {path}: {exc}", path=str(path)) from exc
