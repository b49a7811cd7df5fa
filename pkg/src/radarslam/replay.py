"""Dataset replay: merge sensor streams, drive the filter, emit a trajectory.

File formats (UTF-8 CSV with header, SI units, radians):

* imu.csv:          t,ax,ay,az,wx,wy,wz
* radar_<id>.csv:   t,azimuth,elevation,range,doppler[,snr]
                    rows sharing a timestamp form one scan
* trajectory csv:   t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,sig_vx,sig_vy,sig_vz,
                    sig_thx,sig_thy,sig_thz,sig_px,sig_py,sig_pz
* gt.csv:           the same without the sigma columns

IMU events drive prediction (ZOH of the last received sample); radar scans
are processed against the state at the most recent IMU event, which the
synthetic datasets guarantee coincides with the scan epoch.
"""

import csv
import json
import math
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import _kernels

from .ekf import FilterState, predict, update_feature
from .errors import DatasetError, FilterHealthError, PropagationError, RadarSlamError
from .manager import (
    associate,
    credit_updates,
    debit_prediction,
    note_association,
    predict_one,
    prune_and_select,
    stationarity_gate,
)
from .radar import detections_to_arrays, measurement_from_arrays
from .features import radar_frame_motion
from .motion import ImuSample
from .radar import RadarDetection

REORDER_TOLERANCE = 0.010  # s
MAX_PREDICT_DT = 0.1  # s


class ReplayAborted(RadarSlamError):
    """Filter failed mid-run; carries the partial trajectory and diagnostics."""

    def __init__(self, trajectory, diagnostics):
        super().__init__(diagnostics.aborted)
        self.trajectory = trajectory
        self.diagnostics = diagnostics


@dataclass
class ScanEvent:
    t: float
    sensor_id: str
    detections: List[RadarDetection]
    labels: Optional[np.ndarray] = None  # sim truth: landmark index per detection
    moving: Optional[np.ndarray] = None  # sim truth: mover flag per detection
    mismatch: Optional[np.ndarray] = None  # sim truth: |radial speed error|, m/s


@dataclass
class ImuEvent:
    t: float
    sample: ImuSample


@dataclass
class TrajectoryEstimate:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    sigma: np.ndarray  # sqrt of the nav covariance diagonal, order [v, th, p]

    def write_csv(self, path):
        header = (
            "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,"
            "sig_vx,sig_vy,sig_vz,sig_thx,sig_thy,sig_thz,sig_px,sig_py,sig_pz"
        )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header + "\n")
            for i in range(len(self.t)):
                row = [self.t[i], *self.p[i], *self.q[i], *self.v[i], *self.sigma[i]]
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


@dataclass
class RunDiagnostics:
    n_imu: int = 0
    n_scans: int = 0
    n_detections: int = 0
    n_gated_out: int = 0
    n_matched: int = 0
    n_cross_matched: int = 0
    n_unmatched_detections: int = 0
    n_updates_accepted: int = 0
    n_updates_rejected: int = 0
    n_inserted: int = 0
    n_pruned: int = 0
    feature_count_sum: int = 0
    feature_count_max: int = 0
    scan_time_total: float = 0.0
    scan_time_max: float = 0.0
    movers_total: int = 0
    movers_accepted: int = 0
    movers_strong_total: int = 0  # radial mismatch > 5 sigma_doppler
    movers_strong_accepted: int = 0
    stationary_rejected: int = 0
    stationary_total: int = 0
    aborted: str = ""
    mahalanobis_sq: Optional[List[float]] = None  # filled on request, not serialized
    mahalanobis_sq_true: Optional[List[float]] = None  # label-verified subset
    final_nav_cov: Optional[np.ndarray] = None  # 9x9, not serialized

    @property
    def match_rate(self):
        return self.n_matched / self.n_detections if self.n_detections else 0.0

    @property
    def mean_feature_count(self):
        return self.feature_count_sum / self.n_scans if self.n_scans else 0.0

    def to_dict(self):
        skip = ("mahalanobis_sq", "mahalanobis_sq_true", "final_nav_cov")
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in skip}
        d["match_rate"] = self.match_rate
        d["mean_feature_count"] = self.mean_feature_count
        return d

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _read_csv_rows(path, expected_fields):
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        header = [h.strip() for h in header]
        if header[: len(expected_fields)] != list(expected_fields):
            raise DatasetError(
                f"{path}: expected header starting {','.join(expected_fields)}, got {','.join(header)}",
                path=str(path),
                line=1,
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise DatasetError(
                    f"{path}:{lineno}: unparseable row: {exc}", path=str(path), line=lineno
                ) from exc
        return rows


def _check_order(rows, path):
    high = -np.inf
    for i, row in enumerate(rows):
        if row[0] < high - REORDER_TOLERANCE:
            raise DatasetError(
                f"{path}: timestamp disorder beyond {REORDER_TOLERANCE*1e3:.0f} ms at data row {i + 1}",
                path=str(path),
                line=i + 2,
            )
        high = max(high, row[0])
    rows.sort(key=lambda r: r[0])


def load_imu_csv(path):
    rows = _read_csv_rows(path, ("t", "ax", "ay", "az", "wx", "wy", "wz"))
    _check_order(rows, path)
    return [
        ImuSample(r[0], np.array(r[1:4]), np.array(r[4:7]))
        for r in rows
    ]


def load_radar_csv(path, sensor_id):
    rows = _read_csv_rows(path, ("t", "azimuth", "elevation", "range", "doppler"))
    _check_order(rows, path)
    scans = []
    for r in rows:
        det = RadarDetection(r[1], r[2], r[3], r[4], r[5] if len(r) > 5 else None)
        if scans and scans[-1].t == r[0]:
            scans[-1].detections.append(det)
        else:
            scans.append(ScanEvent(r[0], sensor_id, [det]))
    return scans


def load_dataset(imu_path, radar_paths, config=None):
    """Merge IMU and radar files into one time-ordered event stream."""
    if config is not None:
        unknown = set(radar_paths) - set(config.sensors)
        if unknown:
            raise DatasetError(f"radar file(s) for unknown sensor id(s): {sorted(unknown)}")
    events = [ImuEvent(s.t, s) for s in load_imu_csv(imu_path)]
    for sensor_id, path in radar_paths.items():
        events.extend(load_radar_csv(path, sensor_id))
    return merge_events(events)


def merge_events(events):
    """Time sort with IMU before radar at equal timestamps."""
    return sorted(
        events,
        key=lambda e: (e.t, 0 if isinstance(e, ImuEvent) else 1, getattr(e, "sensor_id", "")),
    )


def events_from_sim(imu_samples, scans):
    """In-memory stream adapter for sim output (keeps truth labels)."""
    events = [ImuEvent(s.t, s) for s in imu_samples]
    events.extend(
        ScanEvent(sc.t, sc.sensor_id, sc.detections, sc.labels, sc.moving, sc.mismatch)
        for sc in scans
    )
    return merge_events(events)


@dataclass
class ReplayOptions:
    doppler_coupling: bool = True  # project Doppler on estimated vs measured bearing
    use_doppler: bool = True  # False: drop the Doppler row from association/updates
    cross_matching: bool = True
    max_features: Optional[int] = None
    health_check_interval: int = 5  # full-covariance Cholesky cadence, in predicts
    collect_mahalanobis: bool = False

DROPPED_DOPPLER_VAR = 1e3  # m^2/s^2; deweights the row without conditioning loss


def run_replay(stream, config, options=None):
    """Drive the filter over a merged event stream.

    Returns (TrajectoryEstimate, RunDiagnostics); on a filter-health failure
    the partial trajectory is flushed and diagnostics.aborted carries the
    reason.
    """
    opts = options or ReplayOptions()
    capacity = opts.max_features or config.max_features
    sensors = config.sensors
    extrinsics = {sid: s.extrinsics for sid, s in sensors.items()}
    gating = config.gating

    state = FilterState(
        t=stream[0].t if stream else 0.0,
        nav=config.initial_nav.copy(),
        features=[],
        P=np.diag(config.initial_cov_diag.astype(float)),
        capacity=capacity,
    )
    diag = RunDiagnostics()
    rows_t, rows_p, rows_q, rows_v, rows_s = [], [], [], [], []
    held: Optional[ImuSample] = None
    last_prune = -np.inf
    next_id = 0
    steps = 0
    d2_samples: List[float] = []
    d2_true: List[float] = []
    feature_labels = {}  # feature id -> sim landmark index, when available
    # nav entropy is chained between events (predict/updates touch the nav
    # block; insert/remove/prune do not)
    ent_const = 9.0 * math.log(2.0 * math.pi * math.e)

    def entropy_of(p):
        return 0.5 * (ent_const + _kernels.logdet9(p))

    nav_ent = entropy_of(state.P)

    def flush_pose():
        rows_t.append(state.t)
        rows_p.append(state.nav.p.copy())
        rows_q.append(state.nav.q.copy())
        rows_v.append(state.nav.v.copy())
        rows_s.append(np.sqrt(np.maximum(np.diag(state.P)[:9], 0.0)))

    try:
        for ev in stream:
            if isinstance(ev, ImuEvent):
                if held is not None and ev.t > held.t:
                    remaining = ev.t - held.t
                    while remaining > 1e-12:
                        dt = min(remaining, MAX_PREDICT_DT)
                        check = opts.health_check_interval > 0 and (
                            steps % opts.health_check_interval == 0
                        )
                        e_before = nav_ent
                        state = predict(
                            state, held, dt, config.process_noise, extrinsics, check_health=check
                        )
                        nav_ent = entropy_of(state.P)
                        if state.n_features:
                            state = debit_prediction(state, e_before, nav_ent)
                        steps += 1
                        remaining -= dt
                elif held is None:
                    state.t = ev.t
                held = ev.sample
                diag.n_imu += 1
                flush_pose()
                continue

            # radar scan against the most recent predicted state
            t0 = time.perf_counter()
            sensor = sensors.get(ev.sensor_id)
            if sensor is None:
                raise DatasetError(f"scan from unknown sensor id {ev.sensor_id!r}")
            imu_now = held if held is not None else ImuSample(ev.t, np.zeros(3), np.zeros(3))
            diag.n_scans += 1
            diag.n_detections += len(ev.detections)
            diag.feature_count_sum += state.n_features
            diag.feature_count_max = max(diag.feature_count_max, state.n_features)

            det_arrays = (
                detections_to_arrays(ev.detections, sensor.noise) if ev.detections else None
            )
            if det_arrays is not None and not opts.use_doppler:
                det_arrays[3][:, 0, 0] = DROPPED_DOPPLER_VAR
            kept = stationarity_gate(
                ev.detections, state, imu_now, sensor, gating, det_arrays
            )
            diag.n_gated_out += len(ev.detections) - len(kept)
            strong = None
            if ev.moving is not None:
                diag.movers_total += int(np.sum(ev.moving))
                diag.stationary_total += int(np.sum(~ev.moving))
                kept_mask = np.zeros(len(ev.detections), dtype=bool)
                kept_mask[kept] = True
                diag.stationary_rejected += int(np.sum(~kept_mask & ~ev.moving))
                if ev.mismatch is not None:
                    strong = ev.moving & (
                        ev.mismatch > 5.0 * sensor.noise.sigma_doppler
                    )
                    diag.movers_strong_total += int(np.sum(strong))

            kept_dets = [ev.detections[i] for i in kept]
            kept_arrays = (
                tuple(a[np.asarray(kept, dtype=int)] for a in det_arrays) if kept else None
            )
            assoc = associate(
                kept_dets, state, imu_now, sensor, sensors, gating,
                opts.cross_matching, kept_arrays,
            )
            state = note_association(state, assoc)
            diag.n_matched += len(assoc.matches)
            diag.n_unmatched_detections += len(assoc.unmatched_detections)
            if opts.collect_mahalanobis:
                d2_samples.extend(d * d for _, _, d in assoc.matches)
                if ev.labels is not None:
                    for fid, di, d in assoc.matches:
                        label = feature_labels.get(fid)
                        if label is not None and label == ev.labels[kept[di]]:
                            d2_true.append(d * d)

            measurements = {
                di: measurement_from_arrays(kept_arrays, di) for _, di, _ in assoc.matches
            }
            vr_scan, _ = radar_frame_motion(state.nav, imu_now, sensor.extrinsics)
            credits = {}
            for fid, di, _ in assoc.matches:
                fi = state.feature_index(fid)
                if state.meta()[fi].anchor_sensor != ev.sensor_id:
                    diag.n_cross_matched += 1
                meas = measurements[di]
                # relinearize the prediction at the current estimate; the H
                # blocks are kept from association (linearization point of
                # the scan), matching the sequential-update design
                pred = predict_one(state, fi, sensor, sensors, vr_scan)
                stored = assoc.predictions[fid]
                h_f, h_nav = stored.h_f, stored.h_nav
                if not opts.doppler_coupling:
                    h_f = h_f.copy()
                    h_nav = h_nav.copy()
                    h_f[0, :] = 0.0
                    h_nav[0, 0:3] = meas.bearing @ sensor.extrinsics.r_rb
                e_before = nav_ent
                state, info = update_feature(state, fi, meas, pred, h_f, h_nav)
                if info.accepted:
                    diag.n_updates_accepted += 1
                    nav_ent = 0.5 * (ent_const + info.nav_logdet)
                    credits[fid] = credits.get(fid, 0.0) + (e_before - nav_ent)
                else:
                    diag.n_updates_rejected += 1
                if ev.moving is not None and info.accepted:
                    orig = kept[di]
                    if ev.moving[orig]:
                        diag.movers_accepted += 1
                    if strong is not None and strong[orig]:
                        diag.movers_strong_accepted += 1
            state = credit_updates(state, credits)

            if state.t - last_prune >= gating.prune_interval:
                last_prune = state.t
                candidates = [
                    (kept_dets[di], measurement_from_arrays(kept_arrays, di))
                    for di in assoc.unmatched_detections
                ]
                vr, _ = radar_frame_motion(state.nav, imu_now, sensor.extrinsics)
                before_ids = {f.id for f in state.meta()}
                new_pairs = []
                state, next_id = prune_and_select(
                    state, candidates, sensor, vr, gating, next_id, new_pairs
                )
                after_ids = {f.id for f in state.meta()}
                diag.n_pruned += len(before_ids - after_ids)
                diag.n_inserted += len(after_ids - before_ids)
                if ev.labels is not None:
                    for fid, ci in new_pairs:
                        det_idx = kept[assoc.unmatched_detections[ci]]
                        feature_labels[fid] = ev.labels[det_idx]
            dt_scan = time.perf_counter() - t0
            diag.scan_time_total += dt_scan
            diag.scan_time_max = max(diag.scan_time_max, dt_scan)
    except (FilterHealthError, PropagationError) as exc:
        diag.aborted = f"{type(exc).__name__}: {exc} at t={state.t:.3f}"

    traj = TrajectoryEstimate(
        np.array(rows_t),
        np.array(rows_p).reshape(-1, 3),
        np.array(rows_q).reshape(-1, 4),
        np.array(rows_v).reshape(-1, 3),
        np.array(rows_s).reshape(-1, 9),
    )
    if opts.collect_mahalanobis:
        diag.mahalanobis_sq = d2_samples
        diag.mahalanobis_sq_true = d2_true
    diag.final_nav_cov = state.nav_cov().copy()
    if diag.aborted:
        raise ReplayAborted(traj, diag)
    return traj, diag


def read_trajectory_csv(path):
    """Read any CSV with t,px..qz[,vx..] columns (trajectory or gt)."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        cols = {name: i for i, name in enumerate(header)}
        needed = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]
        missing = [c for c in needed if c not in cols]
        if missing:
            raise DatasetError(f"{path}: missing columns {missing}", path=str(path), line=1)
        data = [[float(x) for x in row] for row in reader if row]
    arr = np.array(data)
    t = arr[:, cols["t"]]
    p = arr[:, [cols["px"], cols["py"], cols["pz"]]]
    q = arr[:, [cols["qw"], cols["qx"], cols["qy"], cols["qz"]]]
    return t, p, q
