"""Tightly-coupled radar-inertial SLAM for low-speed vehicle odometry."""

from .config import RunConfig, SensorConfig, load_run_config
from .ekf import FilterState, ProcessNoiseConfig, insert_feature, predict, remove_feature, update_feature
from .features import Feature, RadarExtrinsics, propagate_feature
from .manager import AssociationResult, GatingConfig, associate, info_entropy, stationarity_gate
from .motion import GravityModel, ImuSample, NavState, propagate_nav
from .radar import MeasurementNoise, RadarDetection, detection_to_measurement, predict_measurement
from .replay import ReplayOptions, TrajectoryEstimate, load_dataset, run_replay
from .evaluation import MetricReport, align_umeyama, aggregate_runs, compute_metrics
from .sim import ScenarioSpec, generate_dataset, generate_trajectory, render_scans, synthesize_imu

__version__ = "0.1.0"
