"""Depth-camera and gyro pose estimation: ICP, ICP covariance and an invariant EKF on SE(3)."""

from .config import Config, load_config, parse_config
from .covariance import analyze_observability, fisher_matrix, icp_covariance
from .icp import IcpParams, IcpResult, coarse_align, icp_register, solve_rigid
from .iekf import (
    FilterState,
    Observation,
    discrete_gain,
    initial_state,
    innovation_correction,
    predict,
    reject_observation,
    stationary_gain,
    update,
)
from .liegroup import Pose, Twist, UnitQuaternion, compose, exp_rotation, hat, inverse, project_pi, quat_integrate, vee
from .pipeline import evaluate, run_fusion, run_gyro_only, run_icp_only, run_pipeline
from .pointcloud import DepthImage, PointCloud, build_index, depth_to_cloud, match_closest
from .simulator import SimConfig, TrajectoryScript, make_run, make_scene

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DepthImage",
    "FilterState",
    "IcpParams",
    "IcpResult",
    "Observation",
    "PointCloud",
    "Pose",
    "SimConfig",
    "TrajectoryScript",
    "Twist",
    "UnitQuaternion",
    "analyze_observability",
    "build_index",
    "coarse_align",
    "compose",
    "depth_to_cloud",
    "discrete_gain",
    "evaluate",
    "exp_rotation",
    "fisher_matrix",
    "hat",
    "icp_covariance",
    "icp_register",
    "initial_state",
    "innovation_correction",
    "inverse",
    "load_config",
    "make_run",
    "make_scene",
    "match_closest",
    "parse_config",
    "predict",
    "project_pi",
    "quat_integrate",
    "reject_observation",
    "run_fusion",
    "run_gyro_only",
    "run_icp_only",
    "run_pipeline",
    "solve_rigid",
    "stationary_gain",
    "update",
    "vee",
]
