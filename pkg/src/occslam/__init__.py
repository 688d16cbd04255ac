"""Batch 2D occupancy SLAM: joint optimization of robot poses and a continuous occupancy map."""

from .core import (
    Dataset,
    OdomIncrement,
    Pose2,
    ScanRecord,
    SolverConfig,
    integrate_odometry,
    subsample_dataset,
    wrap_angle,
)
from .evaluation import classify_map, map_errors, pose_errors
from .grid import GridGeometry, GridMap, HitMap
from .io import parse_dataset, write_dataset, write_outputs
from .pipeline import perturb_poses, run
from .simulator import generate_dataset, make_scenario
from .solver import SolveReport, SolverError, extract_covariance, solve

__version__ = "0.1.0"
