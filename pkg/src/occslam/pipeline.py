"""Glue shared by the command line, the demos and the experiment tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, Pose2, SolverConfig, anchor_poses, integrate_odometry
from .evaluation import MapErrorReport, PoseErrorReport, cell_probabilities, classify_map, map_errors, pose_errors
from .grid import GridMap, HitMap, initialize_map, scatter_hits
from .sampling import pack_samples, sample_dataset
from .solver import SolveReport, solve


def perturb_poses(poses: Sequence[Pose2], sigma_xy: float, sigma_theta: float, seed: int) -> list:
    """Add Gaussian noise to every pose except the first (the gauge anchor)."""
    rng = np.random.default_rng(seed)
    out = [poses[0]]
    for p in poses[1:]:
        dx, dy = rng.normal(0.0, sigma_xy, 2)
        out.append(Pose2(p.x + dx, p.y + dy, p.theta + rng.normal(0.0, sigma_theta)))
    return out


def initial_guess(dataset: Dataset, source: str = "odometry", poses: Optional[Sequence[Pose2]] = None) -> list:
    """Initial trajectory from ``odometry``, ``dataset`` (INIT poses) or ``file`` (given ``poses``)."""
    if source == "odometry":
        return integrate_odometry(dataset)
    if source == "dataset":
        init = [r.init_pose for r in dataset.records]
        if any(p is None for p in init):
            raise ValueError("dataset does not carry an initial pose on every record")
        return init
    if source == "file":
        if poses is None:
            raise ValueError("--init file needs a trajectory file")
        if len(poses) != len(dataset):
            raise ValueError(f"initial trajectory has {len(poses)} poses, dataset has {len(dataset)} scans")
        return list(poses)
    raise ValueError(f"unknown init source {source!r}")


def reference_map(dataset: Dataset, geom, continuous: bool = True) -> tuple[GridMap, HitMap]:
    """Evidence and hit maps built from ground-truth poses on ``geom``."""
    gt = anchor_poses(dataset.gt_poses())
    samples = pack_samples(sample_dataset(dataset, geom.resolution_s))
    return initialize_map(samples, gt, geom, continuous), scatter_hits(samples, gt, geom, continuous)


@dataclass
class RunResult:
    poses: list
    map: GridMap
    report: SolveReport
    initial_errors: Optional[PoseErrorReport] = None
    pose_errors: Optional[PoseErrorReport] = None
    map_errors: Optional[MapErrorReport] = None

    def metrics(self) -> dict:
        out = {"iterations": self.report.iterations, "converged": int(self.report.converged),
               "final_cost": self.report.final_cost}
        if self.initial_errors is not None:
            out.update({f"init_{k}": v for k, v in self.initial_errors.as_dict().items()})
        if self.pose_errors is not None:
            out.update(self.pose_errors.as_dict())
        if self.map_errors is not None:
            out.update(self.map_errors.as_dict())
        return out


def run(
    dataset: Dataset,
    init: Sequence[Pose2],
    config: Optional[SolverConfig] = None,
    p_occ_thresh: float = 0.6,
    p_free_thresh: float = 0.4,
    callback=None,
) -> RunResult:
    """Solve, then score against ground truth when the dataset has it."""
    config = config or SolverConfig()
    poses, gmap, report = solve(dataset, init, config, callback)
    res = RunResult(poses, gmap, report)
    if dataset.has_ground_truth:
        gt = anchor_poses(dataset.gt_poses())
        res.initial_errors = pose_errors(anchor_poses(list(init)), gt)
        res.pose_errors = pose_errors(poses, gt)
        gt_map, gt_hits = reference_map(dataset, gmap.geom, config.continuous_map)
        est_labels = classify_map(gmap, report.hitmap, p_occ_thresh, p_free_thresh)
        gt_labels = classify_map(gt_map, gt_hits, p_occ_thresh, p_free_thresh)
        res.map_errors = map_errors(est_labels, gt_labels, cell_probabilities(gmap))
    return res
