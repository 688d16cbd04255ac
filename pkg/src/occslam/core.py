"""Domain types shared by every stage of the pipeline.

Poses use the raw ``(x, y, theta)`` parameterization.  The rotation matrix
follows the convention ``R(theta) = [[cos, sin], [-sin, cos]]``, i.e. ``R``
maps world-frame vectors into the robot frame and ``R.T`` maps robot-frame
vectors into the world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

P_OCC = 0.7
P_FREE = 0.4
Z_OCC = math.log(P_OCC / (1.0 - P_OCC))
Z_FREE = math.log(P_FREE / (1.0 - P_FREE))

DEFAULT_ODOM_SIGMA = np.diag([0.04**2, 0.04**2, 0.003**2])


def wrap_angle(a):
    """Wrap an angle (scalar or array) to ``[-pi, pi]``."""
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"cannot wrap non-finite angle {a!r}")
    # leave in-range values untouched so wrapping is idempotent bit-for-bit
    wrapped = np.where(np.abs(arr) <= math.pi, arr, np.arctan2(np.sin(arr), np.cos(arr)))
    if np.ndim(a) == 0:
        return float(wrapped)
    return wrapped


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def rot_deriv(theta: float) -> np.ndarray:
    """Derivative of :func:`rot` with respect to ``theta``."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, c], [-c, -s]])


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v):
                raise ValueError(f"pose component {f.name} is not finite: {v}")
            object.__setattr__(self, f.name, v)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def t(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def R(self) -> np.ndarray:
        return rot(self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Pose2":
        return cls(float(a[0]), float(a[1]), float(a[2]))


ORIGIN = Pose2(0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class OdomIncrement:
    """Relative motion from pose ``i-1`` to pose ``i`` in the frame of ``i-1``."""

    dt: np.ndarray
    dtheta: float
    sigma: np.ndarray = field(default_factory=lambda: DEFAULT_ODOM_SIGMA.copy())

    def __post_init__(self):
        dt = np.asarray(self.dt, dtype=float).reshape(2)
        sigma = np.asarray(self.sigma, dtype=float).reshape(3, 3)
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-15 * max(1.0, np.abs(sigma).max())):
            raise ValueError("odometry covariance must be symmetric")
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise ValueError("odometry covariance must be positive definite")
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "dtheta", wrap_angle(self.dtheta))

    def as_array(self) -> np.ndarray:
        return np.array([self.dt[0], self.dt[1], self.dtheta])

    def __eq__(self, other):
        if not isinstance(other, OdomIncrement):
            return NotImplemented
        return (
            np.array_equal(self.dt, other.dt)
            and self.dtheta == other.dtheta
            and np.array_equal(self.sigma, other.sigma)
        )


@dataclass(frozen=True, eq=False)
class ScanRecord:
    """One lidar scan plus the odometry that led to it.

    Ranges greater than ``range_max`` mean "no return" (files store the
    sentinel ``range_max + 1``).
    """

    timestamp: float
    ranges: np.ndarray
    angle_min: float
    angle_increment: float
    range_max: float
    odom: Optional[OdomIncrement] = None
    gt_pose: Optional[Pose2] = None
    init_pose: Optional[Pose2] = None

    def __post_init__(self):
        ranges = np.asarray(self.ranges, dtype=float).reshape(-1)
        if ranges.size < 1:
            raise ValueError("a scan needs at least one beam")
        if np.any(~np.isfinite(ranges)) or np.any(ranges <= 0):
            raise ValueError("ranges must be positive and finite")
        if not self.range_max > 0:
            raise ValueError("range_max must be positive")
        beyond = ranges > self.range_max
        if np.any(beyond) and not np.allclose(ranges[beyond], self.range_max + 1.0, rtol=0, atol=1e-9):
            raise ValueError("ranges above range_max must be the no-return sentinel range_max + 1")
        object.__setattr__(self, "ranges", ranges)

    @property
    def n_beams(self) -> int:
        return self.ranges.size

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(self.n_beams)

    @property
    def no_return(self) -> np.ndarray:
        return self.ranges > self.range_max

    def replace(self, **changes) -> "ScanRecord":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return ScanRecord(**kw)

    def __eq__(self, other):
        if not isinstance(other, ScanRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and np.array_equal(self.ranges, other.ranges)
            and self.angle_min == other.angle_min
            and self.angle_increment == other.angle_increment
            and self.range_max == other.range_max
            and self.odom == other.odom
            and self.gt_pose == other.gt_pose
            and self.init_pose == other.init_pose
        )


@dataclass(eq=False)
class Dataset:
    records: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.records) < 2:
            raise ValueError("a dataset needs at least two scans")
        if self.records[0].odom is not None:
            raise ValueError("odometry on first record")
        with_odom = [r.odom is not None for r in self.records[1:]]
        if any(with_odom) and not all(with_odom):
            missing = 1 + with_odom.index(False)
            raise ValueError(f"record {missing} lacks odometry while others have it")

    def __len__(self):
        return len(self.records)

    @property
    def has_odometry(self) -> bool:
        return self.records[1].odom is not None

    @property
    def has_ground_truth(self) -> bool:
        return all(r.gt_pose is not None for r in self.records)

    @property
    def odoms(self) -> list:
        return [r.odom for r in self.records[1:]]

    def gt_poses(self) -> list:
        return [r.gt_pose for r in self.records]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.meta == other.meta and len(self) == len(other) and all(
            a == b for a, b in zip(self.records, other.records)
        )


@dataclass
class SolverConfig:
    resolution_s: float = 0.1
    w_Z: float = 1.0
    w_O: float = 1.0
    w_S_initial: float = 0.1
    d_S: float = 10.0
    tau_S: int = 18
    tau_k: int = 60
    tau_Delta: float = 1e-8
    w_S_floor: float = 1e-4
    map_margin: float = 1.0
    step_control: bool = True
    # nearest-node map lookup instead of bilinear interpolation (ablation)
    continuous_map: bool = True
    # "interpolated": blend of node gradients; "exact": derivative of the bilinear patch
    gradient_mode: str = "interpolated"
    tikhonov: float = 1e-8
    max_halvings: int = 8
    # on a failed line search: "anneal" skips to the next stage, "block" first tries pose-only then map-only steps
    stall_fallback: str = "anneal"
    compute_covariance: bool = False

    def __post_init__(self):
        if not self.resolution_s > 0:
            raise ValueError("resolution_s must be positive")
        if self.tau_S < 1 or self.tau_k < 1:
            raise ValueError("tau_S and tau_k must be >= 1")
        if not self.tau_Delta > 0:
            raise ValueError("tau_Delta must be positive")
        if not self.d_S > 1:
            raise ValueError("d_S must exceed 1")
        if self.w_S_floor < 0:
            raise ValueError("w_S_floor must be non-negative")
        if self.gradient_mode not in ("interpolated", "exact"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.stall_fallback not in ("block", "anneal"):
            raise ValueError(f"unknown stall_fallback {self.stall_fallback!r}")


def pose_compose_relative(prev: Pose2, nxt: Pose2) -> tuple[np.ndarray, float]:
    """Noise-free odometry ``(dt, dtheta)`` that moves ``prev`` onto ``nxt``."""
    dt = rot(prev.theta) @ (nxt.t - prev.t)
    return dt, wrap_angle(nxt.theta - prev.theta)


def apply_increment(prev: Pose2, dt, dtheta: float) -> Pose2:
    """Inverse of :func:`pose_compose_relative`."""
    t = prev.t + rot(prev.theta).T @ np.asarray(dt, dtype=float)
    return Pose2(t[0], t[1], prev.theta + dtheta)


def integrate_odometry(dataset: Dataset, start: Pose2 = ORIGIN) -> list:
    """Dead-reckoned trajectory from the dataset's odometry chain."""
    if not dataset.has_odometry:
        raise ValueError("dataset has no odometry to integrate")
    poses = [start]
    for odom in dataset.odoms:
        poses.append(apply_increment(poses[-1], odom.dt, odom.dtheta))
    return poses


def anchor_poses(poses: Sequence[Pose2]) -> list:
    """Re-express a trajectory in the frame of its first pose."""
    p0 = poses[0]
    out = []
    for p in poses:
        dt, dth = pose_compose_relative(p0, p)
        out.append(Pose2(dt[0], dt[1], dth))
    return out


def poses_to_array(poses: Sequence[Pose2]) -> np.ndarray:
    return np.array([p.as_array() for p in poses], dtype=float).reshape(-1, 3)


def array_to_poses(arr: np.ndarray) -> list:
    return [Pose2.from_array(row) for row in np.asarray(arr)]


def compose_increments(a: OdomIncrement, b: OdomIncrement) -> OdomIncrement:
    """Odometry of ``a`` followed by ``b``, covariance propagated to first order."""
    Ra_T = rot(a.dtheta).T
    dt = a.dt + Ra_T @ b.dt
    Ja = np.eye(3)
    Ja[:2, 2] = rot_deriv(a.dtheta).T @ b.dt
    Jb = np.eye(3)
    Jb[:2, :2] = Ra_T
    sigma = Ja @ a.sigma @ Ja.T + Jb @ b.sigma @ Jb.T
    return OdomIncrement(dt, a.dtheta + b.dtheta, 0.5 * (sigma + sigma.T))


def subsample_dataset(dataset: Dataset, rate: float) -> Dataset:
    """Keep every ``round(1/rate)``-th record, chaining odometry over the dropped ones."""
    if not 0 < rate <= 1:
        raise ValueError("rate must lie in (0, 1]")
    step = max(1, int(round(1.0 / rate)))
    keep = list(range(0, len(dataset), step))
    if len(keep) < 2:
        raise ValueError("subsampling leaves fewer than two scans")
    records = [dataset.records[0]]
    for prev, cur in zip(keep[:-1], keep[1:]):
        rec = dataset.records[cur]
        odom = None
        if dataset.has_odometry:
            odom = dataset.records[prev + 1].odom
            for j in range(prev + 2, cur + 1):
                odom = compose_increments(odom, dataset.records[j].odom)
        records.append(rec.replace(odom=odom))
    meta = dict(dataset.meta)
    meta["subsample_rate"] = repr(float(rate))
    return Dataset(records, meta)
