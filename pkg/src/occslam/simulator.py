"""Synthetic 2D lidar datasets from line-segment worlds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DEFAULT_ODOM_SIGMA, Dataset, anchor_poses, OdomIncrement, Pose2, ScanRecord, pose_compose_relative

STEP_SECONDS = 0.5


@dataclass(frozen=True, eq=False)
class World:
    segments: np.ndarray  # (m, 2, 2): segment, endpoint, xy
    name: str = "world"

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=float).reshape(-1, 2, 2)
        if np.any(np.all(seg[:, 0] == seg[:, 1], axis=1)):
            raise ValueError("degenerate segment (identical endpoints)")
        object.__setattr__(self, "segments", seg)

    def transformed(self, pose: Pose2) -> "World":
        """World moved rigidly by ``pose`` (rotate by theta, then translate)."""
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        Rw = np.array([[c, -s], [s, c]])
        return World(self.segments @ Rw.T + pose.t, self.name)


@dataclass(frozen=True)
class SensorSpec:
    n_beams: int = 1081
    angle_min: float = -math.radians(135.0)
    angle_max: float = math.radians(135.0)
    range_max: float = 30.0
    range_noise_sigma: float = 0.02

    @property
    def angle_increment(self) -> float:
        return (self.angle_max - self.angle_min) / (self.n_beams - 1) if self.n_beams > 1 else 0.0

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(self.n_beams)


@dataclass(frozen=True)
class NoiseSpec:
    odom_xy_sigma: float = 0.04
    odom_theta_sigma: float = 0.003
    seed: int = 1

    def __post_init__(self):
        if self.odom_xy_sigma < 0 or self.odom_theta_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


def raycast(world: World, pose: Pose2, spec: SensorSpec) -> np.ndarray:
    """Noise-free ranges; beams with nothing within ``range_max`` get ``inf``."""
    ang = pose.theta + spec.angles
    d = np.column_stack([np.cos(ang), np.sin(ang)])  # (B, 2)
    p = world.segments[:, 0]  # (m, 2)
    e = world.segments[:, 1] - p
    q = p - pose.t  # origin -> segment start
    # solve  t*d = q + u*e  for t (ray) and u in [0, 1] (segment)
    denom = d[:, 0:1] * e[None, :, 1] - d[:, 1:2] * e[None, :, 0]  # cross(d, e)
    cross_qe = q[:, 0] * e[:, 1] - q[:, 1] * e[:, 0]
    cross_qd = q[None, :, 0] * d[:, 1:2] - q[None, :, 1] * d[:, 0:1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_qe[None, :] / denom
        u = cross_qd / denom
    valid = (np.abs(denom) > 1e-12) & (u >= 0) & (u <= 1) & (t > 1e-9)
    t = np.where(valid, t, np.inf)
    r = t.min(axis=1) if t.shape[1] else np.full(spec.n_beams, np.inf)
    r[r > spec.range_max] = np.inf
    return r


def _noisy_ranges(true_r: np.ndarray, spec: SensorSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.full(true_r.shape, spec.range_max + 1.0)
    hit = np.isfinite(true_r)
    r = true_r[hit]
    if spec.range_noise_sigma > 0:
        noisy = r + rng.normal(0.0, spec.range_noise_sigma, r.size)
        bad = noisy < 1e-3
        while np.any(bad):
            noisy[bad] = r[bad] + rng.normal(0.0, spec.range_noise_sigma, int(bad.sum()))
            bad = noisy < 1e-3
        r = np.minimum(noisy, spec.range_max)
    out[hit] = r
    return out


def _odom_sigma(noise: NoiseSpec) -> np.ndarray:
    d = np.array([noise.odom_xy_sigma, noise.odom_xy_sigma, noise.odom_theta_sigma]) ** 2
    fallback = np.diag(DEFAULT_ODOM_SIGMA)
    return np.diag(np.where(d > 0, d, fallback))


def generate_dataset(
    world: World, trajectory: Sequence[Pose2], sensor: SensorSpec = SensorSpec(), noise: NoiseSpec = NoiseSpec()
) -> Dataset:
    """Ray-cast every pose, perturb ranges and odometry, keep ground truth.

    Pose ``i`` draws from its own stream seeded by ``(seed, i)``, so the
    output does not depend on generation order.
    """
    sigma = _odom_sigma(noise)
    records = []
    for i, pose in enumerate(trajectory):
        rng = np.random.default_rng([noise.seed, i])
        ranges = _noisy_ranges(raycast(world, pose, sensor), sensor, rng)
        odom = None
        if i > 0:
            dt, dth = pose_compose_relative(trajectory[i - 1], pose)
            dt = dt + rng.normal(0.0, 1.0, 2) * noise.odom_xy_sigma
            dth = dth + rng.normal(0.0, 1.0) * noise.odom_theta_sigma
            odom = OdomIncrement(dt, dth, sigma)
        records.append(ScanRecord(
            timestamp=i * STEP_SECONDS,
            ranges=ranges,
            angle_min=sensor.angle_min,
            angle_increment=sensor.angle_increment,
            range_max=sensor.range_max,
            odom=odom,
            gt_pose=pose,
        ))
    meta = {"world": world.name, "seed": str(noise.seed)}
    return Dataset(records, meta)


# -- built-in scenarios -------------------------------------------------------


def _box(x0, y0, x1, y1) -> list:
    return [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]


def waypoint_trajectory(waypoints: Sequence, n_poses: int, turn_steps: int = 2) -> list:
    """Constant-speed path through ``waypoints`` with in-place turns at corners.

    The heading follows the direction of travel; at each corner the robot
    spends ``turn_steps`` poses rotating on the spot.  The path is resampled
    so that exactly ``n_poses`` poses come out.
    """
    wp = np.asarray(waypoints, dtype=float)
    legs = np.diff(wp, axis=0)
    headings = np.arctan2(legs[:, 1], legs[:, 0])
    lengths = np.linalg.norm(legs, axis=1)
    n_turns = len(legs) - 1
    n_move = n_poses - 1 - turn_steps * n_turns
    if n_move < len(legs):
        raise ValueError("too few poses for this many waypoints")
    per_leg = np.maximum(1, np.round(n_move * lengths / lengths.sum()).astype(int))
    per_leg[-1] += n_move - per_leg.sum()
    poses = [Pose2(wp[0, 0], wp[0, 1], headings[0])]
    for j, (leg, steps) in enumerate(zip(legs, per_leg)):
        for k in range(1, steps + 1):
            p = wp[j] + leg * k / steps
            poses.append(Pose2(p[0], p[1], headings[j]))
        if j < n_turns:
            dth = math.remainder(headings[j + 1] - headings[j], 2 * math.pi)
            for k in range(1, turn_steps + 1):
                poses.append(Pose2(wp[j + 1, 0], wp[j + 1, 1], headings[j] + dth * k / turn_steps))
    return poses


def _room():
    walls = _box(-1.5, -1.5, 8.5, 5.5)
    walls += _box(2.0, 1.2, 2.8, 2.0)  # pillar
    walls += _box(5.2, 2.3, 6.0, 3.1)  # pillar
    walls += [((3.5, 5.5), (3.5, 4.0)), ((8.5, 1.0), (7.3, 1.0)), ((-1.5, 3.0), (-0.6, 3.0))]
    waypoints = [(0, 0), (7, 0), (7, 4), (0.5, 4), (0.5, 0.6), (4.2, 0.6), (4.2, 3.2)]
    return walls, waypoints


def _sim1():
    walls = _box(-2, -2, 26, 16)
    walls += _box(4, 3, 9, 6) + _box(13, 3, 20, 7) + _box(4, 9, 10, 12) + _box(15, 10, 21, 13)
    walls += [((12, 16), (12, 13.5)), ((26, 8), (23, 8)), ((-2, 7), (1, 7))]
    waypoints = [(0, 0), (22, 0), (22, 8.5), (12, 8.5), (12, 14), (1.5, 14), (1.5, 1.5), (11, 1.5), (11, 8)]
    return walls, waypoints


def _sim2():
    walls = _box(-2, -3, 40, 13)
    walls += _box(3, 1, 12, 8) + _box(16, 1, 25, 8) + _box(29, 1, 36, 8)
    walls += [((14, 13), (14, 10.5)), ((27, -3), (27, -1)), ((40, 5), (38, 5))]
    waypoints = [(0, 0), (0, -1.5), (38, -1.5), (38, 10.5), (0, 10.5), (0, 2), (14, 2), (14, 9), (27, 9), (27, 0)]
    return walls, waypoints


SCENARIOS = {"room": (_room, 60), "sim1-like": (_sim1, 340), "sim2-like": (_sim2, 527)}


def make_scenario(name: str, n_poses: int | None = None) -> tuple:
    """Built-in ``(World, trajectory)`` pairs; trajectories start at the origin."""
    try:
        builder, default_n = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    walls, waypoints = builder()
    world = World(np.array(walls, dtype=float), name)
    traj = waypoint_trajectory(waypoints, n_poses or default_n)
    # express everything in the frame of the first pose
    p0 = traj[0]
    inv = Pose2(*(-(np.array([[math.cos(p0.theta), math.sin(p0.theta)], [-math.sin(p0.theta), math.cos(p0.theta)]]) @ p0.t)), -p0.theta)
    world = world.transformed(inv)
    traj = anchor_poses(traj)
    return world, traj
