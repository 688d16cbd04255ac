import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occslam.core import DEFAULT_ODOM_SIGMA, OdomIncrement, Pose2, pose_compose_relative
from occslam.grid import GridGeometry, GridMap, scatter_hits
from occslam.sampling import SampleSet

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ToyScene:
    """Random poses, samples, map and frozen hit map on a small lattice."""

    def __init__(self, seed=0, n_poses=5, nodes=20, s=0.25, pts_per_pose=40):
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.geom = GridGeometry((0.0, 0.0), s, nodes - 1, nodes - 1)
        extent = (nodes - 1) * s
        poses = [Pose2(0.0, 0.0, 0.0)]
        for _ in range(n_poses - 1):
            poses.append(Pose2(*rng.uniform(0.3 * extent, 0.6 * extent, 2), rng.uniform(-math.pi, math.pi)))
        # pose 0 sits at the map corner, so give it points that land inside too
        self.poses = poses
        self.pose_arr = np.array([p.as_array() for p in poses])
        idx, xy, z = [], [], []
        for i, p in enumerate(poses):
            world = rng.uniform(0.15 * extent, 0.85 * extent, (pts_per_pose, 2))
            local = (world - p.t) @ p.R.T  # R (w - t) in row form
            idx.append(np.full(pts_per_pose, i))
            xy.append(local)
            z.append(np.where(rng.random(pts_per_pose) < 0.4, 0.8473, -0.4055))
        z = np.concatenate(z)
        self.samples = SampleSet(np.concatenate(idx), np.concatenate(xy), z, z > 0, n_poses)
        self.map = GridMap(self.geom, rng.normal(0.0, 1.0, self.geom.shape))
        self.hitmap = scatter_hits(self.samples, self.pose_arr, self.geom)
        self.odoms = []
        for a, b in zip(poses[:-1], poses[1:]):
            dt, dth = pose_compose_relative(a, b)
            self.odoms.append(OdomIncrement(dt + rng.normal(0, 0.05, 2), dth + rng.normal(0, 0.01),
                                            DEFAULT_ODOM_SIGMA))


@pytest.fixture
def toy():
    return ToyScene(0)


@pytest.fixture
def make_toy():
    return ToyScene


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
