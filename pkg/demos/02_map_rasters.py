"""
Looking at the map
==================

Export the solved map as PGM rasters and print a coarse ASCII rendering of
the probability image, so nothing beyond numpy is needed to eyeball it.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from occslam import SolverConfig, integrate_odometry
from occslam.io import read_pgm, write_outputs
from occslam.pipeline import run
from occslam.simulator import NoiseSpec, SensorSpec, generate_dataset, make_scenario

world, traj = make_scenario("room")
ds = generate_dataset(world, traj, SensorSpec(n_beams=361), NoiseSpec(seed=1))
res = run(ds, integrate_odometry(ds), SolverConfig(resolution_s=0.25, tau_k=20, compute_covariance=True))

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="occslam_"))
paths = write_outputs(res.poses, res.map, res.report.hitmap, out, res.report.covariance, res.metrics())
for name, p in sorted(paths.items()):
    print(f"{name:12s} {p}")

# dark = occupied, light = free, mid gray = never observed
img = read_pgm(paths["probability"])
ramp = np.array(list("#+-. "))
for row in img[::2, ::1]:
    print("".join(ramp[np.minimum(row // 52, 4)]))

# node variance is lowest where many beams overlap
var = res.report.covariance.node_variances
print("node variance range: %.3g .. %.3g" % (var.min(), var.max()))
