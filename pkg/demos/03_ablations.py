"""
Ablations on one seed
=====================

Three variations on the same dataset:

* nearest-node lookup instead of bilinear interpolation
* half the scans (records merged, odometry compounded)
* a noisy initial guess instead of odometry

Each prints the translation MAE before and after.  Takes a few minutes.
"""

from occslam import SolverConfig, integrate_odometry, subsample_dataset
from occslam.pipeline import perturb_poses, run
from occslam.simulator import NoiseSpec, SensorSpec, generate_dataset, make_scenario

world, traj = make_scenario("room")
ds = generate_dataset(world, traj, SensorSpec(n_beams=541), NoiseSpec(seed=2))
cfg = SolverConfig(resolution_s=0.2, tau_k=40)


def line(label, res):
    a, b = res.initial_errors, res.pose_errors
    print(f"{label:22s} {a.mae_translation:.4f} -> {b.mae_translation:.4f} m   "
          f"{a.mae_rotation:.4f} -> {b.mae_rotation:.4f} rad   ({res.report.iterations} iters)")


line("continuous", run(ds, integrate_odometry(ds), cfg))
line("nearest node", run(ds, integrate_odometry(ds), SolverConfig(resolution_s=0.2, tau_k=40, continuous_map=False)))

half = subsample_dataset(ds, 0.5)
line(f"half rate ({len(half)} scans)", run(half, integrate_odometry(half), cfg))

noisy = perturb_poses(integrate_odometry(ds), 0.3, 0.1, seed=2)
line("perturbed start", run(ds, noisy, cfg))
