"""Command line: ``simulate``, ``solve``, ``evaluate`` and ``subsample``.

Exit codes: 0 success, 1 runtime failure (bad input, solver abort),
2 usage error.  The default output directory comes from
``$OCCSLAM_OUTPUT_DIR`` when ``--out`` is not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import io
from .core import SolverConfig, anchor_poses, subsample_dataset
from .evaluation import pose_errors
from .pipeline import initial_guess, perturb_poses, run
from .simulator import SCENARIOS, NoiseSpec, SensorSpec, generate_dataset, make_scenario
from .solver import SolverError

log = logging.getLogger("occslam")

_CONFIG_HELP = {
    "resolution_s": "map resolution and free-space sampling step in meters",
    "w_Z": "weight of observation residuals",
    "w_O": "weight of odometry residuals (0 disables odometry)",
    "w_S_initial": "initial smoothing weight",
    "d_S": "smoothing weight divisor per annealing stage",
    "tau_S": "iterations per annealing stage",
    "tau_k": "maximum number of iterations",
    "tau_Delta": "stop when the squared step norm drops below this",
    "w_S_floor": "lower bound on the smoothing weight",
    "map_margin": "padding around the observed area in meters",
    "step_control": "halve steps until the cost does not increase",
    "continuous_map": "bilinear map interpolation (off: nearest node)",
    "gradient_mode": "map gradient used in the pose Jacobian",
    "tikhonov": "diagonal damping added to the normal matrix",
    "max_halvings": "maximum step halvings per iteration",
    "stall_fallback": "after a failed line search: block steps or skip to the next stage",
    "compute_covariance": "extract marginal variances after the solve",
}


def _default_out(name: str) -> Path:
    return Path(os.environ.get(io.OUTPUT_DIR_ENV, "occslam_out")) / name


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver configuration")
    for f in dataclasses.fields(SolverConfig):
        flag = "--" + f.name.replace("_", "-")
        helptext = f"{_CONFIG_HELP.get(f.name, f.name)} (default: {f.default})"
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=f.default, help=helptext)
        elif f.name == "gradient_mode":
            g.add_argument(flag, dest=f.name, choices=["interpolated", "exact"], default=f.default, help=helptext)
        elif f.name == "stall_fallback":
            g.add_argument(flag, dest=f.name, choices=["block", "anneal"], default=f.default, help=helptext)
        else:
            typ = int if f.type in ("int", int) else float
            g.add_argument(flag, dest=f.name, type=typ, default=f.default, metavar="V", help=helptext)
    g.add_argument("--discrete-map", action="store_true", help="shorthand for --no-continuous-map")
    g.add_argument("--covariance", action="store_true", help="shorthand for --compute-covariance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occslam", description="Batch 2D occupancy SLAM toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="ray-cast a world along a trajectory into a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", choices=sorted(SCENARIOS), help="built-in world and trajectory")
    src.add_argument("--world", type=Path, help="world JSON file (needs --trajectory)")
    p.add_argument("--trajectory", type=Path, help="ground-truth trajectory file for --world")
    p.add_argument("--n-poses", type=int, help="number of poses for --scenario")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--beams", type=int, default=SensorSpec.n_beams, help="beams per scan")
    p.add_argument("--range-max", type=float, default=SensorSpec.range_max)
    p.add_argument("--beam-sigma", type=float, default=SensorSpec.range_noise_sigma, help="range noise std (m)")
    p.add_argument("--odom-xy-sigma", type=float, default=NoiseSpec.odom_xy_sigma, help="odometry xy noise std (m)")
    p.add_argument("--odom-theta-sigma", type=float, default=NoiseSpec.odom_theta_sigma, help="odometry heading noise std (rad)")
    p.add_argument("--out", type=Path, help="output directory (dataset.txt, world.json, ground_truth.txt)")

    p = sub.add_parser("solve", help="jointly optimize poses and map")
    p.add_argument("dataset", type=Path)
    p.add_argument("--init", choices=["odometry", "file", "dataset"], default="odometry",
                   help="initial guess: integrated odometry, --init-file, or INIT poses in the dataset")
    p.add_argument("--init-file", type=Path, help="trajectory file for --init file")
    p.add_argument("--perturb-init", nargs=3, metavar=("SIGMA_XY", "SIGMA_THETA", "SEED"),
                   help="add Gaussian noise to the initial poses")
    p.add_argument("--p-occ", type=float, default=0.6, help="occupied threshold for map metrics")
    p.add_argument("--p-free", type=float, default=0.4, help="free threshold for map metrics")
    p.add_argument("--threads", type=int, default=1, help="worker cap; 1 guarantees determinism")
    p.add_argument("--out", type=Path, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="pose errors of an estimate against ground truth")
    p.add_argument("--estimate", type=Path, required=True, help="estimated trajectory file")
    ref = p.add_mutually_exclusive_group(required=True)
    ref.add_argument("--dataset", type=Path, help="dataset carrying ground-truth poses")
    ref.add_argument("--gt", type=Path, help="ground-truth trajectory file")
    p.add_argument("--out", type=Path, help="metrics file to write")

    p = sub.add_parser("subsample", help="keep a fraction of the records, chaining odometry")
    p.add_argument("dataset", type=Path)
    p.add_argument("--rate", type=float, required=True, help="fraction of records kept, in (0, 1]")
    p.add_argument("--out", type=Path, required=True, help="output dataset file")
    return parser


def _config_from(args) -> SolverConfig:
    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(SolverConfig)}
    if args.discrete_map:
        kw["continuous_map"] = False
    if args.covariance:
        kw["compute_covariance"] = True
    return SolverConfig(**kw)


def cmd_simulate(args) -> int:
    if args.scenario:
        world, traj = make_scenario(args.scenario, args.n_poses)
    else:
        if args.trajectory is None:
            raise ValueError("--world needs --trajectory")
        world, traj = io.read_world(args.world), io.read_trajectory(args.trajectory)
    sensor = dataclasses.replace(SensorSpec(), n_beams=args.beams, range_max=args.range_max,
                                 range_noise_sigma=args.beam_sigma)
    noise = NoiseSpec(args.odom_xy_sigma, args.odom_theta_sigma, args.seed)
    dataset = generate_dataset(world, traj, sensor, noise)
    out = args.out or _default_out("simulate")
    out.mkdir(parents=True, exist_ok=True)
    io.write_dataset(dataset, out / "dataset.txt")
    io.write_world(world, out / "world.json")
    io.write_trajectory(traj, out / "ground_truth.txt")
    print(f"wrote {len(dataset)} scans to {out / 'dataset.txt'}")
    return 0


def cmd_solve(args) -> int:
    if args.threads < 1:
        raise ValueError("--threads must be >= 1")
    config = _config_from(args)
    dataset = io.parse_dataset(args.dataset)
    file_poses = io.read_trajectory(args.init_file) if args.init_file else None
    init = initial_guess(dataset, args.init, file_poses)
    if args.perturb_init:
        sxy, sth, seed = float(args.perturb_init[0]), float(args.perturb_init[1]), int(args.perturb_init[2])
        init = perturb_poses(init, sxy, sth, seed)

    def progress(k, cost, step_sq, w_S, skipped):
        log.info("iter %3d  cost %.6g  |step|^2 %.3g  w_S %g  skipped %d", k, cost, step_sq, w_S, skipped)

    res = run(dataset, init, config, args.p_occ, args.p_free, callback=progress)
    out = args.out or _default_out("solve")
    metrics = res.metrics() if dataset.has_ground_truth else None
    paths = io.write_outputs(res.poses, res.map, res.report.hitmap, out, res.report.covariance, metrics,
                             args.p_occ, args.p_free)
    print(f"{res.report.message}; {res.report.iterations} iterations, cost {res.report.final_cost:.6g}")
    if metrics:
        for k in ("init_mae_translation", "mae_translation", "init_mae_rotation", "mae_rotation", "auc"):
            print(f"  {k} {metrics[k]:.6g}")
    print(f"outputs in {out}: {', '.join(sorted(p.name for p in paths.values()))}")
    return 0


def cmd_evaluate(args) -> int:
    est = io.read_trajectory(args.estimate)
    gt = io.parse_dataset(args.dataset).gt_poses() if args.dataset else io.read_trajectory(args.gt)
    if any(p is None for p in gt):
        raise ValueError("reference has no ground truth on every record")
    rep = pose_errors(anchor_poses(est), anchor_poses(gt))
    for k, v in rep.as_dict().items():
        print(f"{k} {v:.9g}")
    if args.out:
        io.write_metrics(rep.as_dict(), args.out)
    return 0


def cmd_subsample(args) -> int:
    ds = subsample_dataset(io.parse_dataset(args.dataset), args.rate)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.write_dataset(ds, args.out)
    print(f"kept {len(ds)} scans -> {args.out}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "evaluate": cmd_evaluate, "subsample": cmd_subsample}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SolverError, ValueError, OSError) as exc:
        print(f"occslam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
