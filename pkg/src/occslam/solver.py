"""Gauss-Newton joint optimization of poses and map with annealed smoothing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Dataset, Pose2, SolverConfig, anchor_poses, array_to_poses, poses_to_array, wrap_angle
from .grid import (
    GridGeometry,
    GridMap,
    HitMap,
    compute_node_gradients,
    geometry_for,
    initialize_map,
    sample_stencil,
    scatter_hits,
)
from .objective import StateLayout, Weights, assemble_system, build_smoothing_matrix, evaluate_cost
from .sampling import pack_samples, sample_dataset

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class LinearSolveError(SolverError):
    pass


@dataclass
class CovarianceSummary:
    pose_marginals: np.ndarray  # (n, 3, 3) for poses 1..n
    node_variances: np.ndarray  # (l_w+1, l_h+1) or flat when no geometry is given


@dataclass
class SolverState:
    poses: np.ndarray  # (n+1, 3), row 0 fixed at the origin
    map: GridMap
    hitmap: HitMap
    w_S_current: float
    k: int = 0
    last_step_sq_norm: float = math.inf
    cost_history: list = field(default_factory=list)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    final_cost: float
    cost_history: list
    w_S_history: list
    step_sq_history: list
    skipped_samples_per_iter: list
    halvings_per_iter: list
    hitmap: HitMap
    covariance: Optional[CovarianceSummary] = None
    message: str = ""


def smoothing_weight(k: int, config: SolverConfig) -> float:
    """Smoothing weight in force at iteration ``k`` (1-based)."""
    return max(config.w_S_initial / config.d_S ** (k // config.tau_S), config.w_S_floor)


def _factorize(H: sp.spmatrix):
    """Symmetric-mode sparse LU with a fill-reducing ordering.

    Diagonal pivoting is enforced, so for a symmetric matrix the pivots are
    those of an LDL^T factorization and are all positive iff ``H`` is
    positive definite.
    """
    try:
        lu = spla.splu(
            sp.csc_matrix(H),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError:
        return None
    d = lu.U.diagonal()
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        return None
    return lu


def factorize_spd(H: sp.spmatrix, tikhonov: float = 0.0, retries: int = 5):
    """Factor ``H + lam*I``, growing ``lam`` tenfold on failure; returns ``(lu, lam)``."""
    lam = tikhonov
    n = H.shape[0]
    for attempt in range(retries + 1):
        M = H + lam * sp.identity(n, format="csc") if lam > 0 else H
        lu = _factorize(M)
        if lu is not None:
            return lu, lam, M
        if lam <= 0:
            break
        log.warning("normal matrix not positive definite with lambda=%g, retrying", lam)
        lam *= 10.0
    raise LinearSolveError(f"normal matrix is not positive definite (last lambda={lam:g})")


def solve_linear(normal: sp.spmatrix, rhs: np.ndarray, tikhonov: float = 0.0) -> np.ndarray:
    """Solve the SPD system ``normal @ x = rhs`` to relative residual < 1e-10."""
    normal = sp.csc_matrix(normal)
    if (abs(normal - normal.T) > 1e-9 * max(1.0, abs(normal).max())).nnz:
        raise ValueError("normal matrix must be symmetric")
    lu, _, M = factorize_spd(normal, tikhonov)
    x = lu.solve(rhs)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    for _ in range(3):
        r = rhs - M @ x
        if np.linalg.norm(r) <= 1e-12 * scale:
            break
        x += lu.solve(r)
    return x


def extract_covariance(
    normal: sp.spmatrix, layout: StateLayout, geom: Optional[GridGeometry] = None, chunk: int = 256
) -> CovarianceSummary:
    """Pose marginal blocks and node variances of ``normal^-1`` by column solves."""
    lu, _, _ = factorize_spd(sp.csc_matrix(normal), 0.0, retries=0)
    dim = layout.dim
    diag = np.empty(dim)
    pose_blocks = np.empty((layout.n_poses, 3, 3))
    for start in range(0, dim, chunk):
        stop = min(dim, start + chunk)
        E = np.zeros((dim, stop - start))
        E[np.arange(start, stop), np.arange(stop - start)] = 1.0
        X = lu.solve(E)
        diag[start:stop] = X[np.arange(start, stop), np.arange(stop - start)]
        for c in range(start, min(stop, 3 * layout.n_poses)):
            i, a = divmod(c, 3)
            pose_blocks[i, :, a] = X[3 * i : 3 * i + 3, c - start]
    if np.any(diag < 0):
        raise LinearSolveError("inverse has negative variances; matrix is indefinite")
    pose_blocks = 0.5 * (pose_blocks + pose_blocks.transpose(0, 2, 1))
    nodes = diag[layout.node_slice]
    if geom is not None:
        nodes = nodes.reshape(geom.shape)
    return CovarianceSummary(pose_blocks, nodes)


ProgressCallback = Callable[[int, float, float, float, int], None]


def solve(
    dataset: Dataset,
    init_poses: Sequence[Pose2],
    config: Optional[SolverConfig] = None,
    callback: Optional[ProgressCallback] = None,
):
    """Jointly refine poses and the occupancy map.

    Returns ``(poses, GridMap, SolveReport)``.  The initial guess is
    re-anchored so that pose 0 is the origin.  ``callback`` receives
    ``(k, cost, step_sq_norm, w_S, skipped)`` once per iteration.
    """
    config = config or SolverConfig()
    if len(init_poses) != len(dataset):
        raise ValueError(f"{len(init_poses)} initial poses for {len(dataset)} scans")
    poses = poses_to_array(anchor_poses(list(init_poses)))
    poses[0] = 0.0
    continuous = config.continuous_map

    samples = pack_samples(sample_dataset(dataset, config.resolution_s))
    geom = geometry_for(samples, poses, config.resolution_s, config.map_margin)
    gmap = initialize_map(samples, poses, geom, continuous)
    st = sample_stencil(samples, poses, geom, continuous)
    hitmap = scatter_hits(samples, poses, geom, continuous, st=st)
    A = build_smoothing_matrix(geom)
    AtA = (A.T @ A).tocsr()
    odoms = dataset.odoms if (dataset.has_odometry and config.w_O > 0) else None
    log.info(
        "solve: %d scans, %d samples, grid %dx%d (%d nodes)",
        len(dataset), len(samples), geom.l_w, geom.l_h, geom.n_nodes,
    )

    state = SolverState(poses, gmap, hitmap, smoothing_weight(1, config))
    w_hist, step_hist, skip_hist, halv_hist = [], [], [], []
    converged = False
    message = "iteration limit reached"
    system = None

    k = 1
    while k <= config.tau_k:
        w_S = smoothing_weight(k, config)
        state.w_S_current = w_S
        weights = Weights(config.w_Z, config.w_O, w_S)
        grads = compute_node_gradients(state.map)
        system = assemble_system(
            state.poses, state.map, state.hitmap, samples, odoms, A, weights,
            grads, continuous, config.gradient_mode, AtA, st=st,
        )
        if not math.isfinite(system.cost):
            raise SolverError(f"non-finite cost at iteration {k}")
        if not state.cost_history:
            state.cost_history.append(system.cost)
            w_hist.append(w_S)
        delta = solve_linear(system.H, system.rhs, config.tikhonov)

        def line_search(delta):
            alpha, halvings = 1.0, 0
            while True:
                trial = _apply_step(state.poses, state.map, delta, alpha, system.layout)
                trial_st = sample_stencil(samples, trial[0], geom, continuous)
                trial_hits = scatter_hits(samples, trial[0], geom, continuous, st=trial_st)
                trial_cost, _, skipped = evaluate_cost(
                    trial[0], trial[1], trial_hits, samples, odoms, A, weights, continuous, st=trial_st
                )
                if not config.step_control or trial_cost <= system.cost:
                    return alpha, halvings, trial, trial_st, trial_hits, trial_cost, skipped
                if halvings >= config.max_halvings:
                    return None
                alpha *= 0.5
                halvings += 1

        found = line_search(delta)
        block = False
        if found is None and config.stall_fallback == "block":
            # the joint direction does not descend; try poses alone, then the map alone
            for part in (system.layout.pose_slice, system.layout.node_slice):
                delta = _block_step(system, part, config.tikhonov)
                found = line_search(delta)
                if found is not None:
                    block = True
                    log.debug("iteration %d: block step on %s", k, "poses" if part.start == 0 else "map")
                    break

        if found is None:
            # no descent at this smoothing weight; move on to the next annealing stage
            next_k = (k // config.tau_S + 1) * config.tau_S
            if smoothing_weight(next_k, config) == w_S or next_k > config.tau_k:
                message = f"line search failed at iteration {k}"
                break
            k = next_k
            continue

        alpha, halvings, (trial_poses, trial_map), trial_st, trial_hits, trial_cost, skipped = found
        step_sq = float(alpha**2 * (delta @ delta))
        if not math.isfinite(trial_cost):
            raise SolverError(f"non-finite cost after iteration {k}")
        state.poses, state.map, state.hitmap = trial_poses, trial_map, trial_hits
        st = trial_st
        state.k = k
        state.last_step_sq_norm = step_sq
        state.cost_history.append(trial_cost)
        w_hist.append(w_S)
        step_hist.append(step_sq)
        skip_hist.append(skipped)
        halv_hist.append(halvings)
        if skipped:
            log.debug("iteration %d: %d samples outside the map", k, skipped)
        if callback is not None:
            callback(k, trial_cost, step_sq, w_S, skipped)
        log.debug("iter %d cost %.6g step %.3g w_S %g halvings %d", k, trial_cost, step_sq, w_S, halvings)
        # a partial step says nothing about joint convergence
        if step_sq < config.tau_Delta and not block:
            converged = True
            message = f"step below tolerance at iteration {k}"
            break
        k += 1

    covariance = None
    if config.compute_covariance:
        weights = Weights(config.w_Z, config.w_O, state.w_S_current)
        final = assemble_system(
            state.poses, state.map, state.hitmap, samples, odoms, A, weights,
            compute_node_gradients(state.map), continuous, config.gradient_mode, AtA, st=st,
        )
        H = final.H + config.tikhonov * sp.identity(final.layout.dim, format="csr")
        try:
            covariance = extract_covariance(H, final.layout, geom)
        except LinearSolveError as exc:
            log.warning("covariance unavailable: %s", exc)

    report = SolveReport(
        converged=converged,
        iterations=len(step_hist),
        final_cost=state.cost_history[-1],
        cost_history=state.cost_history,
        w_S_history=w_hist,
        step_sq_history=step_hist,
        skipped_samples_per_iter=skip_hist,
        halvings_per_iter=halv_hist,
        hitmap=state.hitmap,
        covariance=covariance,
        message=message,
    )
    return array_to_poses(state.poses), state.map, report


def _block_step(system, part: slice, tikhonov: float) -> np.ndarray:
    """Gauss-Newton step over one block of the state with the other held fixed."""
    H = sp.csr_matrix(system.H)[part][:, part]
    delta = np.zeros_like(system.rhs)
    delta[part] = solve_linear(H, system.rhs[part], tikhonov)
    return delta


def _apply_step(pose_arr, gmap, delta, alpha, layout: StateLayout):
    poses = pose_arr.copy()
    poses[1:] += alpha * delta[layout.pose_slice].reshape(-1, 3)
    poses[1:, 2] = wrap_angle(poses[1:, 2])
    values = gmap.values + alpha * delta[layout.node_slice].reshape(gmap.geom.shape)
    return poses, GridMap(gmap.geom, values)
