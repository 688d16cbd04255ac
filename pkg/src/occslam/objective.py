"""Residuals, Jacobians and the normal equations of the joint pose/map problem.

The state stacks poses ``1..n`` (pose 0 is the fixed gauge) followed by all
map node values.  Residuals are ``z - M(P)/N(P)`` for every sample,
``O_i - F^O_i`` for every odometry edge and ``A @ M`` for the smoothing
rows; all Jacobians below are Jacobians of these residuals.  The hit map
``N`` is held constant while linearizing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import OdomIncrement, Pose2, poses_to_array, rot, rot_deriv, wrap_angle
from .grid import (
    GridGeometry,
    GridMap,
    HitMap,
    _blend,
    _checked,
    _patch_gradient,
    Stencil,
    compute_node_gradients,
    sample_stencil,
    world_to_grid,
)
from .sampling import SamplePoint, SampleSet

EPS_N = 1e-6


@dataclass(frozen=True)
class StateLayout:
    n_poses: int  # variable poses, excluding pose 0
    n_nodes: int

    @property
    def dim(self) -> int:
        return 3 * self.n_poses + self.n_nodes

    def pose_offset(self, i: int) -> int:
        if not 1 <= i <= self.n_poses:
            raise IndexError(f"pose {i} has no state columns")
        return 3 * (i - 1)

    def node_offset(self, node) -> np.ndarray:
        return 3 * self.n_poses + np.asarray(node)

    @property
    def pose_slice(self) -> slice:
        return slice(0, 3 * self.n_poses)

    @property
    def node_slice(self) -> slice:
        return slice(3 * self.n_poses, self.dim)


@dataclass(frozen=True)
class Weights:
    w_Z: float = 1.0
    w_O: float = 1.0
    w_S: float = 0.1


@dataclass(eq=False)
class ResidualBlock:
    """One kind of residual with its Jacobian as COO triplets over state columns."""

    kind: str
    rows: np.ndarray
    residual: np.ndarray
    jac_rows: np.ndarray
    jac_cols: np.ndarray
    jac_vals: np.ndarray
    weight: object


# -- single-item API ---------------------------------------------------------


def observation_residual(sample: SamplePoint, pose: Pose2, gmap: GridMap, hitmap: HitMap):
    """``z - M(P)/N(P)``, or ``None`` when the hit multiplier is ~0."""
    P = world_to_grid(sample.x_local, pose, gmap.geom)
    st = _checked(P, gmap.geom)
    n = float(_blend(hitmap.counts.ravel(), st)[0])
    if n <= EPS_N:
        return None
    return sample.z - float(_blend(gmap.values.ravel(), st)[0]) / n


def _dP_dtheta(xy: np.ndarray, theta: np.ndarray, s: float) -> np.ndarray:
    """``(R')^T x / s`` for each row."""
    c, sn = np.cos(theta), np.sin(theta)
    return np.column_stack([-sn * xy[:, 0] - c * xy[:, 1], c * xy[:, 0] - sn * xy[:, 1]]) / s


def observation_jacobian_pose(
    sample: SamplePoint, pose: Pose2, gmap: GridMap, node_gradients, hitmap: HitMap,
    gradient_mode: str = "interpolated",
) -> np.ndarray:
    """1x3 row ``d(residual)/d(x, y, theta)``."""
    P = world_to_grid(sample.x_local, pose, gmap.geom)
    st = _checked(P, gmap.geom)
    n = float(_blend(hitmap.counts.ravel(), st)[0])
    if gradient_mode == "exact":
        g = _patch_gradient(gmap.values.ravel(), st)[0]
    else:
        g = _blend(np.asarray(node_gradients).reshape(-1, 2), st)[0]
    s = gmap.geom.resolution_s
    dth = _dP_dtheta(np.asarray(sample.x_local, float).reshape(1, 2), np.array([pose.theta]), s)[0]
    return -np.array([g[0] / s, g[1] / s, g @ dth]) / n


def observation_jacobian_map(sample: SamplePoint, pose: Pose2, hitmap: HitMap):
    """``(node indices, values)`` of the residual's derivative w.r.t. the four stencil nodes."""
    P = world_to_grid(sample.x_local, pose, hitmap.geom)
    st = _checked(P, hitmap.geom)
    n = float(_blend(hitmap.counts.ravel(), st)[0])
    return st.nodes[0], -st.weights[0] / n


def odometry_residual(odom: OdomIncrement, prev: Pose2, nxt: Pose2) -> np.ndarray:
    dt = odom.dt - rot(prev.theta) @ (nxt.t - prev.t)
    return np.array([dt[0], dt[1], wrap_angle(odom.dtheta - nxt.theta + prev.theta)])


def odometry_jacobian(prev: Pose2, nxt: Pose2) -> np.ndarray:
    """3x6 derivative of the predicted increment ``F^O`` w.r.t. ``(t_prev, th_prev, t_next, th_next)``.

    The theta_prev column is ``R'(th_prev) (t_next - t_prev)``; finite
    differences confirm this is the derivative of the prediction
    ``R(th_prev)(t_next - t_prev)``.  The residual Jacobian is the negation.
    """
    R = rot(prev.theta)
    J = np.zeros((3, 6))
    J[:2, 0:2] = -R
    J[:2, 2] = rot_deriv(prev.theta) @ (nxt.t - prev.t)
    J[:2, 3:5] = R
    J[2, 2] = -1.0
    J[2, 5] = 1.0
    return J


def build_smoothing_matrix(geom: GridGeometry) -> sp.csr_matrix:
    """Difference operator pairing each node with its +w and +h neighbours."""
    idx = np.arange(geom.n_nodes).reshape(geom.shape)
    right_a, right_b = idx[:-1, :].ravel(), idx[1:, :].ravel()
    up_a, up_b = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    a = np.concatenate([right_a, up_a])
    b = np.concatenate([right_b, up_b])
    m = a.size
    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([a, b])
    vals = np.concatenate([np.ones(m), -np.ones(m)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, geom.n_nodes))


# -- vectorized evaluation ---------------------------------------------------


class ObservationTerms(NamedTuple):
    used: np.ndarray  # indices into the sample set
    pose_index: np.ndarray
    residual: np.ndarray
    pose_jac: np.ndarray  # (U, 3)
    nodes: np.ndarray  # (U, 4)
    node_jac: np.ndarray  # (U, 4)
    n_skipped: int


def observation_terms(
    samples: SampleSet,
    pose_arr: np.ndarray,
    gmap: GridMap,
    hitmap: HitMap,
    node_gradients: Optional[np.ndarray] = None,
    continuous: bool = True,
    gradient_mode: str = "interpolated",
    jacobians: bool = True,
    st: Optional[Stencil] = None,
) -> ObservationTerms:
    """Residuals (and Jacobians) of every usable sample.

    ``st`` may carry the stencil of the projected samples when the caller
    already has it for these poses.
    """
    geom = gmap.geom
    if st is None:
        st = sample_stencil(samples, pose_arr, geom, continuous)
    n = np.einsum("sk,sk->s", st.weights, hitmap.counts.ravel()[st.nodes])
    ok = st.inside & (n > EPS_N)
    used = np.flatnonzero(ok)
    if used.size < ok.size:
        st = type(st)(*(a[used] for a in st))
        n = n[used]
    m = np.einsum("sk,sk->s", st.weights, gmap.values.ravel()[st.nodes])
    residual = samples.z[used] - m / n
    pidx = samples.pose_index[used]
    if not jacobians:
        return ObservationTerms(used, pidx, residual, None, st.nodes, None, samples.z.size - used.size)

    s = geom.resolution_s
    if gradient_mode == "exact" and continuous:
        g = _patch_gradient(gmap.values.ravel(), st)
    else:
        if node_gradients is None:
            node_gradients = compute_node_gradients(gmap)
        g = np.einsum("sk,skd->sd", st.weights, node_gradients.reshape(-1, 2)[st.nodes])
    dth = _dP_dtheta(samples.xy[used], pose_arr[pidx, 2], s)
    pose_jac = -np.column_stack([g[:, 0] / s, g[:, 1] / s, np.einsum("sd,sd->s", g, dth)]) / n[:, None]
    node_jac = -st.weights / n[:, None]
    return ObservationTerms(used, pidx, residual, pose_jac, st.nodes, node_jac, samples.z.size - used.size)


class OdometryTerms(NamedTuple):
    residual: np.ndarray  # (n, 3) for edges 1..n
    jac: np.ndarray  # (n, 3, 6) residual Jacobian over (prev, next) pose columns
    info: np.ndarray  # (n, 3, 3) w_O * Sigma^-1


def odometry_terms(pose_arr: np.ndarray, odoms: Sequence[OdomIncrement], w_O: float) -> OdometryTerms:
    prev, nxt = pose_arr[:-1], pose_arr[1:]
    c, s = np.cos(prev[:, 2]), np.sin(prev[:, 2])
    d = nxt[:, :2] - prev[:, :2]
    pred = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])
    meas = np.array([o.as_array() for o in odoms]).reshape(-1, 3)
    res = np.empty_like(meas)
    res[:, :2] = meas[:, :2] - pred
    res[:, 2] = wrap_angle(meas[:, 2] - nxt[:, 2] + prev[:, 2])

    k = prev.shape[0]
    dF = np.zeros((k, 3, 6))
    dF[:, 0, 0], dF[:, 0, 1] = -c, -s
    dF[:, 1, 0], dF[:, 1, 1] = s, -c
    dF[:, 0, 2] = -s * d[:, 0] + c * d[:, 1]
    dF[:, 1, 2] = -c * d[:, 0] - s * d[:, 1]
    dF[:, 0, 3], dF[:, 0, 4] = c, s
    dF[:, 1, 3], dF[:, 1, 4] = -s, c
    dF[:, 2, 2], dF[:, 2, 5] = -1.0, 1.0
    info = w_O * np.linalg.inv(np.array([o.sigma for o in odoms]).reshape(-1, 3, 3))
    return OdometryTerms(res, -dF, info)


# -- system assembly ---------------------------------------------------------


@dataclass(eq=False)
class NormalSystem:
    H: sp.csr_matrix  # J^T W J
    rhs: np.ndarray  # -J^T W F
    cost: float
    cost_terms: dict
    layout: StateLayout
    n_used: int
    n_skipped: int


def _pose_arr(poses) -> np.ndarray:
    return poses.reshape(-1, 3) if isinstance(poses, np.ndarray) else poses_to_array(poses)


def evaluate_cost(
    pose_arr, gmap: GridMap, hitmap: HitMap, samples: SampleSet, odoms, A, weights: Weights,
    continuous: bool = True,
    st: Optional[Stencil] = None,
) -> tuple:
    """Objective value and its three weighted parts; no Jacobians."""
    pose_arr = _pose_arr(pose_arr)
    obs = observation_terms(samples, pose_arr, gmap, hitmap, continuous=continuous, jacobians=False, st=st)
    terms = {"observation": weights.w_Z * float(obs.residual @ obs.residual)}
    if odoms and weights.w_O > 0:
        od = odometry_terms(pose_arr, odoms, weights.w_O)
        terms["odometry"] = float(np.einsum("ei,eij,ej->", od.residual, od.info, od.residual))
    else:
        terms["odometry"] = 0.0
    fs = A @ gmap.values.ravel()
    terms["smoothing"] = weights.w_S * float(fs @ fs)
    return sum(terms.values()), terms, obs.n_skipped


def _group_sum(keys: np.ndarray, vals: np.ndarray, size: int):
    """Sum rows of ``vals`` sharing a key; returns (unique keys, sums)."""
    if size <= 4_000_000:
        present = np.bincount(keys, minlength=size) > 0
        uk = np.flatnonzero(present)
        slot = np.cumsum(present) - 1
        inv = slot[keys]
    else:
        uk, inv = np.unique(keys, return_inverse=True)
    ncol = vals.shape[1]
    flat = (inv[:, None] * ncol + np.arange(ncol)).ravel()
    sums = np.bincount(flat, vals.ravel(), minlength=uk.size * ncol).reshape(uk.size, ncol)
    return uk, sums


def assemble_system(
    poses,
    gmap: GridMap,
    hitmap: HitMap,
    samples: SampleSet,
    odoms: Optional[Sequence[OdomIncrement]],
    A: sp.spmatrix,
    weights: Weights,
    node_gradients: Optional[np.ndarray] = None,
    continuous: bool = True,
    gradient_mode: str = "interpolated",
    AtA: Optional[sp.spmatrix] = None,
    st: Optional[Stencil] = None,
) -> NormalSystem:
    """Build ``J^T W J``, ``-J^T W F`` and the cost by direct block accumulation.

    Observation rows touch a single pose and one cell, so their products are
    reduced per pose, per (pose, cell) pair and per cell with ``bincount``
    instead of forming ``J`` explicitly.
    """
    pose_arr = _pose_arr(poses)
    geom = gmap.geom
    n = pose_arr.shape[0] - 1
    layout = StateLayout(n, geom.n_nodes)
    npo = 3 * n
    obs = observation_terms(
        samples, pose_arr, gmap, hitmap, node_gradients, continuous, gradient_mode, st=st
    )
    wz = weights.w_Z
    r, jp, jn, nodes = obs.residual, obs.pose_jac, obs.node_jac, obs.nodes
    rows, cols, vals = [], [], []
    rhs = np.zeros(layout.dim)

    # map-map, grouped by the stencil's base node (one group per cell)
    base = nodes[:, 0]
    mm = wz * (jn[:, :, None] * jn[:, None, :]).reshape(-1, 16)
    cells, mm_sum = _group_sum(base, mm, geom.n_nodes)
    stride = geom.l_h + 1
    cell_nodes = cells[:, None] + np.array([0, stride, 1, stride + 1])
    rows.append(npo + np.repeat(cell_nodes, 4, axis=1).ravel())
    cols.append(npo + np.tile(cell_nodes, (1, 4)).ravel())
    vals.append(mm_sum.ravel())
    rhs[npo:] -= np.bincount(nodes.ravel(), (wz * jn * r[:, None]).ravel(), minlength=geom.n_nodes)

    var = obs.pose_index > 0
    if n > 0 and np.any(var):
        pi = obs.pose_index[var] - 1
        jpv, jnv, rv, bv = jp[var], jn[var], r[var], base[var]
        # pose-pose (block diagonal)
        pp = wz * (jpv[:, :, None] * jpv[:, None, :]).reshape(-1, 9)
        up, pp_sum = _group_sum(pi, pp, n)
        blk = 3 * up[:, None] + np.arange(3)
        rows.append(np.repeat(blk, 3, axis=1).ravel())
        cols.append(np.tile(blk, (1, 3)).ravel())
        vals.append(pp_sum.ravel())
        rhs[:npo] -= np.column_stack(
            [np.bincount(pi, wz * jpv[:, a] * rv, minlength=n) for a in range(3)]
        ).ravel()
        # pose-map, grouped by (pose, cell)
        pm = wz * (jpv[:, :, None] * jnv[:, None, :]).reshape(-1, 12)
        keys, pm_sum = _group_sum(pi * geom.n_nodes + bv, pm, n * geom.n_nodes)
        kp, kc = np.divmod(keys, geom.n_nodes)
        kn = kc[:, None] + np.array([0, stride, 1, stride + 1])
        r_idx = np.repeat(3 * kp[:, None] + np.arange(3), 4, axis=1)  # (K, 12)
        c_idx = npo + np.tile(kn, (1, 3))
        rows += [r_idx.ravel(), c_idx.ravel()]
        cols += [c_idx.ravel(), r_idx.ravel()]
        vals += [pm_sum.ravel(), pm_sum.ravel()]

    cost_obs = wz * float(r @ r)
    cost_odo = 0.0
    if odoms and weights.w_O > 0 and n > 0:
        od = odometry_terms(pose_arr, odoms, weights.w_O)
        J, info, res = od.jac, od.info, od.residual
        JtO = np.einsum("eki,ekl->eil", J, info)  # (e, 6, 3)
        blocks = np.einsum("eil,elj->eij", JtO, J)
        g = np.einsum("eil,el->ei", JtO, res)
        e_idx = np.arange(n)
        col6 = np.concatenate([3 * (e_idx - 1)[:, None] + np.arange(3), 3 * e_idx[:, None] + np.arange(3)], axis=1)
        keep = col6 >= 0
        rr = np.repeat(col6, 6, axis=1).reshape(n, 6, 6)
        cc = np.tile(col6, (1, 6)).reshape(n, 6, 6)
        mk = keep[:, :, None] & keep[:, None, :]
        rows.append(rr[mk])
        cols.append(cc[mk])
        vals.append(blocks[mk])
        np.subtract.at(rhs, col6[keep], g[keep])
        cost_odo = float(np.einsum("ei,eij,ej->", res, info, res))

    fs = A @ gmap.values.ravel()
    cost_smo = weights.w_S * float(fs @ fs)
    if AtA is None:
        AtA = (A.T @ A).tocsr()
    rhs[npo:] -= weights.w_S * (A.T @ fs)

    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(layout.dim, layout.dim),
    )
    if weights.w_S > 0:
        H = H + sp.block_diag([sp.csr_matrix((npo, npo)), weights.w_S * AtA], format="csr")
    terms = {"observation": cost_obs, "odometry": cost_odo, "smoothing": cost_smo}
    return NormalSystem(H.tocsr(), rhs, sum(terms.values()), terms, layout, obs.used.size, obs.n_skipped)


def build_jacobian(
    poses,
    gmap: GridMap,
    hitmap: HitMap,
    samples: SampleSet,
    odoms: Optional[Sequence[OdomIncrement]],
    A: sp.spmatrix,
    weights: Weights,
    node_gradients: Optional[np.ndarray] = None,
    continuous: bool = True,
    gradient_mode: str = "interpolated",
) -> tuple:
    """Explicit residual blocks, stacked ``J`` (csr), ``F`` and block-diagonal ``W``.

    Slower than :func:`assemble_system`; kept as the straightforward route
    for cross-checking it.
    """
    pose_arr = _pose_arr(poses)
    geom = gmap.geom
    n = pose_arr.shape[0] - 1
    layout = StateLayout(n, geom.n_nodes)
    blocks = []
    obs = observation_terms(samples, pose_arr, gmap, hitmap, node_gradients, continuous, gradient_mode)
    u = obs.residual.size
    row0 = 0
    rows_n = np.repeat(np.arange(u), 4)
    cols_n = layout.node_offset(obs.nodes.ravel())
    var = obs.pose_index > 0
    rows_p = np.repeat(np.flatnonzero(var), 3)
    cols_p = (3 * (obs.pose_index[var] - 1)[:, None] + np.arange(3)).ravel()
    blocks.append(ResidualBlock(
        "observation", np.arange(u), obs.residual,
        np.concatenate([rows_p, rows_n]), np.concatenate([cols_p, cols_n]),
        np.concatenate([obs.pose_jac[var].ravel(), obs.node_jac.ravel()]), weights.w_Z,
    ))
    row0 += u
    if odoms and weights.w_O > 0 and n > 0:
        od = odometry_terms(pose_arr, odoms, weights.w_O)
        jr, jc, jv = [], [], []
        for e in range(n):
            cols6 = np.r_[3 * (e - 1) + np.arange(3), 3 * e + np.arange(3)]
            for a in range(3):
                for b in range(6):
                    if cols6[b] >= 0:
                        jr.append(row0 + 3 * e + a)
                        jc.append(cols6[b])
                        jv.append(od.jac[e, a, b])
        blocks.append(ResidualBlock(
            "odometry", row0 + np.arange(3 * n), od.residual.ravel(),
            np.array(jr), np.array(jc), np.array(jv), od.info,
        ))
        row0 += 3 * n
    Acoo = A.tocoo()
    blocks.append(ResidualBlock(
        "smoothing", row0 + np.arange(A.shape[0]), A @ gmap.values.ravel(),
        row0 + Acoo.row, layout.node_offset(Acoo.col), Acoo.data.astype(float), weights.w_S,
    ))
    row0 += A.shape[0]

    J = sp.csr_matrix(
        (np.concatenate([b.jac_vals for b in blocks]),
         (np.concatenate([b.jac_rows for b in blocks]), np.concatenate([b.jac_cols for b in blocks]))),
        shape=(row0, layout.dim),
    )
    F = np.concatenate([b.residual for b in blocks])
    wblocks = []
    for b in blocks:
        if b.kind == "odometry":
            wblocks.extend(sp.csr_matrix(m) for m in b.weight)
        else:
            wblocks.append(sp.identity(b.residual.size, format="csr") * b.weight)
    W = sp.block_diag(wblocks, format="csr")
    return blocks, J, F, W
