"""Continuous occupancy map on a regular node lattice.

Node ``(w, h)`` sits at world position ``origin + s * (w, h)`` and its value
lives at ``values[w, h]``.  Values between nodes are bilinear blends of the
four surrounding nodes.  The same stencil, used in reverse, scatters unit
hits onto the lattice to build the hit map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import Pose2, poses_to_array, rot
from .sampling import SampledScan, SampleSet, pack_samples

log = logging.getLogger(__name__)


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    origin_t0: tuple
    resolution_s: float
    l_w: int
    l_h: int

    def __post_init__(self):
        object.__setattr__(self, "origin_t0", tuple(float(v) for v in self.origin_t0))
        if self.l_w < 1 or self.l_h < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not self.resolution_s > 0:
            raise ValueError("resolution must be positive")

    @property
    def shape(self) -> tuple:
        return (self.l_w + 1, self.l_h + 1)

    @property
    def n_nodes(self) -> int:
        return (self.l_w + 1) * (self.l_h + 1)

    def node_index(self, w, h):
        return np.asarray(w) * (self.l_h + 1) + np.asarray(h)

    def node_world(self, w, h) -> np.ndarray:
        return np.asarray(self.origin_t0) + self.resolution_s * np.array([w, h], dtype=float)

    @classmethod
    def covering(cls, points_world: np.ndarray, resolution_s: float, margin: float) -> "GridGeometry":
        """Smallest lattice covering ``points_world`` padded by ``margin`` meters."""
        pts = np.asarray(points_world, dtype=float).reshape(-1, 2)
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        n = np.maximum(np.ceil((hi - lo) / resolution_s).astype(int), 1)
        return cls(tuple(lo), float(resolution_s), int(n[0]), int(n[1]))


@dataclass(eq=False)
class GridMap:
    geom: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.geom.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.geom.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("map values must be finite")

    @classmethod
    def zeros(cls, geom: GridGeometry) -> "GridMap":
        return cls(geom, np.zeros(geom.shape))


@dataclass(eq=False)
class HitMap:
    geom: GridGeometry
    counts: np.ndarray
    skipped: int = 0

    @property
    def total(self) -> float:
        return float(self.counts.sum())


class Stencil(NamedTuple):
    """Four-node interpolation stencil for a batch of grid coordinates."""

    nodes: np.ndarray  # (S, 4) flat node indices
    weights: np.ndarray  # (S, 4)
    inside: np.ndarray  # (S,) bool
    a0: np.ndarray  # (S,) fractional offsets inside the cell
    b0: np.ndarray


def world_to_grid(x_local, pose: Pose2, geom: GridGeometry) -> np.ndarray:
    """Continuous grid coordinate of a robot-frame point seen from ``pose``."""
    x_local = np.asarray(x_local, dtype=float)
    world = x_local @ rot(pose.theta) + pose.t  # row-vector form of R^T x + t
    return (world - np.asarray(geom.origin_t0)) / geom.resolution_s


def project_points(xy: np.ndarray, pose_arr: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Vectorized :func:`world_to_grid`; ``pose_arr`` holds one (x, y, theta) row per point."""
    c, s = np.cos(pose_arr[:, 2]), np.sin(pose_arr[:, 2])
    wx = c * xy[:, 0] - s * xy[:, 1] + pose_arr[:, 0]
    wy = s * xy[:, 0] + c * xy[:, 1] + pose_arr[:, 1]
    o = geom.origin_t0
    return np.column_stack([(wx - o[0]) / geom.resolution_s, (wy - o[1]) / geom.resolution_s])


def stencil(P: np.ndarray, geom: GridGeometry, continuous: bool = True) -> Stencil:
    """Bilinear (or nearest-node) stencil; out-of-bounds rows get zero weights.

    Node order is ``[(w,h), (w+1,h), (w,h+1), (w+1,h+1)]`` with weights
    ``[a1*b1, a0*b1, a1*b0, a0*b0]``.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    x, y = P[:, 0], P[:, 1]
    inside = (x >= 0) & (x <= geom.l_w) & (y >= 0) & (y <= geom.l_h)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    w = np.minimum(np.floor(xs).astype(np.int64), geom.l_w - 1)
    h = np.minimum(np.floor(ys).astype(np.int64), geom.l_h - 1)
    a0, b0 = xs - w, ys - h
    a1, b1 = 1.0 - a0, 1.0 - b0
    if continuous:
        weights = np.column_stack([a1 * b1, a0 * b1, a1 * b0, a0 * b0])
    else:
        corner = (a0 >= 0.5).astype(np.int64) + 2 * (b0 >= 0.5).astype(np.int64)
        weights = np.zeros((P.shape[0], 4))
        weights[np.arange(P.shape[0]), corner] = 1.0
    weights[~inside] = 0.0
    stride = geom.l_h + 1
    base = w * stride + h
    nodes = base[:, None] + np.array([0, stride, 1, stride + 1])
    return Stencil(nodes, weights, inside, a0, b0)


def _checked(P, geom, continuous=True):
    st = stencil(P, geom, continuous)
    if not np.all(st.inside):
        bad = np.asarray(P, dtype=float).reshape(-1, 2)[~st.inside][0]
        raise OutOfBoundsError(f"grid coordinate {bad} outside [0,{geom.l_w}]x[0,{geom.l_h}]")
    return st


def _blend(flat_values: np.ndarray, st: Stencil) -> np.ndarray:
    return np.einsum("sk,sk...->s...", st.weights, flat_values[st.nodes])


def interpolate(gmap: GridMap, P, continuous: bool = True):
    """Map value at continuous grid coordinate(s) ``P``."""
    st = _checked(P, gmap.geom, continuous)
    out = _blend(gmap.values.ravel(), st)
    return float(out[0]) if np.ndim(P) == 1 else out


def compute_node_gradients(gmap: GridMap) -> np.ndarray:
    """Per-node gradient in grid units, shape ``(l_w+1, l_h+1, 2)``.

    Central differences inside, one-sided differences on the border.
    """
    gw, gh = np.gradient(gmap.values)
    return np.stack([gw, gh], axis=-1)


def interpolate_gradient(gmap: GridMap, node_gradients: np.ndarray, P, continuous: bool = True):
    """Bilinear blend of the four surrounding node gradients."""
    st = _checked(P, gmap.geom, continuous)
    out = _blend(node_gradients.reshape(-1, 2), st)
    return out[0] if np.ndim(P) == 1 else out


def patch_gradient(gmap: GridMap, P):
    """Exact derivative of the bilinear patch containing ``P`` (grid units)."""
    st = _checked(P, gmap.geom)
    return _patch_gradient(gmap.values.ravel(), st)[0 if np.ndim(P) == 1 else slice(None)]


def _patch_gradient(flat_values: np.ndarray, st: Stencil) -> np.ndarray:
    m = flat_values[st.nodes]
    a0, b0 = st.a0, st.b0
    gx = (1 - b0) * (m[:, 1] - m[:, 0]) + b0 * (m[:, 3] - m[:, 2])
    gy = (1 - a0) * (m[:, 2] - m[:, 0]) + a0 * (m[:, 3] - m[:, 1])
    return np.column_stack([gx, gy])


def _as_sample_set(samples) -> SampleSet:
    if isinstance(samples, SampleSet):
        return samples
    if isinstance(samples, SampledScan):
        samples = [samples]
    return pack_samples(samples)


def _as_pose_array(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.reshape(-1, 3)
    if isinstance(poses, Pose2):
        poses = [poses]
    return poses_to_array(poses)


def project_samples(samples, poses, geom: GridGeometry) -> np.ndarray:
    ss = _as_sample_set(samples)
    parr = _as_pose_array(poses)
    return project_points(ss.xy, parr[ss.pose_index], geom)


def sample_stencil(samples, poses, geom: GridGeometry, continuous: bool = True) -> Stencil:
    return stencil(project_samples(samples, poses, geom), geom, continuous)


def scatter_hits(samples, poses, geom: GridGeometry, continuous: bool = True, st: Stencil | None = None) -> HitMap:
    """Distribute one unit hit per projected sample over its stencil nodes.

    Points landing outside the lattice are skipped and counted in
    ``HitMap.skipped``.
    """
    if st is None:
        st = sample_stencil(samples, poses, geom, continuous)
    counts = np.bincount(st.nodes.ravel(), st.weights.ravel(), minlength=geom.n_nodes)
    skipped = int((~st.inside).sum())
    if skipped:
        log.debug("scatter_hits: %d of %d points outside the map", skipped, st.inside.size)
    return HitMap(geom, counts.reshape(geom.shape), skipped)


def hit_at(hitmap: HitMap, P, continuous: bool = True):
    st = _checked(P, hitmap.geom, continuous)
    out = _blend(hitmap.counts.ravel(), st)
    return float(out[0]) if np.ndim(P) == 1 else out


def initialize_map(samples, poses, geom: GridGeometry, continuous: bool = True) -> GridMap:
    """Additive evidence accumulation: each point spreads ``z`` with its stencil weights."""
    ss = _as_sample_set(samples)
    P = project_samples(ss, poses, geom)
    st = stencil(P, geom, continuous)
    vals = np.bincount(
        st.nodes.ravel(), (st.weights * ss.z[:, None]).ravel(), minlength=geom.n_nodes
    )
    return GridMap(geom, vals.reshape(geom.shape))


def geometry_for(samples, poses, resolution_s: float, margin: float) -> GridGeometry:
    """Lattice covering every sample projected with ``poses``, padded by ``margin``."""
    ss = _as_sample_set(samples)
    parr = _as_pose_array(poses)
    world = project_points(ss.xy, parr[ss.pose_index], GridGeometry((0.0, 0.0), 1.0, 1, 1))
    world = np.vstack([world, parr[:, :2]])
    return GridGeometry.covering(world, resolution_s, margin)
