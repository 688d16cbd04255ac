"""Trajectory and occupancy-map accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .core import Pose2, poses_to_array, wrap_angle
from .grid import GridMap, HitMap, stencil

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
LABELS = ("free", "occupied", "unknown")


@dataclass
class PoseErrorReport:
    mae_translation: float
    mae_rotation: float
    rmse_translation: float
    rmse_rotation: float
    translation_errors: np.ndarray
    rotation_errors: np.ndarray

    def as_dict(self) -> dict:
        return {
            "mae_translation": self.mae_translation,
            "mae_rotation": self.mae_rotation,
            "rmse_translation": self.rmse_translation,
            "rmse_rotation": self.rmse_rotation,
        }


@dataclass
class MapErrorReport:
    auc: float
    precision_per_class: dict
    precision_known: float
    confusion: np.ndarray  # rows: ground truth, columns: estimate; order free/occupied/unknown

    def as_dict(self) -> dict:
        out = {"auc": self.auc, "precision_known": self.precision_known}
        out.update({f"precision_{k}": v for k, v in self.precision_per_class.items()})
        return out


def pose_errors(estimate: Sequence[Pose2], gt: Sequence[Pose2]) -> PoseErrorReport:
    """MAE and RMSE of translation (m) and rotation (rad); no alignment step."""
    if len(estimate) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(estimate)} vs {len(gt)}")
    if len(gt) == 0:
        raise ValueError("empty trajectories")
    e, g = poses_to_array(estimate), poses_to_array(gt)
    et = np.linalg.norm(e[:, :2] - g[:, :2], axis=1)
    er = np.abs(wrap_angle(e[:, 2] - g[:, 2]))
    return PoseErrorReport(
        float(et.mean()), float(er.mean()),
        float(np.sqrt(np.mean(et**2))), float(np.sqrt(np.mean(er**2))),
        et, er,
    )


def cell_probabilities(gmap: GridMap) -> np.ndarray:
    """Occupancy probability at every cell centre, shape ``(l_w, l_h)``."""
    geom = gmap.geom
    w, h = np.meshgrid(np.arange(geom.l_w) + 0.5, np.arange(geom.l_h) + 0.5, indexing="ij")
    st = stencil(np.column_stack([w.ravel(), h.ravel()]), geom)
    e = np.einsum("sk,sk->s", st.weights, gmap.values.ravel()[st.nodes])
    return (1.0 / (1.0 + np.exp(-e))).reshape(geom.l_w, geom.l_h)


def cell_hits(hitmap: HitMap) -> np.ndarray:
    """Hit mass of the four nodes around each cell, shape ``(l_w, l_h)``."""
    c = hitmap.counts
    return c[:-1, :-1] + c[1:, :-1] + c[:-1, 1:] + c[1:, 1:]


def classify_map(
    gmap: GridMap, hitmap: HitMap, p_occ_thresh: float = 0.6, p_free_thresh: float = 0.4, min_hits: float = 0.5
) -> np.ndarray:
    """Per-cell labels FREE / OCCUPIED / UNKNOWN."""
    if not 0 < p_free_thresh < p_occ_thresh < 1:
        raise ValueError("need 0 < p_free_thresh < p_occ_thresh < 1")
    p = cell_probabilities(gmap)
    labels = np.full(p.shape, UNKNOWN, dtype=np.int8)
    seen = cell_hits(hitmap) >= min_hits
    labels[seen & (p >= p_occ_thresh)] = OCCUPIED
    labels[seen & (p <= p_free_thresh)] = FREE
    return labels


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    labels = np.asarray(labels, dtype=bool).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def map_errors(estimate_labels: np.ndarray, gt_labels: np.ndarray, estimate_probs: np.ndarray) -> MapErrorReport:
    est, gt = np.asarray(estimate_labels), np.asarray(gt_labels)
    if est.shape != gt.shape or np.shape(estimate_probs) != est.shape:
        raise ValueError("label and probability grids must share a shape")
    confusion = np.zeros((3, 3), dtype=np.int64)
    np.add.at(confusion, (gt.ravel(), est.ravel()), 1)
    both = (est != UNKNOWN) & (gt != UNKNOWN)
    if not both.any():
        raise ValueError("no cells are known in both maps")
    auc = roc_auc(gt[both] == OCCUPIED, np.asarray(estimate_probs)[both])
    precision = {}
    for c in (FREE, OCCUPIED, UNKNOWN):
        col = confusion[:, c].sum()
        precision[LABELS[c]] = float(confusion[c, c] / col) if col else float("nan")
    # free+occupied precision: correct fraction among all cells the estimate calls free or occupied
    called = confusion[:, :2].sum()
    precision_known = float(np.trace(confusion[:2, :2]) / called) if called else float("nan")
    return MapErrorReport(auc, precision, precision_known, confusion)
