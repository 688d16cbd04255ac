"""Equidistant beam sampling: turn raw scans into labelled evidence points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .core import Z_FREE, Z_OCC, Dataset, ScanRecord

MIN_RANGE = 0.1
# absorbs float noise in r/s when r is an exact multiple of s
_MULT_TOL = 1e-9


@dataclass(frozen=True)
class SamplePoint:
    x_local: np.ndarray
    z: float
    occupied: bool


@dataclass(frozen=True, eq=False)
class SampledScan:
    """The sample set of one scan, stored column-wise."""

    xy: np.ndarray  # (k, 2) local-frame positions
    z: np.ndarray  # (k,)
    occupied: np.ndarray  # (k,) bool

    @property
    def k(self) -> int:
        return self.z.size

    @property
    def points(self) -> list:
        return list(iter(self))

    def __iter__(self) -> Iterator[SamplePoint]:
        for xy, z, occ in zip(self.xy, self.z, self.occupied):
            yield SamplePoint(xy.copy(), float(z), bool(occ))

    def __len__(self):
        return self.k


@dataclass(frozen=True, eq=False)
class SampleSet:
    """All sample points of a dataset flattened, with their owning scan index."""

    pose_index: np.ndarray  # (S,) int
    xy: np.ndarray  # (S, 2)
    z: np.ndarray  # (S,)
    occupied: np.ndarray  # (S,)
    n_scans: int

    def __len__(self):
        return self.z.size

    def subset(self, mask) -> "SampleSet":
        return SampleSet(
            self.pose_index[mask], self.xy[mask], self.z[mask], self.occupied[mask], self.n_scans
        )


def sample_scan(scan: ScanRecord, resolution_s: float) -> SampledScan:
    """Sample every beam at multiples of ``resolution_s`` plus its endpoint.

    Free points sit at ``s, 2s, ...`` strictly before the measured range; the
    occupied point sits exactly at the range.  Beams without a return yield
    free points up to ``range_max`` only.  Beams shorter than 0.1 m are
    dropped as self-hits.
    """
    s = float(resolution_s)
    if not (math.isfinite(s) and s > 0):
        raise ValueError(f"resolution must be positive, got {resolution_s!r}")

    ranges = scan.ranges
    angles = scan.angles
    hit = ~scan.no_return
    keep = ranges >= MIN_RANGE
    ranges, angles, hit = ranges[keep], angles[keep], hit[keep]

    n_free = np.where(
        hit,
        np.ceil(ranges / s - _MULT_TOL) - 1,
        np.floor(scan.range_max / s + _MULT_TOL),
    ).astype(np.int64)
    n_free = np.maximum(n_free, 0)

    beam_of_free = np.repeat(np.arange(ranges.size), n_free)
    starts = np.cumsum(n_free) - n_free
    step = np.arange(beam_of_free.size) - np.repeat(starts, n_free) + 1
    d_free = step * s

    d = np.concatenate([d_free, ranges[hit]])
    a = np.concatenate([angles[beam_of_free], angles[hit]])
    occupied = np.concatenate([np.zeros(d_free.size, bool), np.ones(int(hit.sum()), bool)])
    xy = np.column_stack([d * np.cos(a), d * np.sin(a)])
    z = np.where(occupied, Z_OCC, Z_FREE)
    return SampledScan(xy, z, occupied)


def sample_dataset(dataset: Dataset, resolution_s: float) -> list:
    return [sample_scan(r, resolution_s) for r in dataset.records]


def pack_samples(scans: Sequence[SampledScan]) -> SampleSet:
    counts = [s.k for s in scans]
    return SampleSet(
        pose_index=np.repeat(np.arange(len(scans)), counts),
        xy=np.concatenate([s.xy for s in scans]).reshape(-1, 2),
        z=np.concatenate([s.z for s in scans]),
        occupied=np.concatenate([s.occupied for s in scans]),
        n_scans=len(scans),
    )
