"""Plain-text file formats and raster exports.

Every format opens with a magic word and an integer major version; readers
reject majors they do not know.

Dataset (``OCCSLAM-DATASET 1``), one line per record after optional
``META key value`` lines::

    SCAN <timestamp> <angle_min> <angle_increment> <range_max> <n> <r_1> ... <r_n>
         [ODOM <dx> <dy> <dtheta> <sigma 3x3 row-major, 9 values>]
         [GT <x> <y> <theta>] [INIT <x> <y> <theta>]

(all on one line).  Any range above ``range_max`` means no return; the
simulator writes ``range_max + 1``.

Trajectory (``OCCSLAM-TRAJECTORY 1``): ``<i> <x> <y> <theta>`` per line.

World (JSON): ``{"format": "occslam-world", "version": 1, "name": ...,
"segments": [[x1, y1, x2, y2], ...]}``.

Rasters are binary 8-bit PGM with a ``.meta`` sidecar (``OCCSLAM-RASTER 1``
followed by ``key value`` lines) holding the lattice geometry and the
value-to-pixel mapping.  Image row 0 is the top (largest y).

Metrics (``OCCSLAM-METRICS 1``): ``key value`` lines.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, OdomIncrement, Pose2, ScanRecord
from .evaluation import UNKNOWN, cell_probabilities, classify_map
from .grid import GridGeometry, GridMap, HitMap
from .simulator import World

DATASET_MAGIC = "OCCSLAM-DATASET"
TRAJECTORY_MAGIC = "OCCSLAM-TRAJECTORY"
RASTER_MAGIC = "OCCSLAM-RASTER"
METRICS_MAGIC = "OCCSLAM-METRICS"
WORLD_FORMAT = "occslam-world"
VERSION = 1
EVIDENCE_CLAMP = 10.0
OUTPUT_DIR_ENV = "OCCSLAM_OUTPUT_DIR"


class FormatError(ValueError):
    def __init__(self, message: str, path=None, line: Optional[int] = None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _check_header(lines: list, magic: str, path) -> int:
    if not lines:
        raise FormatError("empty file", path)
    parts = lines[0].split()
    if len(parts) != 2 or parts[0] != magic:
        raise FormatError(f"expected header '{magic} <version>'", path, 1)
    try:
        version = int(parts[1])
    except ValueError:
        raise FormatError(f"bad version {parts[1]!r}", path, 1) from None
    if version != VERSION:
        raise FormatError(f"unsupported {magic} version {version}", path, 1)
    return version


# -- datasets ----------------------------------------------------------------


def format_record(rec: ScanRecord) -> str:
    ranges = rec.ranges
    parts = ["SCAN", _num(rec.timestamp), _num(rec.angle_min), _num(rec.angle_increment),
             _num(rec.range_max), str(rec.n_beams)]
    parts += [_num(r) for r in ranges]
    if rec.odom is not None:
        parts += ["ODOM"] + [_num(v) for v in rec.odom.as_array()] + [_num(v) for v in rec.odom.sigma.ravel()]
    if rec.gt_pose is not None:
        parts += ["GT"] + [_num(v) for v in rec.gt_pose.as_array()]
    if rec.init_pose is not None:
        parts += ["INIT"] + [_num(v) for v in rec.init_pose.as_array()]
    return " ".join(parts)


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    lines = [f"{DATASET_MAGIC} {VERSION}"]
    for k, v in dataset.meta.items():
        if not k or any(c.isspace() for c in k) or "\n" in str(v):
            raise ValueError(f"meta key/value not representable: {k!r}")
        lines.append(f"META {k} {v}")
    lines += [format_record(r) for r in dataset.records]
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_record(tokens: list, path, lineno: int) -> ScanRecord:
    def take(n):
        if len(tokens) < n:
            raise FormatError("truncated record", path, lineno)
        out = tokens[:n]
        del tokens[:n]
        return out

    def floats(vals):
        try:
            return [float(v) for v in vals]
        except ValueError as exc:
            raise FormatError(str(exc), path, lineno) from None

    ts, amin, ainc, rmax = floats(take(4))
    try:
        n = int(take(1)[0])
    except ValueError:
        raise FormatError("beam count is not an integer", path, lineno) from None
    if n < 1:
        raise FormatError("beam count must be positive", path, lineno)
    ranges = np.array(floats(take(n)))
    odom = gt = init = None
    while tokens:
        tag = tokens.pop(0)
        try:
            if tag == "ODOM" and odom is None:
                v = floats(take(12))
                odom = OdomIncrement(v[:2], v[2], np.array(v[3:]).reshape(3, 3))
            elif tag == "GT" and gt is None:
                gt = Pose2(*floats(take(3)))
            elif tag == "INIT" and init is None:
                init = Pose2(*floats(take(3)))
            else:
                raise FormatError(f"unexpected token {tag!r}", path, lineno)
        except FormatError:
            raise
        except ValueError as exc:
            raise FormatError(str(exc), path, lineno) from None
    try:
        return ScanRecord(ts, ranges, amin, ainc, rmax, odom, gt, init)
    except ValueError as exc:
        raise FormatError(str(exc), path, lineno) from None


def parse_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_text().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise FormatError("empty file", path)
    _check_header([lines[0][1]], DATASET_MAGIC, path)
    meta, records, n_beams = {}, [], None
    for lineno, line in lines[1:]:
        tokens = line.split()
        if tokens[0] == "META":
            if len(tokens) < 2:
                raise FormatError("META needs a key", path, lineno)
            meta[tokens[1]] = line.split(None, 2)[2] if len(tokens) > 2 else ""
        elif tokens[0] == "SCAN":
            rec = _parse_record(tokens[1:], path, lineno)
            if n_beams is None:
                n_beams = rec.n_beams
            elif rec.n_beams != n_beams:
                raise FormatError(f"beam count {rec.n_beams} differs from first record ({n_beams})", path, lineno)
            if not records and rec.odom is not None:
                raise FormatError("odometry on first record", path, lineno)
            records.append(rec)
        else:
            raise FormatError(f"unknown line tag {tokens[0]!r}", path, lineno)
    try:
        return Dataset(records, meta)
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


# -- trajectories, worlds, metrics -------------------------------------------


def write_trajectory(poses: Sequence[Pose2], path) -> Path:
    path = Path(path)
    lines = [f"{TRAJECTORY_MAGIC} {VERSION}"]
    lines += [f"{i} {_num(p.x)} {_num(p.y)} {_num(p.theta)}" for i, p in enumerate(poses)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trajectory(path) -> list:
    path = Path(path)
    raw = path.read_text().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise FormatError("empty file", path)
    _check_header([lines[0][1]], TRAJECTORY_MAGIC, path)
    poses = []
    for lineno, line in lines[1:]:
        tok = line.split()
        try:
            idx = int(tok[0])
            x, y, th = (float(v) for v in tok[1:4])
        except (ValueError, IndexError):
            raise FormatError("expected '<i> <x> <y> <theta>'", path, lineno) from None
        if idx != len(poses):
            raise FormatError(f"pose index {idx} out of sequence", path, lineno)
        poses.append(Pose2(x, y, th))
    return poses


def write_world(world: World, path) -> Path:
    path = Path(path)
    doc = {
        "format": WORLD_FORMAT,
        "version": VERSION,
        "name": world.name,
        "segments": [[float(v) for v in seg.ravel()] for seg in world.segments],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_world(path) -> World:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != WORLD_FORMAT:
        raise FormatError("not a world file", path)
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported world version {doc.get('version')}", path)
    return World(np.array(doc["segments"], dtype=float).reshape(-1, 2, 2), doc.get("name", path.stem))


def write_metrics(metrics: dict, path) -> Path:
    path = Path(path)
    lines = [f"{METRICS_MAGIC} {VERSION}"] + [f"{k} {_num(v) if isinstance(v, float) else v}" for k, v in metrics.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics(path) -> dict:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    _check_header(lines, METRICS_MAGIC, path)
    out = {}
    for ln in lines[1:]:
        k, v = ln.split(None, 1)
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


# -- rasters -----------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> Path:
    path = Path(path)
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5" or fields[3] != "255":
        raise FormatError("only 8-bit binary PGM is supported", path)
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def _to_image(grid: np.ndarray) -> np.ndarray:
    """Lattice array indexed ``[w, h]`` to image rows (top row = largest h)."""
    return np.asarray(grid).T[::-1]


def _write_raster(path, grid_pixels: np.ndarray, geom: GridGeometry, sampling: str, mapping: dict) -> Path:
    """``sampling`` is "node" (pixel at each node) or "cell" (pixel at each cell centre)."""
    path = Path(path)
    write_pgm(path, _to_image(grid_pixels))
    half = 0.5 * geom.resolution_s if sampling == "cell" else 0.0
    meta = {
        "image": path.name,
        "sampling": sampling,
        "width": grid_pixels.shape[0],
        "height": grid_pixels.shape[1],
        "first_pixel_x": geom.origin_t0[0] + half,
        "first_pixel_y": geom.origin_t0[1] + half,
        "origin_x": geom.origin_t0[0],
        "origin_y": geom.origin_t0[1],
        "resolution": geom.resolution_s,
        "l_w": geom.l_w,
        "l_h": geom.l_h,
    }
    meta.update(mapping)
    lines = [f"{RASTER_MAGIC} {VERSION}"] + [f"{k} {_num(v) if isinstance(v, float) else v}" for k, v in meta.items()]
    path.with_suffix(".meta").write_text("\n".join(lines) + "\n")
    return path


def read_raster_meta(path) -> dict:
    path = Path(path).with_suffix(".meta")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    _check_header(lines, RASTER_MAGIC, path)
    out = {}
    for ln in lines[1:]:
        k, v = ln.split(None, 1)
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def probability_pixels(p: np.ndarray, unknown: Optional[np.ndarray] = None) -> np.ndarray:
    px = np.round(255.0 * (1.0 - p)).astype(np.uint8)
    if unknown is not None:
        px[unknown] = 128
    return px


def write_outputs(
    poses: Sequence[Pose2],
    gmap: GridMap,
    hitmap: HitMap,
    out_dir,
    covariance=None,
    metrics: Optional[dict] = None,
    p_occ_thresh: float = 0.6,
    p_free_thresh: float = 0.4,
) -> dict:
    """Write trajectory, map rasters, optional uncertainty raster and metrics.

    Returns a mapping from artifact name to path.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    geom = gmap.geom
    paths = {"trajectory": write_trajectory(poses, out / "trajectory.txt")}

    ev = np.clip(gmap.values, -EVIDENCE_CLAMP, EVIDENCE_CLAMP)
    ev_px = np.round(255.0 * (EVIDENCE_CLAMP - ev) / (2 * EVIDENCE_CLAMP)).astype(np.uint8)
    paths["evidence"] = _write_raster(
        out / "map_evidence.pgm", ev_px, geom, "node",
        {"mapping": "pixel=round(255*(clamp-e)/(2*clamp))", "clamp": EVIDENCE_CLAMP},
    )

    labels = classify_map(gmap, hitmap, p_occ_thresh, p_free_thresh)
    prob_px = probability_pixels(cell_probabilities(gmap), labels == UNKNOWN)
    paths["probability"] = _write_raster(
        out / "map_probability.pgm", prob_px, geom, "cell",
        {"mapping": "pixel=round(255*(1-p)); unknown=128", "p_occ": p_occ_thresh, "p_free": p_free_thresh},
    )

    if covariance is not None:
        var = np.asarray(covariance.node_variances, dtype=float).reshape(geom.shape)
        lo, hi = float(var.min()), float(var.max())
        span = hi - lo if hi > lo else 1.0
        unc_px = np.round(255.0 * (hi - var) / span).astype(np.uint8)
        paths["uncertainty"] = _write_raster(
            out / "uncertainty.pgm", unc_px, geom, "node",
            {"mapping": "pixel=round(255*(max-v)/(max-min))", "variance_min": lo, "variance_max": hi},
        )
    if metrics:
        paths["metrics"] = write_metrics(metrics, out / "metrics.txt")
    return paths
