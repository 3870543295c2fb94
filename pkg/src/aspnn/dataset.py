"""
Trajectory ingestion and per-frame environmental features.

A trajectory file holds one row per (frame, cell). CSV files carry a
required header ``frame,cell_id,x,y,area,eccentricity,brightness`` with an
optional trailing ``mitosis`` column; leading ``# key=value`` comment lines
may declare ``width`` and ``height`` of the image in pixels. The JSON-lines
mirror uses the same field names, one object per line, plus an optional
first object ``{"meta": {"width": ..., "height": ...}}``.

Image coordinates are used throughout: ``x`` grows to the right and ``y``
grows downwards, so "top" sectors have ``y < height / 2``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FIELDS = ("frame", "cell_id", "x", "y", "area", "eccentricity", "brightness")
N_FEATURES = 23
GRID_SIZE = 20.0
NEIGHBOR_RADIUS = 75.0
MIN_TRAJECTORY_FRAMES = 105

# ring of 8 squares around the cell, row-major with y pointing down
GRID_OFFSETS = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))
GRID_NAMES = ("nw", "n", "ne", "w", "e", "sw", "s", "se")

FEATURE_NAMES = (
    ("x", "y", "grad_x", "grad_y")
    + tuple(f"dens_{n}" for n in GRID_NAMES)
    + ("n_neighbors", "sector_tl", "sector_tr", "sector_bl", "sector_br",
       "nbr_vx", "nbr_vy", "brightness", "area", "area_var", "eccentricity")
)
assert len(FEATURE_NAMES) == N_FEATURES


class DataError(ValueError):
    """Malformed or inconsistent trajectory data."""


@dataclass(frozen=True)
class TrajectoryRecord:
    frame: int
    cell_id: int
    x: float
    y: float
    area: float
    eccentricity: float
    brightness: float
    mitosis: int | None = None


@dataclass
class CellTrack:
    """One cell's consecutive observations.

    ``velocity[k]`` is the backward difference ``xy[k] - xy[k-1]``; the first
    frame has no velocity and holds NaN.
    """

    cell_id: int
    frames: np.ndarray
    xy: np.ndarray
    area: np.ndarray
    eccentricity: np.ndarray
    brightness: np.ndarray
    mitosis: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def velocity(self) -> np.ndarray:
        v = np.full_like(self.xy, np.nan)
        v[1:] = np.diff(self.xy, axis=0)
        return v

    def states(self) -> np.ndarray:
        """``(T-1, 4)`` array of ``(x, y, vx, vy)`` for frames with a velocity."""
        return np.hstack([self.xy[1:], self.velocity[1:]])

    def truncated(self, n: int) -> "CellTrack":
        return CellTrack(
            self.cell_id, self.frames[:n], self.xy[:n], self.area[:n], self.eccentricity[:n],
            self.brightness[:n], None if self.mitosis is None else self.mitosis[:n],
        )


@dataclass
class FrameView:
    """All cells visible in one frame; velocity is NaN where undefined."""

    cell_ids: np.ndarray
    xy: np.ndarray
    area: np.ndarray
    velocity: np.ndarray
    rows: dict[int, int]


@dataclass
class TrajectorySet:
    records: list[TrajectoryRecord]
    tracks: dict[int, CellTrack]
    frames: dict[int, FrameView]
    width: float
    height: float
    gaps: list[tuple[int, int]] = field(default_factory=list)

    def record(self, frame: int, cell_id: int) -> TrajectoryRecord:
        return self._by_key[(frame, cell_id)]

    def __post_init__(self) -> None:
        self._by_key = {(r.frame, r.cell_id): r for r in self.records}


# ---------------------------------------------------------------------------
# Grouping and file I/O
# ---------------------------------------------------------------------------


def group_records(records: Iterable[TrajectoryRecord], width: float | None = None,
                  height: float | None = None) -> TrajectorySet:
    """Index records by cell and by frame, deriving velocities."""
    records = sorted(records, key=lambda r: (r.cell_id, r.frame))
    seen: set[tuple[int, int]] = set()
    by_cell: dict[int, list[TrajectoryRecord]] = defaultdict(list)
    for r in records:
        key = (r.frame, r.cell_id)
        if key in seen:
            raise DataError(f"duplicate record for frame={r.frame}, cell_id={r.cell_id}")
        seen.add(key)
        by_cell[r.cell_id].append(r)

    if records:
        width = width if width is not None else float(math.ceil(max(r.x for r in records)))
        height = height if height is not None else float(math.ceil(max(r.y for r in records)))
    width = float(width or 0.0)
    height = float(height or 0.0)
    for r in records:
        if width and not 0.0 <= r.x <= width or height and not 0.0 <= r.y <= height:
            raise DataError(f"frame={r.frame}, cell_id={r.cell_id}: position ({r.x}, {r.y}) "
                            f"outside image bounds {width}x{height}")

    tracks: dict[int, CellTrack] = {}
    gaps = []
    prev_pos: dict[tuple[int, int], tuple[float, float]] = {}
    for cid, rows in by_cell.items():
        keep = len(rows)
        for k in range(1, len(rows)):
            if rows[k].frame != rows[k - 1].frame + 1:
                gaps.append((cid, rows[k - 1].frame))
                log.warning("cell %d: missing frames after frame %d, trajectory truncated",
                            cid, rows[k - 1].frame)
                keep = k
                break
        for r in rows:
            prev_pos[(r.frame, cid)] = (r.x, r.y)
        kept = rows[:keep]
        labels = [r.mitosis for r in kept]
        tracks[cid] = CellTrack(
            cell_id=cid,
            frames=np.array([r.frame for r in kept], dtype=int),
            xy=np.array([[r.x, r.y] for r in kept], dtype=float),
            area=np.array([r.area for r in kept], dtype=float),
            eccentricity=np.array([r.eccentricity for r in kept], dtype=float),
            brightness=np.array([r.brightness for r in kept], dtype=float),
            mitosis=None if any(m is None for m in labels) else np.array(labels, dtype=int),
        )

    by_frame: dict[int, list[TrajectoryRecord]] = defaultdict(list)
    for r in records:
        by_frame[r.frame].append(r)
    frames = {}
    for f in sorted(by_frame):
        rows = by_frame[f]
        xy = np.array([[r.x, r.y] for r in rows], dtype=float)
        vel = np.full_like(xy, np.nan)
        for i, r in enumerate(rows):
            prev = prev_pos.get((f - 1, r.cell_id))
            if prev is not None:
                vel[i] = (r.x - prev[0], r.y - prev[1])
        frames[f] = FrameView(
            cell_ids=np.array([r.cell_id for r in rows], dtype=int),
            xy=xy,
            area=np.array([r.area for r in rows], dtype=float),
            velocity=vel,
            rows={r.cell_id: i for i, r in enumerate(rows)},
        )
    return TrajectorySet(records, tracks, frames, width, height, gaps)


def _parse_row(row: dict, line: int) -> TrajectoryRecord:
    try:
        mit = row.get("mitosis")
        return TrajectoryRecord(
            frame=int(row["frame"]),
            cell_id=int(row["cell_id"]),
            x=float(row["x"]),
            y=float(row["y"]),
            area=float(row["area"]),
            eccentricity=float(row["eccentricity"]),
            brightness=float(row["brightness"]),
            mitosis=None if mit in (None, "") else int(mit),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"line {line}: cannot parse record {row!r}: {exc}") from exc


def read_records(path, fmt: str | None = None) -> tuple[list[TrajectoryRecord], dict]:
    """Parse a trajectory file into records plus its metadata dict."""
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    meta: dict = {}
    records = []
    with open(path, newline="") as fh:
        if fmt == "csv":
            lines = fh.read().splitlines()
            body_start = 0
            for body_start, text in enumerate(lines):
                if not text.startswith("#"):
                    break
                key, _, value = text[1:].partition("=")
                if value:
                    meta[key.strip()] = float(value)
            else:
                body_start = len(lines)
            reader = csv.DictReader(lines[body_start:])
            header = tuple(reader.fieldnames or ())
            if header[:len(FIELDS)] != FIELDS or header[len(FIELDS):] not in ((), ("mitosis",)):
                raise DataError(f"{path}: header {header} does not match schema "
                                f"{','.join(FIELDS)}[,mitosis]")
            for n, row in enumerate(reader, start=body_start + 2):
                records.append(_parse_row(row, n))
        elif fmt == "jsonl":
            for n, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                obj = json.loads(text)
                if "meta" in obj:
                    meta.update(obj["meta"])
                    continue
                missing = [k for k in FIELDS if k not in obj]
                if missing:
                    raise DataError(f"{path}:{n}: missing fields {missing}")
                records.append(_parse_row(obj, n))
        else:
            raise DataError(f"unknown trajectory format {fmt!r}")
    return records, meta


def load_trajectories(path, fmt: str | None = None, width: float | None = None,
                      height: float | None = None) -> TrajectorySet:
    records, meta = read_records(path, fmt)
    return group_records(records, width if width is not None else meta.get("width"),
                         height if height is not None else meta.get("height"))


def write_trajectories(records: Sequence[TrajectoryRecord], path, fmt: str = "csv",
                       width: float | None = None, height: float | None = None) -> None:
    """Write records sorted by (frame, cell_id); floats use ``repr`` so they round-trip."""
    records = sorted(records, key=lambda r: (r.frame, r.cell_id))
    labelled = any(r.mitosis is not None for r in records)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            if width is not None:
                fh.write(f"# width={width!r}\n")
            if height is not None:
                fh.write(f"# height={height!r}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FIELDS + (("mitosis",) if labelled else ()))
            for r in records:
                row = [r.frame, r.cell_id] + [repr(float(getattr(r, k))) for k in FIELDS[2:]]
                if labelled:
                    row.append("" if r.mitosis is None else r.mitosis)
                writer.writerow(row)
        elif fmt == "jsonl":
            if width is not None or height is not None:
                fh.write(json.dumps({"meta": {"width": width, "height": height}}) + "\n")
            for r in records:
                obj = {k: getattr(r, k) for k in FIELDS[:2]}
                obj.update({k: float(getattr(r, k)) for k in FIELDS[2:]})
                if labelled:
                    obj["mitosis"] = r.mitosis
                fh.write(json.dumps(obj) + "\n")
        else:
            raise DataError(f"unknown trajectory format {fmt!r}")


# ---------------------------------------------------------------------------
# Trajectory selection
# ---------------------------------------------------------------------------


def filter_correct_trajectories(ts: TrajectorySet, min_frames: int = MIN_TRAJECTORY_FRAMES,
                                keep_frames: int | None = MIN_TRAJECTORY_FRAMES):
    """Split tracks into long ("correct") ones, truncated to ``keep_frames``,
    and the rest, which only serve as environment for feature extraction."""
    correct, context = {}, {}
    for cid, track in sorted(ts.tracks.items()):
        if len(track) >= min_frames:
            correct[cid] = track.truncated(keep_frames) if keep_frames else track
        else:
            context[cid] = track
    return correct, context


def split_tracks(cell_ids: Sequence[int], test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic train/test split of cell ids."""
    ids = sorted(cell_ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def _grid_densities(center: np.ndarray, others_xy: np.ndarray, others_area: np.ndarray) -> np.ndarray:
    dens = np.zeros(8)
    if len(others_xy) == 0:
        return dens
    # square index of each neighbour relative to the cell-centred 20 px square
    cell = np.floor((others_xy - center + GRID_SIZE / 2) / GRID_SIZE).astype(int)
    for k, (dx, dy) in enumerate(GRID_OFFSETS):
        hit = (cell[:, 0] == dx) & (cell[:, 1] == dy)
        dens[k] = others_area[hit].sum() / GRID_SIZE ** 2
    return dens


_UNIT = np.array([np.array(o, dtype=float) / np.hypot(*o) for o in GRID_OFFSETS])


def density_gradient(densities: np.ndarray) -> np.ndarray:
    """Sum of the 8 square densities along their unit offset directions."""
    return densities @ _UNIT


def extract_features(ts: TrajectorySet, frame: int, cell_id: int) -> np.ndarray:
    """The 23-component environment vector of one cell in one frame."""
    view = ts.frames.get(frame)
    if view is None or cell_id not in view.rows:
        raise KeyError(f"cell {cell_id} not present in frame {frame}")
    i = view.rows[cell_id]
    rec = ts.record(frame, cell_id)
    center = view.xy[i]
    others = np.arange(len(view.cell_ids)) != i
    oxy, oarea, ovel = view.xy[others], view.area[others], view.velocity[others]

    dens = _grid_densities(center, oxy, oarea)
    dist = np.hypot(*(oxy - center).T) if len(oxy) else np.zeros(0)
    near = dist <= NEIGHBOR_RADIUS
    near_vel = ovel[near]
    near_vel = near_vel[~np.isnan(near_vel[:, 0])] if len(near_vel) else near_vel
    mean_vel = near_vel.mean(axis=0) if len(near_vel) else np.zeros(2)

    left = view.xy[:, 0] < ts.width / 2
    top = view.xy[:, 1] < ts.height / 2
    sectors = [np.sum(top & left), np.sum(top & ~left), np.sum(~top & left), np.sum(~top & ~left)]

    prev = ts._by_key.get((frame - 1, cell_id))
    area_var = rec.area - prev.area if prev is not None else 0.0

    out = np.empty(N_FEATURES)
    out[0:2] = center
    out[2:4] = density_gradient(dens)
    out[4:12] = dens
    out[12] = np.count_nonzero(near)
    out[13:17] = sectors
    out[17:19] = mean_vel
    out[19] = rec.brightness
    out[20] = rec.area
    out[21] = area_var
    out[22] = rec.eccentricity
    return out


def track_features(ts: TrajectorySet, track: CellTrack) -> np.ndarray:
    """``(T, 23)`` feature matrix for every frame of ``track``."""
    return np.array([extract_features(ts, int(f), track.cell_id) for f in track.frames])


def export_feature_matrix(path, features: np.ndarray, velocity: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_NAMES + ("vx", "vy"))
        for f, v in zip(features, velocity):
            writer.writerow([repr(float(x)) for x in f] + [repr(float(x)) for x in v])


def recursive_variation(series: Sequence[float], window: int) -> np.ndarray:
    """Sum of the last ``window`` frame-to-frame differences, i.e.
    ``series[n] - series[n - window]``; early frames use what history exists."""
    if window < 1:
        raise ValueError("window must be >= 1")
    s = np.asarray(series, dtype=float)
    idx = np.maximum(np.arange(len(s)) - window, 0)
    return s - s[idx]


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


# spans below the smallest normal float are treated as constant (2/span would overflow)
_TINY = np.finfo(float).tiny


@dataclass
class NormStats:
    """Per-component min/max used to map data onto [-1, 1]."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        self.min = np.asarray(self.min, dtype=float)
        self.max = np.asarray(self.max, dtype=float)
        if self.min.shape != self.max.shape or np.any(self.max < self.min):
            raise ValueError("NormStats requires max >= min componentwise")

    @classmethod
    def fit(cls, data: np.ndarray) -> "NormStats":
        data = np.asarray(data, dtype=float)
        return cls(np.nanmin(data, axis=0), np.nanmax(data, axis=0))

    @property
    def span(self) -> np.ndarray:
        return self.max - self.min

    @property
    def scale(self) -> np.ndarray:
        """``normalize(x) == x * scale + offset``; constant components map to 0."""
        span = self.span
        return np.divide(2.0, span, out=np.zeros_like(span), where=span > _TINY)

    @property
    def offset(self) -> np.ndarray:
        return np.where(self.span > _TINY, -1.0 - self.min * self.scale, 0.0)

    def normalize(self, x) -> np.ndarray:
        # same map as x * scale + offset, written so fitted data lands exactly in [-1, 1]
        span = self.span
        x = np.asarray(x, dtype=float)
        ratio = np.divide(x - self.min, span, out=np.full(np.broadcast(x, span).shape, 0.5),
                          where=span > _TINY)
        return 2.0 * ratio - 1.0

    def denormalize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) + 1.0) * (self.span / 2.0) + self.min

    def subset(self, idx) -> "NormStats":
        return NormStats(self.min[idx], self.max[idx])

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["min"], dtype=float), np.array(d["max"], dtype=float))


def normalize(v, stats: NormStats) -> np.ndarray:
    return stats.normalize(v)


def denormalize(v, stats: NormStats) -> np.ndarray:
    return stats.denormalize(v)
