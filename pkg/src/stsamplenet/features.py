"""Model inputs built from raw data.

Covers the region grid, per-interval measurement images (trajectory flows
and pickup/dropoff events), POI count images, calendar features, min-max
normalisation and closeness/period/trend history selection.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TIME_FEATURE_DIM = 10
FLOW_CHANNELS = ("inflow", "outflow", "density")
EVENT_CHANNELS = ("pickup", "dropoff")
POI_CATEGORIES = (
    "commercial", "culture", "education", "health", "public_service",
    "recreation", "residential", "sports", "tourism", "transport",
)


class OutOfBounds(ValueError):
    pass


class UnknownCategory(KeyError):
    pass


class UnorderedTrajectory(ValueError):
    pass


class EmptyTrainingSet(ValueError):
    pass


class InsufficientHistory(LookupError):
    pass


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int
    cell_size_m: float = 500.0

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError("grid bounds must satisfy min < max")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        dlat = (self.lat_max - self.lat_min) / self.rows
        dlon = (self.lon_max - self.lon_min) / self.cols
        return self.lat_min + (row + 0.5) * dlat, self.lon_min + (col + 0.5) * dlon


def locate(grid: GridSpec, lat: float, lon: float) -> int:
    """Row-major region index of the cell containing (lat, lon).

    Points on a shared edge go to the larger-index cell; the outer max
    edge stays in bounds.  Rows run along latitude, columns along longitude.
    """
    if not (grid.lat_min <= lat <= grid.lat_max and grid.lon_min <= lon <= grid.lon_max):
        raise OutOfBounds(f"({lat}, {lon}) outside grid bounds")
    row = min(int(math.floor((lat - grid.lat_min) / (grid.lat_max - grid.lat_min) * grid.rows)),
              grid.rows - 1)
    col = min(int(math.floor((lon - grid.lon_min) / (grid.lon_max - grid.lon_min) * grid.cols)),
              grid.cols - 1)
    return row * grid.cols + col


def try_locate(grid: GridSpec, lat: float, lon: float) -> int | None:
    try:
        return locate(grid, lat, lon)
    except OutOfBounds:
        return None


@dataclass
class STImage:
    interval_id: int
    values: np.ndarray  # (M, H, W)
    skipped: int = 0

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("measurement counts must be non-negative")


@dataclass
class POIImage:
    values: np.ndarray  # (P, H, W)
    categories: tuple[str, ...]
    skipped: int = 0


def count_pois(grid: GridSpec, pois: Iterable[tuple[str, float, float]],
               categories: Sequence[str] = POI_CATEGORIES) -> POIImage:
    channel = {name: i for i, name in enumerate(categories)}
    values = np.zeros((len(categories), grid.rows, grid.cols))
    skipped = 0
    for cat, lat, lon in pois:
        if cat not in channel:
            raise UnknownCategory(cat)
        n = try_locate(grid, lat, lon)
        if n is None:
            skipped += 1
            continue
        values[channel[cat], n // grid.cols, n % grid.cols] += 1
    return POIImage(values, tuple(categories), skipped)


def encode_time(timestamp: dt.datetime) -> np.ndarray:
    """[dow one-hot (Mon=0) | weekend | sin, cos of minute-of-day] -> shape (10,)."""
    minutes = timestamp.hour * 60 + timestamp.minute + timestamp.second / 60.0
    dow = timestamp.weekday()
    vec = np.zeros(TIME_FEATURE_DIM)
    vec[dow] = 1.0
    vec[7] = 1.0 if dow >= 5 else 0.0
    angle = 2.0 * math.pi * minutes / 1440.0
    vec[8] = math.sin(angle)
    vec[9] = math.cos(angle)
    return vec


@dataclass(frozen=True)
class IntervalClock:
    """Maps integer interval ids to civil start times."""

    epoch: dt.datetime
    minutes: int = 60

    def start(self, interval_id: int) -> dt.datetime:
        return self.epoch + dt.timedelta(minutes=self.minutes * interval_id)

    def interval_of(self, ts: dt.datetime) -> int:
        delta = ts - self.epoch
        return int(delta.total_seconds() // (self.minutes * 60))


def aggregate_trajectories(grid: GridSpec, trajectories: dict, interval_id: int,
                           clock: IntervalClock) -> STImage:
    """Inflow / outflow / density image for one interval.

    ``trajectories`` maps vehicle id -> time-ordered [(timestamp, lat, lon)].
    A transition between consecutive in-bounds points in different cells is
    counted in the interval holding the later point.  Density counts
    distinct vehicles seen in a cell during the interval.
    """
    values = np.zeros((3, grid.rows, grid.cols))
    skipped = 0
    for vid, points in trajectories.items():
        present: set[int] = set()
        prev_cell = None
        prev_ts = None
        for ts, lat, lon in points:
            if prev_ts is not None and ts <= prev_ts:
                raise UnorderedTrajectory(f"vehicle {vid}: timestamps not strictly increasing")
            cell = try_locate(grid, lat, lon)
            in_interval = clock.interval_of(ts) == interval_id
            if cell is None:
                if in_interval:
                    skipped += 1
            elif in_interval:
                present.add(cell)
                if prev_cell is not None and prev_cell != cell:
                    values[1, prev_cell // grid.cols, prev_cell % grid.cols] += 1
                    values[0, cell // grid.cols, cell % grid.cols] += 1
            prev_cell, prev_ts = cell, ts
        for cell in present:
            values[2, cell // grid.cols, cell % grid.cols] += 1
    return STImage(interval_id, values, skipped)


def aggregate_events(grid: GridSpec, events: Iterable[tuple[str, dt.datetime, float, float]],
                     interval_id: int, clock: IntervalClock) -> STImage:
    values = np.zeros((2, grid.rows, grid.cols))
    skipped = 0
    for kind, ts, lat, lon in events:
        if clock.interval_of(ts) != interval_id:
            continue
        ch = {"pickup": 0, "dropoff": 1}.get(kind)
        if ch is None:
            raise ValueError(f"unknown event kind {kind!r}")
        cell = try_locate(grid, lat, lon)
        if cell is None:
            skipped += 1
            continue
        values[ch, cell // grid.cols, cell % grid.cols] += 1
    return STImage(interval_id, values, skipped)


def aggregate_all_trajectories(grid: GridSpec, trajectories: dict, clock: IntervalClock,
                               first: int, last: int) -> tuple[np.ndarray, int]:
    """Single-pass version of aggregate_trajectories over ids first..last.

    Returns a (last-first+1, 3, H, W) array and the out-of-bounds skip count.
    """
    n_int = last - first + 1
    out = np.zeros((n_int, 3, grid.rows, grid.cols))
    skipped = 0
    for vid, points in trajectories.items():
        present: dict[int, set[int]] = defaultdict(set)
        prev_cell = None
        prev_ts = None
        for ts, lat, lon in points:
            if prev_ts is not None and ts <= prev_ts:
                raise UnorderedTrajectory(f"vehicle {vid}: timestamps not strictly increasing")
            cell = try_locate(grid, lat, lon)
            k = clock.interval_of(ts) - first
            inside = 0 <= k < n_int
            if cell is None:
                skipped += inside
            elif inside:
                present[k].add(cell)
                if prev_cell is not None and prev_cell != cell:
                    out[k, 1, prev_cell // grid.cols, prev_cell % grid.cols] += 1
                    out[k, 0, cell // grid.cols, cell % grid.cols] += 1
            prev_cell, prev_ts = cell, ts
        for k, cells in present.items():
            for cell in cells:
                out[k, 2, cell // grid.cols, cell % grid.cols] += 1
    return out, skipped


@dataclass
class Normalizer:
    """Per-channel min-max scaling to [-1, 1]."""

    min: np.ndarray
    max: np.ndarray

    @classmethod
    def fit(cls, images) -> "Normalizer":
        arr = np.asarray(images, dtype=np.float64)
        if arr.size == 0 or arr.shape[0] == 0:
            raise EmptyTrainingSet("cannot fit a normalizer on zero images")
        axes = (0,) + tuple(range(2, arr.ndim))
        return cls(arr.min(axis=axes), arr.max(axis=axes))

    def _bcast(self, v: np.ndarray, ndim: int) -> np.ndarray:
        # channel axis is -3 for (..., C, H, W)
        return v.reshape((-1,) + (1,) * 2) if ndim >= 3 else v

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self._bcast(self.min, x.ndim), self._bcast(self.max, x.ndim)
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, -1.0)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        lo, hi = self._bcast(self.min, z.ndim), self._bcast(self.max, z.ndim)
        return (z + 1.0) * 0.5 * (hi - lo) + lo


def normalize(norm: Normalizer, image) -> np.ndarray:
    return norm.normalize(image.values if isinstance(image, STImage) else image)


def denormalize(norm: Normalizer, z) -> np.ndarray:
    return norm.denormalize(z)


def select_history(target: int, closeness: int = 4, period: int = 3, trend: int = 2,
                   period_span: int = 24, trend_span: int = 168,
                   available: tuple[int, int] | None = None) -> list[int]:
    """History interval ids for predicting ``target`` (= t+1), oldest first.

    ``available`` is the inclusive (first, last) id range of the dataset;
    without it only negative ids are rejected.
    """
    t = target - 1
    ids = [t - i for i in range(closeness)]
    ids += [target - j * period_span for j in range(1, period + 1)]
    ids += [target - j * trend_span for j in range(1, trend + 1)]
    lo, hi = available if available is not None else (0, math.inf)
    for i in ids:
        if not lo <= i <= hi:
            raise InsufficientHistory(f"interval {i} needed for target {target} is not available")
    return sorted(ids)


def history_depth(closeness: int, period: int, trend: int, period_span: int, trend_span: int) -> int:
    """How many intervals before the target the oldest history id lies."""
    return max(closeness, period * period_span, trend * trend_span)


# ---------------------------------------------------------------- CSV readers

class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def parse_timestamp(text: str, utc_offset_hours: float = 0.0) -> dt.datetime:
    """ISO-8601 to naive local time; aware stamps are shifted to the fixed offset."""
    ts = dt.datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if ts.tzinfo is not None:
        ts = (ts.astimezone(dt.timezone(dt.timedelta(hours=utc_offset_hours)))
              .replace(tzinfo=None))
    return ts


def _rows(path, header: tuple[str, ...]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if tuple(h.strip() for h in first) != header:
            raise ParseError(path, 1, f"expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def read_trajectories(path, utc_offset_hours: float = 0.0) -> dict:
    trajs: dict[str, list] = defaultdict(list)
    for lineno, (vid, ts, lat, lon) in _rows(path, ("vehicle_id", "timestamp", "lat", "lon")):
        try:
            trajs[vid].append((parse_timestamp(ts, utc_offset_hours), float(lat), float(lon)))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return dict(trajs)


def read_events(path, utc_offset_hours: float = 0.0) -> list:
    events = []
    for lineno, (kind, ts, lat, lon) in _rows(path, ("kind", "timestamp", "lat", "lon")):
        if kind not in ("pickup", "dropoff"):
            raise ParseError(path, lineno, f"unknown kind {kind!r}")
        try:
            events.append((kind, parse_timestamp(ts, utc_offset_hours), float(lat), float(lon)))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return events


def read_pois(path) -> list:
    pois = []
    for lineno, (cat, lat, lon) in _rows(path, ("category", "lat", "lon")):
        try:
            pois.append((cat, float(lat), float(lon)))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return pois
