"""Scripted toy-city vehicle traces with analytically known flow images.

Vehicles hop between the centres of adjacent cells, one waypoint every five
minutes, so any consecutive pair of waypoints crosses at most one cell
boundary.  ``expected_counts`` tallies flows straight from the planted cell
sequence and serves as the reference for trajectory ingestion.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .features import GridSpec, IntervalClock, STImage

STEP = dt.timedelta(minutes=5)
PATTERNS = ("highway", "commuter", "mixed")


@dataclass
class Vehicle:
    vehicle_id: str
    start: dt.datetime
    cells: list[tuple[int, int]]   # (row, col) per waypoint, one every STEP

    def times(self) -> list[dt.datetime]:
        return [self.start + i * STEP for i in range(len(self.cells))]


@dataclass
class TripScript:
    grid: GridSpec
    vehicles: list[Vehicle]
    highway: list[tuple[int, int]] = field(default_factory=list)
    residential: list[tuple[int, int]] = field(default_factory=list)
    workplace: list[tuple[int, int]] = field(default_factory=list)

    def trajectories(self) -> dict:
        """vehicle id -> [(timestamp, lat, lon)], the shape ingestion consumes."""
        out = {}
        for v in self.vehicles:
            out[v.vehicle_id] = [(ts, *self.grid.cell_center(r, c))
                                 for ts, (r, c) in zip(v.times(), v.cells)]
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["vehicle_id", "timestamp", "lat", "lon"])
            for vid, points in self.trajectories().items():
                for ts, lat, lon in points:
                    w.writerow([vid, ts.isoformat(), repr(lat), repr(lon)])

    def interval_range(self, clock: IntervalClock) -> tuple[int, int]:
        stamps = [ts for v in self.vehicles for ts in v.times()]
        if not stamps:
            return 0, 0
        return clock.interval_of(min(stamps)), clock.interval_of(max(stamps))


def _walk(src: tuple[int, int], dst: tuple[int, int], rng: np.random.Generator) -> list:
    """Shortest rook path from src to dst, axis order chosen at random per step."""
    path = [src]
    r, c = src
    while (r, c) != dst:
        moves = []
        if r != dst[0]:
            moves.append((r + np.sign(dst[0] - r), c))
        if c != dst[1]:
            moves.append((r, c + np.sign(dst[1] - c)))
        r, c = moves[int(rng.integers(len(moves)))]
        r, c = int(r), int(c)
        path.append((r, c))
    return path


def _dwell(path: list, rng: np.random.Generator, max_stay: int = 3) -> list:
    out = []
    for cell in path:
        out += [cell] * int(rng.integers(1, max_stay + 1))
    return out


def _block(rows: range, cols: range) -> list:
    return [(r, c) for r in rows for c in cols]


def script_trips(grid: GridSpec, n_vehicles: int, pattern: str = "mixed", seed: int = 0,
                 epoch: dt.datetime = dt.datetime(2024, 1, 1), hours: int = 24) -> TripScript:
    if pattern not in PATTERNS:
        raise ValueError(f"pattern must be one of {PATTERNS}, got {pattern!r}")
    rng = np.random.default_rng(seed)
    h, w = grid.rows, grid.cols
    mid = h // 2
    highway = [(mid, c) for c in range(w)]
    residential = _block(range(0, max(h // 3, 1)), range(0, max(w // 3, 1)))
    workplace = _block(range(h - max(h // 3, 1), h), range(w - max(w // 3, 1), w))
    vehicles = []
    for i in range(n_vehicles):
        kind = pattern if pattern != "mixed" else ("highway", "commuter", "local")[int(rng.integers(3))]
        if kind == "highway":
            a, b = sorted(rng.choice(w, size=2, replace=False)) if w > 1 else (0, 0)
            path = highway[a:b + 1]
            if rng.random() < 0.5:
                path = path[::-1]
            cells = path
        elif kind == "commuter":
            home = residential[int(rng.integers(len(residential)))]
            work = workplace[int(rng.integers(len(workplace)))]
            src, dst = (home, work) if rng.random() < 0.5 else (work, home)
            cells = _dwell(_walk(src, dst, rng), rng)
        else:
            src = (int(rng.integers(h)), int(rng.integers(w)))
            dst = (int(np.clip(src[0] + rng.integers(-2, 3), 0, h - 1)),
                   int(np.clip(src[1] + rng.integers(-2, 3), 0, w - 1)))
            cells = _dwell(_walk(src, dst, rng), rng)
        start = epoch + int(rng.integers(hours * 12)) * STEP + dt.timedelta(
            seconds=int(rng.integers(0, 300)))
        vehicles.append(Vehicle(f"v{i:05d}", start, list(cells)))
    return TripScript(grid, vehicles, highway, residential, workplace)


def expected_counts(script: TripScript, interval_id: int, clock: IntervalClock) -> STImage:
    """Inflow / outflow / density for one interval, tallied from the planted cells."""
    values = np.zeros((3, script.grid.rows, script.grid.cols))
    for v in script.vehicles:
        times = v.times()
        seen = set()
        for i, (ts, cell) in enumerate(zip(times, v.cells)):
            if clock.interval_of(ts) != interval_id:
                continue
            seen.add(cell)
            if i > 0 and v.cells[i - 1] != cell:
                values[1][v.cells[i - 1]] += 1
                values[0][cell] += 1
        for cell in seen:
            values[2][cell] += 1
    return STImage(interval_id, values)
