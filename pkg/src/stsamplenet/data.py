"""In-memory spatio-temporal dataset and its on-disk feature archive."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .features import (GridSpec, IntervalClock, Normalizer, encode_time, history_depth,
                       select_history)
from .model import Batch

MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class HistorySpec:
    closeness: int = 4
    period: int = 3
    trend: int = 2
    period_span: int = 24
    trend_span: int = 168

    @property
    def depth(self) -> int:
        return history_depth(self.closeness, self.period, self.trend, self.period_span,
                             self.trend_span)


@dataclass
class STDataset:
    grid: GridSpec
    clock: IntervalClock
    first_interval: int
    images: np.ndarray            # (n_intervals, M, H, W) raw counts
    channels: tuple[str, ...]
    poi: np.ndarray               # (P, H, W) raw counts
    poi_categories: tuple[str, ...]
    test_start: int               # first interval id whose target belongs to the test split
    normalizer: Normalizer | None = None
    poi_normalizer: Normalizer | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.normalizer is None and len(self.images) == 0:
            # an empty archive still needs a well-formed (degenerate) scaling
            zeros = np.zeros(self.images.shape[1])
            self.normalizer = Normalizer(zeros, zeros.copy())
        if self.normalizer is None:
            train = self.images[: max(self.test_start - self.first_interval, 1)]
            self.normalizer = Normalizer.fit(train)
        if self.poi_normalizer is None:
            self.poi_normalizer = Normalizer.fit(self.poi[None])

    @property
    def last_interval(self) -> int:
        return self.first_interval + len(self.images) - 1

    def image(self, interval_id: int) -> np.ndarray:
        return self.images[interval_id - self.first_interval]

    def targets(self, split: str, hist: HistorySpec, val_fraction: float = 0.2) -> list[int]:
        """Chronological target ids; validation is the tail of the training period."""
        start = self.first_interval + hist.depth
        train = list(range(start, self.test_start))
        n_val = int(round(len(train) * val_fraction))
        if split == "train":
            return train[: len(train) - n_val]
        if split == "val":
            return train[len(train) - n_val:]
        if split == "trainval":
            return train
        if split == "test":
            return list(range(max(start, self.test_start), self.last_interval + 1))
        raise ValueError(f"unknown split {split!r}")

    def time_features(self, interval_id: int) -> np.ndarray:
        return encode_time(self.clock.start(interval_id))

    def make_batch(self, target_ids, hist: HistorySpec) -> Batch:
        avail = (self.first_interval, self.last_interval)
        hist_ids = [select_history(t, hist.closeness, hist.period, hist.trend, hist.period_span,
                                   hist.trend_span, avail) for t in target_ids]
        idx = np.asarray(hist_ids) - self.first_interval
        images = self.normalizer.normalize(self.images[idx])
        times = np.stack([[self.time_features(i) for i in ids] for ids in hist_ids])
        targets = self.normalizer.normalize(self.images[np.asarray(target_ids) - self.first_interval])
        return Batch(images, times, self.poi_normalizer.normalize(self.poi), targets)


# ---------------------------------------------------------------- archive IO

def _fmt_list(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_manifest(path: Path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_archive(ds: STDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "intervals").mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(ds.images):
        tensorfile.save(out / "intervals" / f"{ds.first_interval + k:08d}.stt", {"values": img})
    tensorfile.save(out / "poi.stt", {"values": ds.poi})
    g = ds.grid
    manifest = {
        "format": "stsn-archive-1",
        "lat_min": repr(g.lat_min), "lat_max": repr(g.lat_max),
        "lon_min": repr(g.lon_min), "lon_max": repr(g.lon_max),
        "rows": g.rows, "cols": g.cols, "cell_size_m": repr(g.cell_size_m),
        "regions": g.n_regions,
        "channels": ",".join(ds.channels),
        "poi_categories": ",".join(ds.poi_categories),
        "epoch": ds.clock.epoch.isoformat(),
        "interval_minutes": ds.clock.minutes,
        "interval_first": ds.first_interval,
        "interval_last": ds.last_interval,
        "test_start": ds.test_start,
        "norm_min": _fmt_list(ds.normalizer.min),
        "norm_max": _fmt_list(ds.normalizer.max),
        "poi_norm_min": _fmt_list(ds.poi_normalizer.min),
        "poi_norm_max": _fmt_list(ds.poi_normalizer.max),
    }
    for k, v in ds.extra.items():
        manifest[f"extra.{k}"] = v
    write_manifest(out / MANIFEST, manifest)
    return out


def load_archive(path) -> STDataset:
    root = Path(path)
    m = read_manifest(root / MANIFEST)
    first, last = int(m["interval_first"]), int(m["interval_last"])
    poi = tensorfile.load(root / "poi.stt")["values"].astype(np.float64)
    channels = tuple(m["channels"].split(","))
    if last < first:
        images = np.zeros((0, len(channels), int(m["rows"]), int(m["cols"])))
    else:
        images = np.stack([tensorfile.load(root / "intervals" / f"{i:08d}.stt")["values"]
                           for i in range(first, last + 1)]).astype(np.float64)
    grid = GridSpec(float(m["lat_min"]), float(m["lat_max"]), float(m["lon_min"]),
                    float(m["lon_max"]), int(m["rows"]), int(m["cols"]), float(m["cell_size_m"]))
    clock = IntervalClock(dt.datetime.fromisoformat(m["epoch"]), int(m["interval_minutes"]))

    def floats(key):
        return np.array([float(v) for v in m[key].split(",")])

    extra = {k[len("extra."):]: v for k, v in m.items() if k.startswith("extra.")}
    return STDataset(grid, clock, first, images, channels, poi,
                     tuple(m["poi_categories"].split(",")), int(m["test_start"]),
                     Normalizer(floats("norm_min"), floats("norm_max")),
                     Normalizer(floats("poi_norm_min"), floats("poi_norm_max")), extra)
