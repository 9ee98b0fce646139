"""Evaluation: error metrics, the historical-average baseline, the analytic
MAC model, keep-ratio sweeps, prune/attention map export and the synthetic
city used for desk-scale experiments."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import HistorySpec, STDataset
from .features import FLOW_CHANNELS, POI_CATEGORIES, GridSpec, IntervalClock
from .model import ModelConfig, STSampleNet
from .sampler import keep_count
from .training import TrainConfig, evaluate_counts, history_spec, train_loop

SWEEP_COLUMNS = ("keep_ratio", "val_rmse", "val_mae", "gflops", "params")


class EmptyHistory(ValueError):
    pass


# ---------------------------------------------------------------- metrics

def _check(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def _channel_axes(arr: np.ndarray) -> tuple:
    # (..., M, H, W): reduce everything except the channel axis
    return tuple(i for i in range(arr.ndim) if i != arr.ndim - 3)


def rmse(pred, target, per_channel: bool = True):
    pred, target = _check(pred, target)
    err = (pred - target) ** 2
    if per_channel and err.ndim >= 3:
        return np.sqrt(err.mean(axis=_channel_axes(err)))
    return float(np.sqrt(err.mean()))


def mae(pred, target, per_channel: bool = True):
    pred, target = _check(pred, target)
    err = np.abs(pred - target)
    if per_channel and err.ndim >= 3:
        return err.mean(axis=_channel_axes(err))
    return float(err.mean())


# ---------------------------------------------------------------- HA baseline

class HistoricalAverage:
    """Per-(region, channel) mean over training intervals sharing (weekday, hour)."""

    def __init__(self, clock: IntervalClock):
        self.clock = clock
        self.means: dict[tuple[int, int], np.ndarray] = {}
        self.fallback: np.ndarray | None = None

    def slot(self, interval_id: int) -> tuple[int, int]:
        start = self.clock.start(interval_id)
        return start.weekday(), start.hour

    def fit(self, images: np.ndarray, interval_ids) -> "HistoricalAverage":
        images = np.asarray(images, dtype=np.float64)
        if len(images) == 0:
            raise EmptyHistory("no historical observations")
        sums: dict[tuple[int, int], np.ndarray] = {}
        counts: dict[tuple[int, int], int] = {}
        for img, i in zip(images, interval_ids):
            key = self.slot(i)
            sums[key] = sums.get(key, 0.0) + img
            counts[key] = counts.get(key, 0) + 1
        self.means = {k: sums[k] / counts[k] for k in sums}
        channel_mean = images.mean(axis=(0, 2, 3))
        self.fallback = np.broadcast_to(channel_mean[:, None, None], images.shape[1:]).copy()
        return self

    def predict(self, interval_ids) -> np.ndarray:
        if self.fallback is None:
            raise EmptyHistory("fit() has not been called")
        return np.stack([self.means.get(self.slot(i), self.fallback) for i in interval_ids])


def ha_baseline(ds: STDataset, target_ids) -> np.ndarray:
    """HA predictions for ``target_ids`` fitted on every interval before the test split."""
    n_train = ds.test_start - ds.first_interval
    ha = HistoricalAverage(ds.clock).fit(ds.images[:n_train],
                                         range(ds.first_interval, ds.test_start))
    return ha.predict(target_ids)


# ---------------------------------------------------------------- MAC model

@dataclass
class FlopReport:
    lfe: int
    sfe: int
    tfe: int
    scpe: int
    sampler: int
    gfe_attention: int
    gfe_ffn: int
    temporal: int
    predictor: int
    n_regions: int
    k: int
    d: int
    spatial_layers: int
    temporal_layers: int
    intervals: int

    COMPONENTS = ("lfe", "sfe", "tfe", "scpe", "sampler", "gfe_attention", "gfe_ffn",
                  "temporal", "predictor")

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in self.COMPONENTS)

    @property
    def gflops(self) -> float:
        return 2.0 * self.total / 1e9

    def text(self) -> str:
        lines = [f"N={self.n_regions} k={self.k} d={self.d} L_s={self.spatial_layers} "
                 f"L_t={self.temporal_layers} T={self.intervals}"]
        lines += [f"{c}={getattr(self, c)}" for c in self.COMPONENTS]
        lines += [f"total_macs={self.total}", f"gflops={self.gflops:.6f}"]
        return "\n".join(lines) + "\n"


def attention_macs(length: int, d: int) -> tuple[int, int]:
    """(Q/K/V/output projections, score + mixing) MACs of one self-attention layer."""
    return 4 * length * d * d, 2 * length * length * d


def ffn_macs(length: int, d: int, mult: int) -> int:
    return 2 * length * d * mult * d


def resnet_macs(c_in: int, d: int, blocks: int, kernel: int, cells: int) -> int:
    stem = kernel * kernel * c_in * d * cells
    body = 2 * blocks * kernel * kernel * d * d * cells
    merge = d * d * cells
    return stem + body + merge


def count_flops(cfg: ModelConfig, keep_ratio: float | None = None) -> FlopReport:
    """Inference multiply-accumulate counts per prediction, by component.

    Activations, normalisations, softmax and additions are not counted.
    The SFE runs once per prediction; every other per-interval encoder runs
    T times.
    """
    ratio = cfg.keep_ratio if keep_ratio is None else keep_ratio
    n, d, t = cfg.n_regions, cfg.d, cfg.n_intervals
    k = keep_count(ratio, n)
    extra = 1 if cfg.pooling == "readout" else 0
    proj, mix = attention_macs(k + extra, d)
    t_proj, t_mix = attention_macs(t + extra, d)
    return FlopReport(
        lfe=t * resnet_macs(cfg.channels, d, cfg.blocks, cfg.kernel, n),
        sfe=resnet_macs(cfg.poi_channels, d, cfg.blocks, cfg.kernel, n),
        tfe=t * (10 * d + d * d),
        scpe=0,
        sampler=t * n * (d * d + d * 2) if ratio < 1.0 else 0,
        gfe_attention=t * cfg.spatial_layers * (proj + mix),
        gfe_ffn=t * cfg.spatial_layers * ffn_macs(k + extra, d, cfg.ffn_mult),
        temporal=cfg.temporal_layers * (t_proj + t_mix + ffn_macs(t + extra, d, cfg.ffn_mult)),
        predictor=d * cfg.channels * n,
        n_regions=n, k=k, d=d, spatial_layers=cfg.spatial_layers,
        temporal_layers=cfg.temporal_layers, intervals=t)


# ---------------------------------------------------------------- synthetic city

@dataclass
class SyntheticCitySpec:
    rows: int = 6
    cols: int = 6
    n_sources: int = 4
    weeks: int = 5
    test_weeks: int = 1
    empty_fraction: float = 0.25
    base: float = 40.0
    daily_amp: float = 15.0
    weekly_amp: float = 8.0
    noise: float = 0.0          # AR(1) innovation std, shared per source
    ar_coef: float = 0.9
    region_noise: float = 0.0   # i.i.d. per-region std
    channels: int = 3
    seed: int = 0
    epoch: str = "2024-01-01T00:00"  # a Monday

    @property
    def n_intervals(self) -> int:
        return self.weeks * 168


@dataclass
class RegionLabel:
    region: int
    label: str      # unique | redundant | empty
    source: int     # -1 for empty
    scale: float


def synth_generate(spec: SyntheticCitySpec) -> tuple[STDataset, list[RegionLabel]]:
    """Hourly synthetic city whose regions are scaled copies of a few source series.

    Each source is a daily plus a weekly sinusoid with its own phases, plus an
    optional AR(1) disturbance.  One region per source is ``unique`` (scale 1),
    further regions copy a source at another scale (``redundant``), and some
    regions stay empty.  POI counts follow the same labelling: empty regions
    have none.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.rows * spec.cols
    if spec.n_sources > n:
        raise ValueError("more sources than regions")
    t = np.arange(spec.n_intervals)
    phases = rng.uniform(0, 2 * np.pi, size=(spec.n_sources, 2))
    sources = (spec.base
               + spec.daily_amp * np.sin(2 * np.pi * t / 24 + phases[:, :1])
               + spec.weekly_amp * np.sin(2 * np.pi * t / 168 + phases[:, 1:]))
    if spec.noise > 0:
        dist = np.zeros_like(sources)
        shocks = rng.normal(0.0, spec.noise, size=sources.shape)
        for i in range(1, len(t)):
            dist[:, i] = spec.ar_coef * dist[:, i - 1] + shocks[:, i]
        sources = sources + dist

    order = rng.permutation(n)
    n_empty = int(round(spec.empty_fraction * n))
    labels: list[RegionLabel] = [None] * n
    for s in range(spec.n_sources):
        labels[order[s]] = RegionLabel(int(order[s]), "unique", s, 1.0)
    for r in order[spec.n_sources:spec.n_sources + n_empty]:
        labels[r] = RegionLabel(int(r), "empty", -1, 0.0)
    for r in order[spec.n_sources + n_empty:]:
        labels[r] = RegionLabel(int(r), "redundant", int(rng.integers(spec.n_sources)),
                                float(np.round(rng.uniform(0.3, 0.9), 3)))

    channel_gain = 1.0 + 0.1 * np.arange(spec.channels)
    series = np.zeros((len(t), spec.channels, n))
    for lab in labels:
        if lab.label != "empty":
            series[:, :, lab.region] = lab.scale * sources[lab.source][:, None] * channel_gain
    if spec.region_noise > 0:
        active = np.array([lab.label != "empty" for lab in labels])
        series[:, :, active] += rng.normal(0.0, spec.region_noise,
                                           size=(len(t), spec.channels, int(active.sum())))
    series = np.clip(series, 0.0, None)
    images = series.reshape(len(t), spec.channels, spec.rows, spec.cols)

    mix = rng.uniform(0.0, 1.0, size=(spec.n_sources, len(POI_CATEGORIES)))
    poi = np.zeros((len(POI_CATEGORIES), n))
    for lab in labels:
        if lab.label != "empty":
            poi[:, lab.region] = rng.poisson(5.0 * lab.scale * mix[lab.source] + 1.0)
    poi = poi.reshape(len(POI_CATEGORIES), spec.rows, spec.cols)

    grid = GridSpec(0.0, spec.rows * 0.0045, 0.0, spec.cols * 0.0045, spec.rows, spec.cols)
    clock = IntervalClock(dt.datetime.fromisoformat(spec.epoch), 60)
    channels = FLOW_CHANNELS[:spec.channels] if spec.channels <= 3 else tuple(
        f"ch{i}" for i in range(spec.channels))
    test_start = spec.n_intervals - spec.test_weeks * 168
    ds = STDataset(grid, clock, 0, images, tuple(channels), poi, POI_CATEGORIES, test_start)
    return ds, labels


def write_ground_truth(path, labels: list[RegionLabel]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_index", "label", "source_id", "scale"])
        for lab in labels:
            w.writerow([lab.region, lab.label, lab.source, lab.scale])


def read_ground_truth(path) -> list[RegionLabel]:
    with open(path, newline="") as fh:
        return [RegionLabel(int(r["region_index"]), r["label"], int(r["source_id"]),
                            float(r["scale"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- sweeps

def sweep_keep_ratio(ds: STDataset, ratios, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     out_csv=None) -> list[dict]:
    """One training run per keep ratio (shared seed); returns the sweep rows."""
    rows = []
    for r in ratios:
        if not 0 < r <= 1:
            raise ValueError(f"keep ratio {r} outside (0, 1]")
        cfg = replace(model_cfg, keep_ratio=float(r))
        result = train_loop(ds, cfg, train_cfg)
        hist = history_spec(cfg, train_cfg)
        pred, truth = evaluate_counts(result.model, ds, ds.targets("val", hist, train_cfg.val_fraction), hist)
        rows.append({"keep_ratio": float(r), "val_rmse": rmse(pred, truth, per_channel=False),
                     "val_mae": mae(pred, truth, per_channel=False),
                     "gflops": count_flops(cfg).gflops, "params": result.model.param_count()})
    if out_csv is not None:
        write_sweep_csv(out_csv, rows)
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([f"{r['keep_ratio']:g}", f"{r['val_rmse']:.10g}", f"{r['val_mae']:.10g}",
                        f"{r['gflops']:.10g}", r["params"]])


# ---------------------------------------------------------------- map export

def write_grid_csv(path, grid: np.ndarray, fmt: str = "{:.6g}") -> None:
    with open(path, "w") as fh:
        for row in np.asarray(grid):
            fh.write(",".join(fmt.format(v) for v in row) + "\n")


def read_grid_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary P5 greyscale, maxval 255, scaled so the grid maximum maps to 255."""
    g = np.asarray(grid, dtype=np.float64)
    top = g.max() if g.size else 0.0
    pix = np.zeros(g.shape, dtype=np.uint8) if top <= 0 else np.clip(
        np.round(g / top * 255.0), 0, 255).astype(np.uint8)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


@dataclass
class IntervalMaps:
    interval_id: int
    mask: np.ndarray        # (H, W) {0, 1}
    attention: np.ndarray   # (H, W), readout attention mass per region
    keep_prob: np.ndarray | None  # (H, W) inference keep probability, if a sampler exists


def compute_maps(model: STSampleNet, ds: STDataset, target_id: int, hist: HistorySpec):
    """Inference forward for one target; returns (per-interval maps, prediction, truth)."""
    c = model.config
    batch = ds.make_batch([target_id], hist)
    res = model.infer(batch, capture_attention=True)
    history = sorted(ds_ids for ds_ids in _history_ids(ds, target_id, hist))
    t = len(history)
    if res.decision is not None:
        kept = res.decision.kept_indices
        masks = res.decision.mask()
        probs = res.decision.rho.data[..., 1]
    else:
        kept = np.tile(np.arange(c.n_regions), (t, 1))
        masks = np.ones((t, c.n_regions))
        probs = None
    last = res.attention[-1].mean(axis=1)   # (T, L, L), head-averaged
    offset = 1 if c.pooling == "readout" else 0
    maps = []
    for i in range(t):
        att = np.zeros(c.n_regions)
        if offset:
            att[kept[i]] = last[i, 0, offset:]
        else:
            att[kept[i]] = last[i].mean(axis=0)
        maps.append(IntervalMaps(history[i], masks[i].reshape(c.rows, c.cols),
                                 att.reshape(c.rows, c.cols),
                                 None if probs is None else probs[i].reshape(c.rows, c.cols)))
    pred = ds.normalizer.denormalize(res.prediction.data[0])
    return maps, pred, ds.image(target_id)


def _history_ids(ds: STDataset, target_id: int, hist: HistorySpec) -> list[int]:
    from .features import select_history
    return select_history(target_id, hist.closeness, hist.period, hist.trend, hist.period_span,
                          hist.trend_span, (ds.first_interval, ds.last_interval))


def export_maps(model: STSampleNet, ds: STDataset, target_id: int, hist: HistorySpec, out_dir,
                figures: bool = True) -> list[Path]:
    """Write prune masks, readout attention and prediction/target heatmaps for one target."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps, pred, truth = compute_maps(model, ds, target_id, hist)
    written = []
    for m in maps:
        stem = f"interval_{m.interval_id}"
        write_grid_csv(out / f"{stem}_mask.csv", m.mask, "{:.0f}")
        write_grid_csv(out / f"{stem}_attention.csv", m.attention)
        write_pgm(out / f"{stem}_attention.pgm", m.attention)
        written += [out / f"{stem}_mask.csv", out / f"{stem}_attention.csv",
                    out / f"{stem}_attention.pgm"]
        if m.keep_prob is not None:
            write_grid_csv(out / f"{stem}_keep_prob.csv", m.keep_prob)
            written.append(out / f"{stem}_keep_prob.csv")
    for ch, name in enumerate(ds.channels):
        for kind, arr in (("prediction", pred[ch]), ("target", truth[ch])):
            p = out / f"target_{target_id}_{kind}_{name}.csv"
            write_grid_csv(p, arr)
            written.append(p)
    if figures:
        from . import plotting
        written += plotting.plot_interval_maps(maps, out / f"target_{target_id}_maps.png")
        written += plotting.plot_prediction(pred, truth, ds.channels,
                                            out / f"target_{target_id}_prediction.png")
    return written


def mean_keep_probability(model: STSampleNet, ds: STDataset, target_ids, hist: HistorySpec,
                          batch_size: int = 32) -> np.ndarray:
    """Average inference keep probability per region over the given targets' intervals."""
    if not model.config.uses_sampler:
        return np.ones(model.config.n_regions)
    total = np.zeros(model.config.n_regions)
    count = 0
    for i in range(0, len(target_ids), batch_size):
        res = model.infer(ds.make_batch(target_ids[i:i + batch_size], hist))
        p = res.decision.rho.data[..., 1]
        total += p.sum(axis=0)
        count += p.shape[0]
    return total / count
