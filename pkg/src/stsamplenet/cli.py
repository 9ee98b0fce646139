"""Command-line driver: ``stsamplenet <command> [--config F] [--set k=v ...]``.

Configuration is a flat ``key=value`` file with ``#`` comments.  Values
resolve as defaults < config file < ``--set`` / dedicated flags, and the
effective configuration is written to ``config.echo`` in the output
directory so a run can be repeated with ``--config config.echo``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evalbench, plotting, tensorfile
from .data import STDataset, load_archive, save_archive
from .features import (EVENT_CHANNELS, FLOW_CHANNELS, POI_CATEGORIES, EmptyTrainingSet, GridSpec,
                       InsufficientHistory, IntervalClock, OutOfBounds, ParseError,
                       aggregate_all_trajectories, aggregate_events, count_pois, read_events,
                       read_pois, read_trajectories)
from .model import ModelConfig
from .synthgrid import script_trips
from .training import (EmptyDataset, TrainConfig, evaluate_counts, format_metrics, history_spec,
                       load_checkpoint, save_checkpoint, train_loop)

log = logging.getLogger("stsamplenet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("ingest", "synth", "train", "eval", "sweep", "export-maps", "flops")


class ConfigError(ValueError):
    pass


class IOFailure(OSError):
    pass


# every key the run configuration understands, with its default
RUN_DEFAULTS: dict[str, object] = {
    "data": "",
    "checkpoint": "",
    "split": "test",
    "ha": False,
    "interval": -1,
    "ratios": "1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1",
    "trips": "",
    "events": "",
    "pois": "",
    "lat_min": 52.3,
    "lat_max": 52.39,
    "lon_min": 9.65,
    "lon_max": 9.80,
    "cell_size_m": 500.0,
    "epoch": "",
    "interval_minutes": 60,
    "test_fraction": 0.2,
    "utc_offset": 0.0,
    "synth_kind": "grid",
    "synth_sources": 4,
    "synth_weeks": 5,
    "synth_test_weeks": 1,
    "synth_empty": 0.25,
    "synth_noise": 0.0,
    "synth_ar": 0.9,
    "synth_region_noise": 0.0,
    "synth_vehicles": 1000,
    "synth_pattern": "mixed",
}


def _defaults() -> dict:
    out = {}
    for cls in (ModelConfig, TrainConfig):
        inst = cls()
        for f in fields(cls):
            out[f.name] = getattr(inst, f.name)
    out.update(RUN_DEFAULTS)
    return out


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(lines, source: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> dict:
    """Defaults, then the config file, then overrides; unknown keys are rejected."""
    cfg = _defaults()
    layers = []
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from None
        layers.append(parse_pairs(text.splitlines(), config_path))
    layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, cfg[key])
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{f.name: cfg[f.name] for f in fields(ModelConfig)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_echo(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text("".join(f"{k}={_fmt(cfg[k])}\n" for k in sorted(cfg)))


def _need(cfg: dict, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"missing required key {key!r}")
    return cfg[key]


def _dataset(cfg: dict) -> STDataset:
    path = Path(_need(cfg, "data"))
    if not (path / "manifest.txt").exists():
        raise IOFailure(f"no feature archive at {path}")
    return load_archive(path)


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg: dict, out: Path) -> int:
    grid = GridSpec(cfg["lat_min"], cfg["lat_max"], cfg["lon_min"], cfg["lon_max"],
                    cfg["rows"], cfg["cols"], cfg["cell_size_m"])
    if bool(cfg["trips"]) == bool(cfg["events"]):
        raise ConfigError("set exactly one of 'trips' or 'events'")
    for key in ("trips", "events", "pois"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise IOFailure(f"{key} file not found: {cfg[key]}")
    offset = cfg["utc_offset"]
    if cfg["trips"]:
        trajs = read_trajectories(cfg["trips"], offset)
        stamps = [p[0] for pts in trajs.values() for p in pts]
        channels = FLOW_CHANNELS
    else:
        events = read_events(cfg["events"], offset)
        stamps = [e[1] for e in events]
        channels = EVENT_CHANNELS
    if cfg["epoch"]:
        epoch = dt.datetime.fromisoformat(cfg["epoch"])
    elif stamps:
        first = min(stamps)
        epoch = first.replace(hour=0, minute=0, second=0, microsecond=0)
    else:
        epoch = dt.datetime(1970, 1, 1)
    clock = IntervalClock(epoch, cfg["interval_minutes"])
    skipped = 0
    if not stamps:
        log.warning("input contains no records; writing an archive with zero intervals")
        images, first_id = np.zeros((0, len(channels), grid.rows, grid.cols)), 0
    else:
        first_id = clock.interval_of(min(stamps))
        last_id = clock.interval_of(max(stamps))
        if cfg["trips"]:
            images, skipped = aggregate_all_trajectories(grid, trajs, clock, first_id, last_id)
        else:
            imgs = [aggregate_events(grid, events, i, clock) for i in range(first_id, last_id + 1)]
            images = np.stack([im.values for im in imgs])
            skipped = sum(im.skipped for im in imgs)
    poi_skipped = 0
    if cfg["pois"]:
        poi_img = count_pois(grid, read_pois(cfg["pois"]))
        poi, poi_skipped = poi_img.values, poi_img.skipped
    else:
        poi = np.zeros((len(POI_CATEGORIES), grid.rows, grid.cols))
    n = len(images)
    test_start = first_id + n - int(round(n * cfg["test_fraction"]))
    ds = STDataset(grid, clock, first_id, images, channels, poi, POI_CATEGORIES, test_start)
    save_archive(ds, out)
    if skipped or poi_skipped:
        log.warning("out-of-bounds records skipped: measurements=%d pois=%d", skipped, poi_skipped)
    print(f"intervals={n} regions={grid.n_regions} skipped_measurements={skipped} "
          f"skipped_pois={poi_skipped}")
    return EXIT_OK


def cmd_synth(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if cfg["synth_kind"] == "trips":
        grid = GridSpec(cfg["lat_min"], cfg["lat_max"], cfg["lon_min"], cfg["lon_max"],
                        cfg["rows"], cfg["cols"], cfg["cell_size_m"])
        epoch = dt.datetime.fromisoformat(cfg["epoch"]) if cfg["epoch"] else dt.datetime(2024, 1, 1)
        script = script_trips(grid, cfg["synth_vehicles"], cfg["synth_pattern"], cfg["seed"], epoch)
        script.write_csv(out / "trips.csv")
        print(f"vehicles={len(script.vehicles)} trips={out / 'trips.csv'}")
        return EXIT_OK
    if cfg["synth_kind"] != "grid":
        raise ConfigError("synth_kind must be 'grid' or 'trips'")
    spec = evalbench.SyntheticCitySpec(
        rows=cfg["rows"], cols=cfg["cols"], n_sources=cfg["synth_sources"],
        weeks=cfg["synth_weeks"], test_weeks=cfg["synth_test_weeks"],
        empty_fraction=cfg["synth_empty"], noise=cfg["synth_noise"], ar_coef=cfg["synth_ar"],
        region_noise=cfg["synth_region_noise"], channels=cfg["channels"], seed=cfg["seed"])
    ds, labels = evalbench.synth_generate(spec)
    save_archive(ds, out)
    evalbench.write_ground_truth(out / "ground_truth.csv", labels)
    print(f"intervals={len(ds.images)} regions={ds.grid.n_regions} test_start={ds.test_start}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    ds = _dataset(cfg)
    mc, tc_ = model_config(cfg), train_config(cfg)
    _check_grid(ds, mc)
    result = train_loop(ds, mc, tc_)
    (out / "metrics.csv").write_text(format_metrics(result.log))
    save_checkpoint(out / "best.ckpt", result.best)
    plotting.plot_training_curve(result.log, out / "training_curve.png")
    print(f"best_epoch={result.best.epoch} best_val_rmse={result.best.best_val_rmse:.10g}")
    return EXIT_OK


def _check_grid(ds: STDataset, mc: ModelConfig) -> None:
    if (ds.grid.rows, ds.grid.cols, len(ds.channels)) != (mc.rows, mc.cols, mc.channels):
        raise ConfigError(f"model grid {mc.rows}x{mc.cols}x{mc.channels} does not match data "
                          f"{ds.grid.rows}x{ds.grid.cols}x{len(ds.channels)}")


def _metrics_rows(pred, truth, channels) -> list[list]:
    r, a = evalbench.rmse(pred, truth), evalbench.mae(pred, truth)
    rows = [[ch, f"{r[i]:.10g}", f"{a[i]:.10g}"] for i, ch in enumerate(channels)]
    rows.append(["all", f"{evalbench.rmse(pred, truth, False):.10g}",
                 f"{evalbench.mae(pred, truth, False):.10g}"])
    return rows


def cmd_eval(cfg: dict, out: Path) -> int:
    ds = _dataset(cfg)
    split = cfg["split"]
    tc_ = train_config(cfg)
    if cfg["ha"]:
        hist = history_spec(model_config(cfg), tc_)
        ids = ds.targets(split, hist, tc_.val_fraction)
        if not ids:
            raise EmptyDataset(f"split {split!r} has no targets")
        truth = ds.images[np.asarray(ids) - ds.first_interval]
        pred = evalbench.ha_baseline(ds, ids)
        name = f"eval_ha_{split}.csv"
    else:
        ckpt = load_checkpoint(_need(cfg, "checkpoint"))
        model = ckpt.build_model()
        _check_grid(ds, model.config)
        hist = history_spec(model.config, tc_)
        ids = ds.targets(split, hist, tc_.val_fraction)
        if not ids:
            raise EmptyDataset(f"split {split!r} has no targets")
        pred, truth = evaluate_counts(model, ds, ids, hist)
        name = f"eval_{split}.csv"
    rows = _metrics_rows(pred, truth, ds.channels)
    with open(out / name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "rmse", "mae"])
        w.writerows(rows)
    for row in rows:
        print(f"channel={row[0]} rmse={row[1]} mae={row[2]}")
    return EXIT_OK


def _ratios(cfg: dict) -> list[float]:
    try:
        ratios = [float(r) for r in str(cfg["ratios"]).split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"ratios: cannot parse {cfg['ratios']!r}") from None
    if not ratios or any(not 0 < r <= 1 for r in ratios):
        raise ConfigError("ratios must be a non-empty list within (0, 1]")
    return ratios


def cmd_sweep(cfg: dict, out: Path) -> int:
    ds = _dataset(cfg)
    mc, tc_ = model_config(cfg), train_config(cfg)
    _check_grid(ds, mc)
    rows = evalbench.sweep_keep_ratio(ds, _ratios(cfg), mc, tc_, out / "sweep.csv")
    plotting.plot_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"keep_ratio={r['keep_ratio']:g} val_rmse={r['val_rmse']:.6g} gflops={r['gflops']:.6g}")
    return EXIT_OK


def cmd_export_maps(cfg: dict, out: Path) -> int:
    ds = _dataset(cfg)
    model = load_checkpoint(_need(cfg, "checkpoint")).build_model()
    _check_grid(ds, model.config)
    tc_ = train_config(cfg)
    hist = history_spec(model.config, tc_)
    target = cfg["interval"]
    if target < 0:
        ids = ds.targets("test", hist, tc_.val_fraction)
        if not ids:
            raise EmptyDataset("no test target with full history")
        target = ids[0]
    files = evalbench.export_maps(model, ds, target, hist, out / "maps")
    print(f"target={target} files={len(files)} dir={out / 'maps'}")
    return EXIT_OK


def cmd_flops(cfg: dict, out: Path) -> int:
    mc = model_config(cfg)
    report = evalbench.count_flops(mc)
    sys.stdout.write(report.text())
    (out / "flops.txt").write_text(report.text())
    ratios = _ratios(cfg)
    with open(out / "flop_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["keep_ratio", "k", "total_macs", "gflops"])
        gflops = []
        for r in ratios:
            rep = evalbench.count_flops(mc, r)
            gflops.append(rep.gflops)
            w.writerow([f"{r:g}", rep.k, rep.total, f"{rep.gflops:.10g}"])
    plotting.plot_flop_curve(ratios, gflops, out / "flop_curve.png")
    return EXIT_OK


HANDLERS = {"ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "export-maps": cmd_export_maps, "flops": cmd_flops}


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stsamplenet", description="Region-sampling spatio-temporal forecaster")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", default=".", help="output / run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_kind(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    data_errors = (ParseError, IOFailure, OSError, InsufficientHistory, EmptyTrainingSet,
                   EmptyDataset, OutOfBounds, tensorfile.FormatError, KeyError)
    if isinstance(exc, data_errors):
        return EXIT_DATA, "data"
    return EXIT_RUNTIME, "runtime"


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        overrides = parse_pairs(args.set, "--set")
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = resolve_config(args.config, overrides)
        out = Path(args.out)
        write_echo(out, cfg)
        return HANDLERS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        code, kind = _error_kind(exc)
        msg = str(exc).replace("\n", " ")
        print(f"error code={code} kind={kind} type={type(exc).__name__} msg={msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
