"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (see ``record``); the lines are printed
as they happen and again in a block at the end of the pytest run.  Run just
this file with ``pytest tests/test_acceptance.py -v``.
"""
import datetime as dt
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, frozen_loss_fn, toy_batch, toy_config
from gradcases import build_cases, max_case_error
from stsamplenet import tensorcore as tc
from stsamplenet.evalbench import (SyntheticCitySpec, attention_macs, count_flops, ha_baseline,
                                   mean_keep_probability, rmse, synth_generate)
from stsamplenet.features import (POI_CATEGORIES, TIME_FEATURE_DIM, GridSpec, IntervalClock,
                                  aggregate_all_trajectories, count_pois, encode_time,
                                  read_trajectories)
from stsamplenet.model import ModelConfig, STSampleNet
from stsamplenet.sampler import TRAINING, gumbel_topk
from stsamplenet.scpe import ScpeTable, scpe_lookup
from stsamplenet.synthgrid import expected_counts, script_trips
from stsamplenet.training import (Checkpoint, TrainConfig, evaluate_counts, history_spec,
                                  load_checkpoint, loss_kl, save_checkpoint, total_loss,
                                  train_loop)

# desk-scale model for the learning criteria (the synthetic city is 6x6)
SMOKE_MODEL = dict(rows=6, cols=6, d=16, blocks=1, heads=2, spatial_layers=1, temporal_layers=1,
                   levels=2, branching=2)
SMOKE_TRAIN = dict(lr=0.005, patience=30)
CLEAN_CITY = SyntheticCitySpec()
# i.i.d. per-region noise: HA averages only four samples per (weekday, hour) slot
NOISY_CITY = SyntheticCitySpec(region_noise=3.0)


def record(number: int, name: str, ok: bool, detail: str, elapsed: float) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail} [{elapsed:.1f}s]"
    ACCEPTANCE[number] = line
    print(line)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    @property
    def s(self):
        return time.perf_counter() - self.t0

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------- 1

def test_c01_gradient_suite():
    with Timer() as clock:
        worst_prim = max(max_case_error(params, fn) for params, fn in build_cases().values())
        worst_model = 0.0
        for keep in (1.0, 0.5):
            cfg = toy_config(keep_ratio=keep)
            model = STSampleNet(cfg, seed=1)
            loss = frozen_loss_fn(model, toy_batch(cfg))
            for p in model.params.values():
                worst_model = max(worst_model, tc.check_gradient(p, loss, max_elements=6,
                                                                 rng=np.random.default_rng(0)))
    ok = worst_prim < 1e-4 and worst_model < 1e-4 and clock.s < 120
    record(1, "gradient suite", ok,
           f"primitives max rel err {worst_prim:.2e}, full model {worst_model:.2e} (< 1e-4)", clock.s)
    assert ok


# ---------------------------------------------------------------- 2

def _brute_force_pois(grid, pois):
    out = np.zeros((len(POI_CATEGORIES), grid.rows, grid.cols))
    dlat = (grid.lat_max - grid.lat_min) / grid.rows
    dlon = (grid.lon_max - grid.lon_min) / grid.cols
    for cat, lat, lon in pois:
        for r in range(grid.rows):
            for c in range(grid.cols):
                lo_lat, lo_lon = grid.lat_min + r * dlat, grid.lon_min + c * dlon
                in_lat = lo_lat <= lat < lo_lat + dlat or (r == grid.rows - 1 and lat == grid.lat_max)
                in_lon = lo_lon <= lon < lo_lon + dlon or (c == grid.cols - 1 and lon == grid.lon_max)
                if in_lat and in_lon:
                    out[POI_CATEGORIES.index(cat), r, c] += 1
    return out


def test_c02_equation_checks():
    with Timer() as clock:
        rng = np.random.default_rng(2)
        grid = GridSpec(52.3, 52.39, 9.65, 9.80, 20, 20)
        pois = list(zip(rng.choice(POI_CATEGORIES, 1000),
                        rng.uniform(52.28, 52.41, 1000), rng.uniform(9.63, 9.82, 1000)))
        poi_ok = np.array_equal(count_pois(grid, pois).values, _brute_force_pois(grid, pois))
        stamps = [dt.datetime(2024, 1, 1) + dt.timedelta(minutes=int(m))
                  for m in rng.integers(0, 60 * 24 * 14, 500)]
        circle = max(abs(v[8] ** 2 + v[9] ** 2 - 1) for v in map(encode_time, stamps))
        v0, v360 = encode_time(dt.datetime(2024, 1, 3, 0, 0)), encode_time(dt.datetime(2024, 1, 3, 6, 0))
        anchors = (abs(v0[8]) < 1e-15 and v0[9] == 1.0 and v360[8] == 1.0 and abs(v360[9]) < 1e-15)
        dims = TIME_FEATURE_DIM == 10 and encode_time(stamps[0]).shape == (10,)
    ok = poi_ok and circle <= 1e-12 and anchors and dims
    record(2, "equation checks", ok,
           f"POI brute force {'equal' if poi_ok else 'DIFFERENT'}, max |sin^2+cos^2-1| {circle:.1e}, "
           f"anchors {'ok' if anchors else 'wrong'}, dim {TIME_FEATURE_DIM}", clock.s)
    assert ok


# ---------------------------------------------------------------- 3

def test_c03_gumbel_oracle():
    dists = [[0.5, 0.3, 0.2], [0.7, 0.2, 0.1], [0.34, 0.33, 0.33]]
    with Timer() as clock:
        worst = 0.0
        for i, keep in enumerate(dists):
            keep = np.asarray(keep)
            rho = np.broadcast_to(np.stack([1 - keep, keep], axis=-1), (200_000, 3, 2))
            dec = gumbel_topk(rho, 1, mode=TRAINING, rng=np.random.default_rng(100 + i))
            freq = np.bincount(dec.kept_indices[:, 0], minlength=3) / 200_000
            worst = max(worst, np.abs(freq - keep / keep.sum()).max())
    ok = worst <= 0.01 and clock.s < 60
    record(3, "Gumbel top-1 oracle", ok, f"max |freq - p| {worst:.4f} (<= 0.01)", clock.s)
    assert ok


# ---------------------------------------------------------------- 4

def test_c04_scpe_structure():
    with Timer() as clock:
        table = ScpeTable.create(20, 20, 128, 3, 4)
        params = {}
        table.init_params(params, np.random.default_rng(0))
        emb = table.embed(params).data
        sharing = True
        lo = 0
        for width, cells in zip(table.widths, table.index_maps):
            sub = emb[:, lo:lo + width]
            same_cell = cells[:, None] == cells[None, :]
            same_vec = (sub[:, None, :] == sub[None, :, :]).all(axis=-1)
            sharing &= bool(np.array_equal(same_cell, same_vec))
            lo += width
        sparse = True
        for region in (0, 217, 399):
            weights = tc.constant(np.random.default_rng(region).normal(size=128))
            grads = tc.backward(tc.sum_(tc.mul(scpe_lookup(region, table, params), weights)), params)
            for j, cells in enumerate(table.index_maps, start=1):
                rows = set(np.nonzero(np.abs(grads[f"scpe.level{j}.table"]).sum(axis=1))[0])
                sparse &= rows == {int(cells[region])}
    ok = sharing and sparse
    record(4, "SCPE structure", ok,
           f"sharing invariant {'holds' if sharing else 'BROKEN'} for 400x400 pairs, "
           f"gradient rows {'indexed only' if sparse else 'LEAK'}", clock.s)
    assert ok


# ---------------------------------------------------------------- 5

def test_c05_self_distillation_degeneracy(tmp_path):
    with Timer() as clock:
        cfg = toy_config(keep_ratio=1.0)
        model = STSampleNet(cfg)
        batch = toy_batch(cfg)
        res = model.full_forward(batch, TRAINING, np.random.default_rng(0))
        _, parts = total_loss(res.prediction, tc.constant(batch.targets), res.teacher_reps,
                              res.student_reps)
        kl_self = loss_kl(res.student_reps.data, res.student_reps).item()
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint.from_model(model))
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        sampler_params = sum(v.size for k, v in loaded.params.items() if k.startswith("sampler."))
    ok = parts["kl"] == 0.0 and kl_self == 0.0 and sampler_params == 0
    record(5, "self-distillation degeneracy", ok,
           f"L_KL {parts['kl']!r} (teacher == student gives {kl_self!r}), "
           f"sampler parameters in checkpoint {sampler_params}", clock.s)
    assert ok


# ---------------------------------------------------------------- 6

def test_c06_flop_model():
    with Timer() as clock:
        tiny = ModelConfig(rows=2, cols=2, channels=1, poi_channels=10, d=4, blocks=1, kernel=3,
                           levels=1, branching=2, heads=1, spatial_layers=1, temporal_layers=1,
                           ffn_mult=4, keep_ratio=0.5, closeness=1, period=1, trend=1)
        # hand count, component by component (N=4, d=4, T=3, k=2, one readout token)
        hand = (3 * (9 * 1 * 16 + 2 * 9 * 64 + 64)      # LFE
                + (9 * 10 * 16 + 2 * 9 * 64 + 64)       # SFE
                + 3 * (40 + 16)                         # TFE
                + 3 * 4 * (16 + 8)                      # sampler
                + 3 * (4 * 3 * 16 + 2 * 9 * 4)          # GFE attention
                + 3 * (2 * 3 * 4 * 16)                  # GFE FFN
                + (4 * 4 * 16 + 2 * 16 * 4 + 2 * 4 * 4 * 16)  # temporal
                + 4 * 1 * 4)                            # predictor
        exact = count_flops(tiny).total == hand
        ratio = attention_macs(401, 128)[1] / attention_macs(201, 128)[1]
        ratio_ok = abs(ratio / (401 / 201) ** 2 - 1) < 0.01
        curve = [count_flops(ModelConfig(), r / 10).total for r in range(9, 0, -1)]
        monotone = all(a > b for a, b in zip(curve, curve[1:]))
    ok = exact and ratio_ok and monotone
    record(6, "FLOP model", ok,
           f"hand count {hand} {'==' if exact else '!='} count_flops, attention ratio {ratio:.4f} "
           f"vs {(401 / 201) ** 2:.4f}, curve 0.9->0.1 {'strictly decreasing' if monotone else 'NOT monotone'}",
           clock.s)
    assert ok


# ---------------------------------------------------------------- 7

def test_c07_cost_reduction():
    with Timer() as clock:
        cfg = ModelConfig()
        full, half = count_flops(cfg, 1.0), count_flops(cfg, 0.5)
        reduction = 1 - half.total / full.total
    ok = reduction >= 0.30
    record(7, "cost reduction at keep 0.5", ok,
           f"{full.gflops:.3f} -> {half.gflops:.3f} GFLOPs, reduction {100 * reduction:.1f}% "
           f"(need >= 30%; LFE convolutions {100 * full.lfe / full.total:.0f}% of the keep-1.0 total "
           f"are not pruned)", clock.s)
    assert ok


# ---------------------------------------------------------------- 8 / 9

def _smoke_run(city: SyntheticCitySpec, keep: float, max_epochs: int):
    ds, labels = synth_generate(city)
    mc = ModelConfig(**SMOKE_MODEL, keep_ratio=keep)
    tcfg = TrainConfig(max_epochs=max_epochs, **SMOKE_TRAIN)
    result = train_loop(ds, mc, tcfg)
    hist = history_spec(mc, tcfg)
    ids = ds.targets("test", hist)
    pred, truth = evaluate_counts(result.model, ds, ids, hist)
    return ds, labels, result, hist, ids, pred, truth


@pytest.mark.slow
def test_c08_learning_smoke():
    with Timer() as clock:
        *_, ids, pred, truth = _smoke_run(CLEAN_CITY, 1.0, 100)
        clean = rmse(pred, truth, per_channel=False)
        scale = float(np.sqrt(np.mean(truth ** 2)))
        ds, _, res, _, ids, pred, truth = _smoke_run(NOISY_CITY, 1.0, 200)
        noisy = rmse(pred, truth, per_channel=False)
        ha = rmse(ha_baseline(ds, ids), truth, per_channel=False)
    ok = clean <= 0.05 * scale and noisy < ha and clock.s < 15 * 60
    record(8, "learning smoke", ok,
           f"noise-free test RMSE {clean:.3f} (<= 5% of RMS target = {0.05 * scale:.3f}); "
           f"noisy test RMSE {noisy:.3f} vs HA {ha:.3f} (best epoch {res.best.epoch})", clock.s)
    assert ok


@pytest.mark.slow
def test_c09_pruning_behaviour():
    with Timer() as clock:
        # noise-free city: its redundant / empty labels are exact
        ds, labels, res, hist, ids, *_ = _smoke_run(CLEAN_CITY, 0.6, 200)
        keep = mean_keep_probability(res.model, ds, ids, hist)
        by = {k: float(np.mean([keep[lab.region] for lab in labels if lab.label == k]))
              for k in ("empty", "redundant", "unique")}
    ok = by["empty"] < by["unique"] and clock.s < 10 * 60
    record(9, "pruning behaviour", ok,
           f"mean keep prob empty {by['empty']:.4f} vs unique {by['unique']:.4f} "
           f"(redundant {by['redundant']:.4f})", clock.s)
    assert ok


# ---------------------------------------------------------------- 10

def test_c10_determinism_and_persistence(tmp_path):
    from conftest import toy_dataset, toy_train_config

    with Timer() as clock:
        ds, _ = toy_dataset()
        logs = [train_loop(ds, toy_config(keep_ratio=0.5), toy_train_config(max_epochs=3)).metrics_csv()
                for _ in range(2)]
        same_log = logs[0].encode() == logs[1].encode()
        cfg = toy_config(keep_ratio=0.5)
        model = STSampleNet(cfg, seed=4)
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint.from_model(model))
        batch = toy_batch(cfg, batch=4)
        diff = float(np.abs(model.infer(batch).prediction.data
                            - load_checkpoint(tmp_path / "m.ckpt").build_model().infer(batch).prediction.data).max())
    ok = same_log and diff <= 1e-6 and clock.s < 60
    record(10, "determinism and persistence", ok,
           f"metric logs {'byte-identical' if same_log else 'DIFFER'}, "
           f"reload max |diff| {diff:.2e} (<= 1e-6)", clock.s)
    assert ok


# ---------------------------------------------------------------- 11

def test_c11_ingestion_equivalence(tmp_path):
    clock_ = IntervalClock(dt.datetime(2024, 1, 1), 60)
    grid = GridSpec(52.3, 52.39, 9.65, 9.80, 10, 10)
    with Timer() as clock:
        script = script_trips(grid, 1000, seed=11)
        script.write_csv(tmp_path / "trips.csv")
        first, last = script.interval_range(clock_)
        bulk, _ = aggregate_all_trajectories(grid, read_trajectories(tmp_path / "trips.csv"),
                                             clock_, first, last)
        oracle = np.stack([expected_counts(script, i, clock_).values for i in range(first, last + 1)])
        equal = np.array_equal(bulk, oracle)
        conserved = True
        for seed in range(5):
            for pattern in ("highway", "commuter", "mixed"):
                s = script_trips(grid, 200, pattern, seed)
                lo, hi = s.interval_range(clock_)
                imgs, _ = aggregate_all_trajectories(grid, s.trajectories(), clock_, lo, hi)
                conserved &= imgs[:, 0].sum() == imgs[:, 1].sum()
    ok = equal and conserved and clock.s < 60
    record(11, "ingestion equivalence", ok,
           f"pipeline {'==' if equal else '!='} oracle for 1000 vehicles, "
           f"inflow == outflow on 15 datasets: {conserved}", clock.s)
    assert ok
