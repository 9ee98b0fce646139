import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_batch, toy_config, toy_dataset, toy_train_config
from stsamplenet import tensorcore as tc
from stsamplenet.model import STSampleNet
from stsamplenet.training import (LR_GRID, METRIC_COLUMNS, AdamW, Checkpoint, EmptyDataset,
                                  TrainConfig, adamw_step, history_spec, load_checkpoint, loss_kl,
                                  loss_mae, loss_mse, save_checkpoint, total_loss, train_loop)

C = tc.constant


# ---------------------------------------------------------------- losses

def test_mse_examples():
    x = np.random.default_rng(0).normal(size=(3, 4, 4))
    assert loss_mse(C(x), C(x)).item() == 0.0
    assert loss_mse(C(x + 0.5), C(x)).item() == pytest.approx(0.25, abs=1e-15)


def test_mae_examples():
    x = np.random.default_rng(0).normal(size=(3, 4, 4))
    assert loss_mae(C(x), C(x)).item() == 0.0
    assert loss_mae(C(x + 0.5), C(x)).item() == pytest.approx(0.5, abs=1e-15)


def test_losses_match_loops():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    sq = ab = 0.0
    for i in np.ndindex(a.shape):
        sq += (a[i] - b[i]) ** 2
        ab += abs(a[i] - b[i])
    assert loss_mse(C(a), C(b)).item() == pytest.approx(sq / a.size, rel=1e-13)
    assert loss_mae(C(a), C(b)).item() == pytest.approx(ab / a.size, rel=1e-13)


def test_loss_shape_mismatch():
    with pytest.raises(tc.ShapeMismatch):
        loss_mse(C(np.ones((2, 2))), C(np.ones((2, 3))))
    with pytest.raises(tc.ShapeMismatch):
        loss_kl(np.ones((2, 4)), C(np.ones((2, 3))))


def test_mae_subgradient_zero_at_ties():
    p = tc.parameter(np.array([1.0, 2.0]), "p")
    g = tc.backward(loss_mae(p, C(np.array([1.0, 0.0]))), [p])["p"]
    np.testing.assert_array_equal(g, [0.0, 0.5])


def test_kl_hand_value():
    # p = [.5, .5], q = [.75, .25]: 0.5 log(0.5/0.75) + 0.5 log(0.5/0.25) = 0.5 log(4/3)
    kl = loss_kl(np.array([[0.0, 0.0]]), C(np.array([[math.log(3.0), 0.0]]))).item()
    assert kl == pytest.approx(0.5 * math.log(4.0 / 3.0), abs=1e-14)
    assert kl == pytest.approx(0.1438, abs=1e-4)


def test_kl_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(3, 9, 8))
    assert loss_kl(x, C(x)).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    t, s = rng.normal(scale=3, size=(4, 6)), rng.normal(scale=3, size=(4, 6))
    assert loss_kl(t, C(s)).item() >= -1e-15


def test_kl_teacher_receives_no_gradient():
    t = tc.parameter(np.random.default_rng(0).normal(size=(2, 4)), "t")
    s = tc.parameter(np.random.default_rng(1).normal(size=(2, 4)), "s")
    grads = tc.backward(loss_kl(t, s), [t, s])
    assert not grads["t"].any() and grads["s"].any()


def test_total_loss_additive():
    rng = np.random.default_rng(0)
    pred, target = C(rng.uniform(-1, 1, (2, 3))), C(rng.uniform(-1, 1, (2, 3)))
    t, s = rng.normal(size=(2, 4)), C(rng.normal(size=(2, 4)))
    total, parts = total_loss(pred, target, t, s, 0.3)
    assert parts["loss"] == total.item()
    expected = loss_mse(pred, target).item() + loss_mae(pred, target).item() + 0.3 * loss_kl(t, s).item()
    assert total.item() == pytest.approx(expected, rel=1e-15)
    zero, _ = total_loss(target, target, None, None, 0.0)
    assert zero.item() == 0.0
    with pytest.raises(ValueError):
        total_loss(pred, target, None, None, -1.0)


def test_defaults():
    cfg = TrainConfig()
    assert cfg.alpha == 0.3 and cfg.patience == 30 and cfg.max_epochs == 500
    assert cfg.lr in LR_GRID and cfg.val_fraction == 0.2
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_gradient_no_decay():
    w = np.array([1.0, -2.0])
    adamw_step(w, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1, weight_decay=0.0)
    np.testing.assert_array_equal(w, [1.0, -2.0])


def test_adamw_first_step():
    w = np.array([1.0])
    adamw_step(w, np.array([1.0]), np.zeros(1), np.zeros(1), 1, 0.1, weight_decay=0.0)
    assert w[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_decay_is_decoupled():
    w = np.array([2.0])
    adamw_step(w, np.zeros(1), np.zeros(1), np.zeros(1), 1, 0.1, weight_decay=0.5)
    assert w[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_adamw_three_step_trace():
    grads = [0.5, -1.0, 2.0]
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    # hand trace
    w_ref, m_ref, v_ref = 1.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        w_ref = w_ref - lr * wd * w_ref
        m_ref = b1 * m_ref + (1 - b1) * g
        v_ref = b2 * v_ref + (1 - b2) * g * g
        w_ref = w_ref - lr * (m_ref / (1 - b1 ** t)) / (math.sqrt(v_ref / (1 - b2 ** t)) + eps)
    w, m, v = np.array([1.5]), np.zeros(1), np.zeros(1)
    for t, g in enumerate(grads, start=1):
        adamw_step(w, np.array([g]), m, v, t, lr, b1, b2, eps, wd)
    assert w[0] == pytest.approx(w_ref, rel=1e-14)


def test_adamw_class_state_round_trip():
    p = {"w": tc.parameter(np.ones(3), "w")}
    opt = AdamW(p, 0.01)
    p["w"].grad = np.array([1.0, 2.0, 3.0])
    opt.step()
    state = opt.state()
    other = AdamW({"w": tc.parameter(np.ones(3), "w")}, 0.01)
    other.load_state(state)
    assert other.step_count == 1
    np.testing.assert_array_equal(other.m["w"], opt.m["w"])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = toy_config(keep_ratio=0.5)
    model = STSampleNet(cfg, seed=3)
    ckpt = Checkpoint.from_model(model, epoch=7, best_val_rmse=1.25)
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.model_config == cfg and loaded.epoch == 7 and loaded.best_val_rmse == 1.25
    batch = toy_batch(cfg)
    a = model.infer(batch).prediction.data
    b = loaded.build_model().infer(batch).prediction.data
    assert np.abs(a - b).max() < 1e-6


def test_checkpoint_layout(tmp_path):
    from stsamplenet import tensorfile

    model = STSampleNet(toy_config())
    save_checkpoint(tmp_path / "m.ckpt", Checkpoint.from_model(model))
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:4] == b"STSN"
    entries = tensorfile.decode(blob)
    assert "meta.config" in entries and "buffer.lfe.stem.bn.running_mean" in entries
    assert entries["lfe.stem.weight"].dtype == np.float32


# ---------------------------------------------------------------- train loop

def test_train_loop_early_stops_without_improvement(monkeypatch):
    from stsamplenet import training

    # validation error pinned so no epoch can improve on the first
    monkeypatch.setattr(training, "evaluate_counts",
                        lambda model, ds, ids, hist: (np.ones((len(ids), 1)), np.zeros((len(ids), 1))))
    ds, _ = toy_dataset()
    res = train_loop(ds, toy_config(), toy_train_config(patience=1, max_epochs=50))
    assert len(res.log) == 2 and res.best.epoch == 0


def test_best_checkpoint_is_best_epoch():
    ds, _ = toy_dataset()
    res = train_loop(ds, toy_config(), toy_train_config(max_epochs=6, patience=2))
    rmses = [r["val_rmse"] for r in res.log]
    assert res.best.best_val_rmse == min(rmses)
    assert res.best.epoch == int(np.argmin(rmses))


def test_metric_log_columns_and_determinism():
    ds, _ = toy_dataset()
    a = train_loop(ds, toy_config(keep_ratio=0.5), toy_train_config(max_epochs=2))
    b = train_loop(ds, toy_config(keep_ratio=0.5), toy_train_config(max_epochs=2))
    assert a.metrics_csv() == b.metrics_csv()
    assert a.metrics_csv().splitlines()[0] == ",".join(METRIC_COLUMNS)


def test_empty_dataset():
    ds, _ = toy_dataset(n_intervals=10)
    with pytest.raises(EmptyDataset):
        train_loop(ds, toy_config(), toy_train_config())


def test_overfit_smoke():
    ds, _ = toy_dataset(n_intervals=33)
    tcfg = toy_train_config(max_epochs=200, patience=200, lr=0.005)
    hist = history_spec(toy_config(), tcfg)
    assert len(ds.targets("train", hist, tcfg.val_fraction)) == 20
    res = train_loop(ds, toy_config(), tcfg)
    first = math.sqrt(res.log[0]["train_mse"])
    best = min(math.sqrt(r["train_mse"]) for r in res.log)
    assert best < 0.2 * first
