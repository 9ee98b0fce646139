"""Losses, AdamW, early-stopped training and checkpoints."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from . import tensorfile
from .data import HistorySpec, STDataset
from .features import Normalizer
from .model import Batch, ModelConfig, STSampleNet
from .sampler import INFERENCE, TRAINING
from .tensorcore import Tensor

log = logging.getLogger(__name__)

LR_GRID = (0.005, 0.001, 0.0005, 0.0001)
METRIC_COLUMNS = ("epoch", "train_loss", "train_mse", "train_mae", "train_kl",
                  "val_rmse", "val_mae", "seconds")


class EmptyDataset(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.3
    lr: float = 0.001
    max_epochs: int = 500
    patience: int = 30
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.2
    weight_decay: float = 0.01
    period_span: int = 24
    trend_span: int = 168
    log_wall_time: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- losses

def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise tc.ShapeMismatch(f"{what}: prediction {a.shape} vs target {b.shape}")


def loss_mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "loss_mse")
    diff = tc.sub(pred, target)
    return tc.mean(tc.mul(diff, diff))


def loss_mae(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "loss_mae")
    return tc.mean(tc.abs_(tc.sub(pred, target)))


def loss_kl(teacher: Tensor | np.ndarray, student: Tensor) -> Tensor:
    """Mean over intervals of KL(softmax(teacher) || softmax(student)) along the feature axis."""
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    if t.shape != student.shape:
        raise tc.ShapeMismatch(f"loss_kl: teacher {t.shape} vs student {student.shape}")
    z = t - t.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    terms = tc.mul(tc.constant(p), tc.sub(tc.constant(log_p), tc.log_softmax(student, axis=-1)))
    count = int(np.prod(t.shape[:-1]))
    return tc.scalar_mul(tc.sum_(terms), 1.0 / count)


def total_loss(pred: Tensor, target: Tensor, teacher, student: Tensor | None,
               alpha: float = 0.3) -> tuple[Tensor, dict]:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    mse = loss_mse(pred, target)
    mae = loss_mae(pred, target)
    total = tc.add(mse, mae)
    kl_value = 0.0
    if teacher is not None and student is not None:
        kl = loss_kl(teacher, student)
        kl_value = kl.item()
        total = tc.add(total, tc.scalar_mul(kl, alpha))
    return total, {"mse": mse.item(), "mae": mae.item(), "kl": kl_value, "loss": total.item()}


# ---------------------------------------------------------------- AdamW

def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """In-place decoupled-weight-decay Adam update; ``step`` counts from 1."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise tc.ShapeMismatch(f"adamw_step: param {param.shape}, grad {grad.shape}")
    param -= lr * weight_decay * param
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.step_count, self.lr,
                       self.betas[0], self.betas[1], self.eps, self.weight_decay)

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.step_count])}
        for n in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        self.step_count = int(entries["opt.step"][0])
        for n in self.params:
            self.m[n] = entries[f"opt.m.{n}"].astype(np.float64)
            self.v[n] = entries[f"opt.v.{n}"].astype(np.float64)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    model_config: ModelConfig
    epoch: int = 0
    best_val_rmse: float = math.inf
    normalizer: Normalizer | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: STSampleNet, **kw) -> "Checkpoint":
        return cls({n: p.data.copy() for n, p in model.params.items()},
                   {n: b.copy() for n, b in model.buffers.items()}, model.config, **kw)

    def build_model(self) -> STSampleNet:
        model = STSampleNet(self.model_config)
        missing = set(model.params) ^ set(self.params)
        if missing:
            raise KeyError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
        for n, p in model.params.items():
            p.data[...] = self.params[n]
        for n in model.buffers:
            model.buffers[n][...] = self.buffers[n]
        return model


def _config_text(cfg: ModelConfig) -> str:
    return "\n".join(f"{k}={v}" for k, v in asdict(cfg).items())


def _parse_model_config(text: str) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    kw = {}
    for line in text.splitlines():
        k, _, v = line.partition("=")
        t = types[k]
        kw[k] = int(v) if t in ("int", int) else float(v) if t in ("float", float) else v
    return ModelConfig(**kw)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries: dict[str, np.ndarray] = {}
    for n, a in ckpt.params.items():
        entries[n] = a
    for n, a in ckpt.buffers.items():
        entries[f"buffer.{n}"] = a
    entries["meta.epoch"] = np.array([ckpt.epoch])
    entries["meta.best_val_rmse"] = np.array([ckpt.best_val_rmse])
    entries["meta.config"] = tensorfile.text_blob(_config_text(ckpt.model_config))
    if ckpt.normalizer is not None:
        entries["norm.min"] = ckpt.normalizer.min
        entries["norm.max"] = ckpt.normalizer.max
    entries.update(ckpt.optimizer)
    tensorfile.save(path, entries)


def load_checkpoint(path) -> Checkpoint:
    e = tensorfile.load(path)
    cfg = _parse_model_config(tensorfile.blob_text(e.pop("meta.config")))
    epoch = int(e.pop("meta.epoch")[0])
    best = float(e.pop("meta.best_val_rmse")[0])
    norm = None
    if "norm.min" in e:
        norm = Normalizer(e.pop("norm.min").astype(np.float64), e.pop("norm.max").astype(np.float64))
    opt = {k: e.pop(k) for k in list(e) if k.startswith("opt.")}
    buffers = {k[len("buffer."):]: e.pop(k).astype(np.float64) for k in list(e) if k.startswith("buffer.")}
    params = {k: v.astype(np.float64) for k, v in e.items()}
    return Checkpoint(params, buffers, cfg, epoch, best, norm, opt)


# ---------------------------------------------------------------- training

def history_spec(model_cfg: ModelConfig, cfg: TrainConfig) -> HistorySpec:
    return HistorySpec(model_cfg.closeness, model_cfg.period, model_cfg.trend,
                       cfg.period_span, cfg.trend_span)


def predict_normalized(model: STSampleNet, ds: STDataset, targets: list[int], hist: HistorySpec,
                       batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(targets), batch_size):
        batch = ds.make_batch(targets[i:i + batch_size], hist)
        out.append(model.infer(batch).prediction.data)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_counts(model: STSampleNet, ds: STDataset, targets: list[int], hist: HistorySpec):
    """(predicted counts, true counts), each (n, M, H, W)."""
    pred = ds.normalizer.denormalize(predict_normalized(model, ds, targets, hist))
    truth = ds.images[np.asarray(targets) - ds.first_interval]
    return pred, truth


def _epoch_rng(seed: int, epoch: int, batch: int | None = None) -> np.random.Generator:
    key = (epoch,) if batch is None else (epoch, batch)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[dict]
    model: STSampleNet

    def metrics_csv(self) -> str:
        return format_metrics(self.log)


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[c]:.10g}" for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def train_step(model: STSampleNet, opt: AdamW, batch: Batch, alpha: float,
               rng: np.random.Generator) -> dict:
    res = model.full_forward(batch, TRAINING, rng)
    loss, parts = total_loss(res.prediction, tc.constant(batch.targets), res.teacher_reps,
                             res.student_reps, alpha)
    tc.backward(loss, model.params)
    opt.step()
    return parts


def train_loop(ds: STDataset, model_cfg: ModelConfig, cfg: TrainConfig,
               model: STSampleNet | None = None, on_epoch=None) -> TrainResult:
    hist = history_spec(model_cfg, cfg)
    train_ids = ds.targets("train", hist, cfg.val_fraction)
    val_ids = ds.targets("val", hist, cfg.val_fraction)
    if not train_ids or not val_ids:
        raise EmptyDataset("no training or validation targets with full history")
    model = model or STSampleNet(model_cfg, seed=cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay)
    rows: list[dict] = []
    best: Checkpoint | None = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = _epoch_rng(cfg.seed, epoch).permutation(len(train_ids))
        sums = {"loss": 0.0, "mse": 0.0, "mae": 0.0, "kl": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            ids = [train_ids[i] for i in order[start:start + cfg.batch_size]]
            parts = train_step(model, opt, ds.make_batch(ids, hist), cfg.alpha,
                               _epoch_rng(cfg.seed, epoch, b))
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        pred, truth = evaluate_counts(model, ds, val_ids, hist)
        err = pred - truth
        row = {"epoch": epoch,
               "train_loss": sums["loss"] / n_batches, "train_mse": sums["mse"] / n_batches,
               "train_mae": sums["mae"] / n_batches, "train_kl": sums["kl"] / n_batches,
               "val_rmse": float(np.sqrt(np.mean(err ** 2))), "val_mae": float(np.mean(np.abs(err))),
               "seconds": time.perf_counter() - t0 if cfg.log_wall_time else 0.0}
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d loss %.5f val_rmse %.5f", epoch, row["train_loss"], row["val_rmse"])
        if best is None or row["val_rmse"] < best.best_val_rmse:
            best = Checkpoint.from_model(model, epoch=epoch, best_val_rmse=row["val_rmse"],
                                         normalizer=ds.normalizer, optimizer=opt.state())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best, rows, best.build_model())
