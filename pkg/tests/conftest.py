import numpy as np
import pytest

from stsamplenet import tensorcore as tc
from stsamplenet.model import Batch, ModelConfig, STSampleNet
from stsamplenet.training import total_loss


def toy_config(keep_ratio: float = 1.0, **kw) -> ModelConfig:
    """4x4 grid, d=8, one residual block, three input intervals."""
    base = dict(rows=4, cols=4, channels=3, poi_channels=10, d=8, blocks=1, heads=2,
                spatial_layers=1, temporal_layers=1, levels=2, branching=2,
                closeness=1, period=1, trend=1, keep_ratio=keep_ratio)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(cfg: ModelConfig, batch: int = 2, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    t, m, h, w = cfg.n_intervals, cfg.channels, cfg.rows, cfg.cols
    return Batch(rng.uniform(-1, 1, (batch, t, m, h, w)), rng.uniform(-1, 1, (batch, t, 10)),
                 rng.uniform(-1, 1, (cfg.poi_channels, h, w)), rng.uniform(-1, 1, (batch, m, h, w)))


def frozen_loss_fn(model: STSampleNet, batch: Batch, alpha: float = 0.3, seed: int = 0):
    """Deterministic total loss: BatchNorm in eval mode and the teacher held fixed.

    The teacher is a stop-gradient target, so finite differences must not see
    it move when a parameter is nudged.
    """
    teacher = None
    if model.config.uses_sampler:
        with tc.no_grad():
            r = model.full_forward(batch, "training", np.random.default_rng(seed), bn_training=False)
        teacher = r.teacher_reps.data.copy()

    def loss():
        r = model.full_forward(batch, "training", np.random.default_rng(seed), bn_training=False,
                               teacher_override=teacher)
        return total_loss(r.prediction, tc.constant(batch.targets), r.teacher_reps,
                          r.student_reps, alpha)[0]

    return loss


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_dataset(n_intervals: int = 33, seed: int = 0, **spec_kw):
    """Hourly synthetic 4x4 city cut to ``n_intervals`` with no test split."""
    from stsamplenet.data import STDataset
    from stsamplenet.evalbench import SyntheticCitySpec, synth_generate

    spec = SyntheticCitySpec(**{**dict(rows=4, cols=4, n_sources=2, weeks=1, test_weeks=0,
                                       seed=seed), **spec_kw})
    ds, labels = synth_generate(spec)
    cut = STDataset(ds.grid, ds.clock, 0, ds.images[:n_intervals], ds.channels, ds.poi,
                    ds.poi_categories, test_start=n_intervals)
    return cut, labels


def toy_train_config(**kw):
    from stsamplenet.training import TrainConfig

    # short spans so the three history groups fit in a few dozen intervals
    base = dict(period_span=4, trend_span=8, batch_size=8, lr=0.005, max_epochs=3, patience=5)
    base.update(kw)
    return TrainConfig(**base)


# acceptance criterion number -> PASS/FAIL line, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
