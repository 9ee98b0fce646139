"""Spatio-temporal grid forecasting with learned region pruning, on a small
numpy autodiff engine."""
from .data import HistorySpec, STDataset, load_archive, save_archive
from .evalbench import count_flops, ha_baseline, mae, rmse, synth_generate
from .model import Batch, ModelConfig, STSampleNet
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"
