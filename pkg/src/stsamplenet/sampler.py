"""Region importance scoring and Gumbel top-k region pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .encoders import init_linear, linear
from .tensorcore import Tensor

TRAINING = "training"
INFERENCE = "inference"


class OddFeatureDim(ValueError):
    pass


class InvalidK(ValueError):
    pass


class NonPositiveTemperature(ValueError):
    pass


class IndexMismatch(ValueError):
    pass


def keep_count(keep_ratio: float, n_regions: int) -> int:
    """k = round(keep_ratio * N), half-up, clamped to [1, N]."""
    return min(max(int(math.floor(keep_ratio * n_regions + 0.5)), 1), n_regions)


def init_sampler(params: dict, d: int, rng: np.random.Generator) -> None:
    init_linear(params, "sampler.proj", d, d, rng)
    init_linear(params, "sampler.score", d, 2, rng)


def sampler_param_count(d: int) -> int:
    return d * d + d + d * 2 + 2


def score_logits(z_poi: Tensor, z_time: Tensor, params: dict) -> Tensor:
    """Per-region (drop, keep) logits, shape (..., N, 2)."""
    d = z_poi.shape[-1]
    if d % 2:
        raise OddFeatureDim(f"feature dim {d} must be even to split local/global halves")
    z = tc.gelu(linear(tc.add(z_poi, z_time), params, "sampler.proj"))
    half = d // 2
    n = z.shape[-2]
    lead = (slice(None),) * (z.ndim - 1)
    local = tc.slice_(z, lead + (slice(0, half),))
    glob = tc.mean(tc.slice_(z, lead + (slice(half, d),)), axis=-2, keepdims=True)
    glob = tc.add(glob, tc.constant(np.zeros(z.shape[:-2] + (n, half))))
    return linear(tc.concat([local, glob], axis=-1), params, "sampler.score")


def score_regions(z_poi: Tensor, z_time: Tensor, params: dict) -> Tensor:
    """Keep/drop probabilities rho (..., N, 2); column 0 = drop, column 1 = keep."""
    return tc.softmax(score_logits(z_poi, z_time, params), axis=-1)


@dataclass
class SampleDecision:
    rho: Tensor                 # (..., N, 2)
    kept_indices: np.ndarray    # (..., k), ascending per row
    soft_scale: np.ndarray      # (..., N); keep probability on kept rows in training, else 1
    mode: str
    log_rho: Tensor | None = None  # log-probabilities on the tape, when available

    @property
    def k(self) -> int:
        return self.kept_indices.shape[-1]

    def mask(self) -> np.ndarray:
        """(..., N) array of {0, 1}: 1 where the region was kept."""
        n = self.rho.shape[-2]
        m = np.zeros(self.kept_indices.shape[:-1] + (n,))
        np.put_along_axis(m, self.kept_indices, 1.0, axis=-1)
        return m


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated score breaks ties toward the lower region index
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def gumbel_topk(rho: Tensor | np.ndarray, k: int, tau: float = 1.0, mode: str = TRAINING,
                rng: np.random.Generator | None = None, log_rho: Tensor | None = None) -> SampleDecision:
    rho_t = rho if isinstance(rho, Tensor) else tc.constant(rho)
    p_keep = rho_t.data[..., 1]
    n = p_keep.shape[-1]
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} outside [1, {n}]")
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    if mode == TRAINING:
        if rng is None:
            raise ValueError("training-mode sampling needs an explicit rng")
        with np.errstate(divide="ignore"):
            scores = (np.log(p_keep) + rng.gumbel(size=p_keep.shape)) / tau
        kept = _topk(scores, k)
        scale = np.ones_like(p_keep)
        np.put_along_axis(scale, kept, np.take_along_axis(p_keep, kept, axis=-1), axis=-1)
    elif mode == INFERENCE:
        kept = _topk(p_keep, k)
        scale = np.ones_like(p_keep)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SampleDecision(rho_t, kept, scale, mode, log_rho)


def apply_selection(tokens: Tensor, decision: SampleDecision) -> tuple[Tensor, Tensor | None]:
    """Gather the kept rows of ``tokens`` (..., N, d) -> (..., k, d).

    In training mode also returns the log keep probability of each kept row,
    shape (..., k).  The spatial transformer adds it to the attention score
    of that key, which scales the attention mass the row receives by its
    keep probability.  Scaling the row itself would be undone by the
    pre-norm LayerNorm and leave the scorer without a gradient.
    """
    if tokens.shape[:-1] != decision.rho.shape[:-1]:
        raise IndexMismatch(f"tokens {tokens.shape} do not match decision over {decision.rho.shape}")
    kept = tc.gather_rows(tokens, decision.kept_indices)
    if decision.mode != TRAINING:
        return kept, None
    log_rho = decision.log_rho
    if log_rho is None:
        raise ValueError("training-mode selection needs log_rho on the decision")
    lead = (slice(None),) * (log_rho.ndim - 1)
    log_keep = tc.gather_rows(tc.slice_(log_rho, lead + (slice(1, 2),)), decision.kept_indices)
    return kept, tc.reshape(log_keep, log_keep.shape[:-1])
