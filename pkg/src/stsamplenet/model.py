"""The full network: encoders, token fusion, region sampler, spatial and
temporal transformers, and the tanh predictor."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensorcore as tc
from .encoders import (ResNetConfig, init_linear, init_resnet, init_tfe, lfe_forward, linear,
                       sfe_forward, tfe_vector)
from .sampler import (INFERENCE, TRAINING, SampleDecision, apply_selection, gumbel_topk,
                      init_sampler, keep_count, score_logits)
from .scpe import ScpeTable
from .tensorcore import Tensor


@dataclass
class ModelConfig:
    rows: int = 20
    cols: int = 20
    channels: int = 3           # M
    poi_channels: int = 10      # P
    d: int = 128
    blocks: int = 3             # residual blocks m
    kernel: int = 3
    levels: int = 3
    branching: int = 4
    heads: int = 8
    spatial_layers: int = 2
    temporal_layers: int = 2
    ffn_mult: int = 4
    keep_ratio: float = 1.0
    gumbel_tau: float = 1.0
    closeness: int = 4
    period: int = 3
    trend: int = 2
    pooling: str = "readout"    # or "mean"

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2:
            raise ValueError("d must be even")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if self.pooling not in ("readout", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.n_intervals < 1:
            raise ValueError("need at least one input interval")

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    @property
    def n_intervals(self) -> int:
        return self.closeness + self.period + self.trend

    @property
    def k(self) -> int:
        return keep_count(self.keep_ratio, self.n_regions)

    @property
    def uses_sampler(self) -> bool:
        return self.keep_ratio < 1.0

    def lfe_config(self) -> ResNetConfig:
        return ResNetConfig(self.channels, self.d, self.blocks, self.kernel)

    def sfe_config(self) -> ResNetConfig:
        return ResNetConfig(self.poi_channels, self.d, self.blocks, self.kernel)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Batch:
    images: np.ndarray        # (B, T, M, H, W), normalised
    time_features: np.ndarray  # (B, T, 10)
    poi: np.ndarray           # (P, H, W), normalised
    targets: np.ndarray | None = None  # (B, M, H, W), normalised


@dataclass
class ForwardResult:
    prediction: Tensor                  # (B, M, H, W) in (-1, 1)
    student_reps: Tensor                # (B, T, d)
    teacher_reps: Tensor | None         # (B, T, d), no tape
    decision: SampleDecision | None     # over (B*T, N)
    attention: list = field(default_factory=list)  # spatial, per layer (B*T, h, L, L)


# ---------------------------------------------------------------- transformer

def init_encoder_layer(params: dict, name: str, d: int, ffn_mult: int, rng) -> None:
    for ln in ("ln1", "ln2"):
        params[f"{name}.{ln}.gamma"] = tc.parameter(np.ones(d), f"{name}.{ln}.gamma")
        params[f"{name}.{ln}.beta"] = tc.parameter(np.zeros(d), f"{name}.{ln}.beta")
    init_linear(params, f"{name}.attn.q", d, d, rng)
    # a key bias shifts every score of a query equally, so softmax ignores it
    init_linear(params, f"{name}.attn.k", d, d, rng, bias=False)
    init_linear(params, f"{name}.attn.v", d, d, rng)
    init_linear(params, f"{name}.attn.o", d, d, rng)
    init_linear(params, f"{name}.ffn.fc1", d, ffn_mult * d, rng)
    init_linear(params, f"{name}.ffn.fc2", ffn_mult * d, d, rng)


def _ln(x, params, name):
    return tc.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"])


def encoder_layer(x: Tensor, params: dict, name: str, heads: int, capture: list | None = None,
                  key_bias: Tensor | None = None) -> Tensor:
    """Pre-norm self-attention + GELU FFN block on (n, L, d).

    ``key_bias`` (n, L) is added to every query's score for each key.
    """
    n, length, d = x.shape
    dh = d // heads
    h = _ln(x, params, f"{name}.ln1")

    def split(t):
        return tc.transpose(tc.reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q = split(linear(h, params, f"{name}.attn.q"))
    k = split(linear(h, params, f"{name}.attn.k"))
    v = split(linear(h, params, f"{name}.attn.v"))
    scores = tc.scalar_mul(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(dh))
    if key_bias is not None:
        scores = tc.add(scores, tc.reshape(key_bias, (n, 1, 1, length)))
    attn = tc.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(attn.data.copy())
    mixed = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)), (n, length, d))
    x = tc.add(x, linear(mixed, params, f"{name}.attn.o"))
    h = _ln(x, params, f"{name}.ln2")
    h = linear(tc.gelu(linear(h, params, f"{name}.ffn.fc1")), params, f"{name}.ffn.fc2")
    return tc.add(x, h)


def _prepend(x: Tensor, token: Tensor) -> Tensor:
    n, _, d = x.shape
    tok = tc.add(tc.reshape(token, (1, 1, d)), tc.constant(np.zeros((n, 1, d))))
    return tc.concat([tok, x], axis=1)


class STSampleNet:
    """Parameters, BatchNorm buffers and the forward pass of the network."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.scpe = ScpeTable.create(config.rows, config.cols, config.d, config.levels,
                                     config.branching)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        c, p = self.config, self.params
        init_resnet("lfe", c.lfe_config(), rng, p, self.buffers)
        init_resnet("sfe", c.sfe_config(), rng, p, self.buffers)
        init_tfe(p, c.d, rng)
        self.scpe.init_params(p, rng)
        if c.uses_sampler:
            init_sampler(p, c.d, rng)
        for prefix, layers in (("gfe", c.spatial_layers), ("temporal", c.temporal_layers)):
            for i in range(layers):
                init_encoder_layer(p, f"{prefix}.layer{i}", c.d, c.ffn_mult, rng)
            p[f"{prefix}.norm.gamma"] = tc.parameter(np.ones(c.d), f"{prefix}.norm.gamma")
            p[f"{prefix}.norm.beta"] = tc.parameter(np.zeros(c.d), f"{prefix}.norm.beta")
        if c.pooling == "readout":
            for name in ("readout.spatial", "readout.temporal"):
                # unit scale: the token is LayerNorm-ed first, tiny norms make that ill-conditioned
                p[name] = tc.parameter(rng.normal(0.0, 1.0, size=c.d), name)
        init_linear(p, "predictor", c.d, c.channels * c.rows * c.cols, rng)

    # ------------------------------------------------------------ pieces

    def param_count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def fuse_tokens(self, z_local: Tensor, z_poi: Tensor, z_time: Tensor, pos: Tensor) -> Tensor:
        for t in (z_poi, z_time, pos):
            # a region axis of 1 broadcasts (time features are shared by all regions)
            if t.shape[-1] != z_local.shape[-1] or t.shape[-2] not in (1, z_local.shape[-2]):
                raise tc.ShapeMismatch(f"fuse_tokens: {t.shape} vs {z_local.shape}")
        return tc.add(tc.add(tc.add(z_local, z_poi), z_time), pos)

    def _transformer(self, x: Tensor, prefix: str, layers: int, readout: str,
                     capture: list | None, key_bias: Tensor | None = None) -> Tensor:
        c = self.config
        if x.ndim != 3 or x.shape[-1] != c.d:
            raise tc.ShapeMismatch(f"{prefix}: expected (n, L, {c.d}), got {x.shape}")
        if c.pooling == "readout":
            x = _prepend(x, self.params[readout])
            if key_bias is not None:
                key_bias = tc.concat([tc.constant(np.zeros((x.shape[0], 1))), key_bias], axis=1)
        for i in range(layers):
            x = encoder_layer(x, self.params, f"{prefix}.layer{i}", c.heads, capture, key_bias)
        x = _ln(x, self.params, f"{prefix}.norm")
        if c.pooling == "readout":
            return tc.reshape(tc.slice_(x, (slice(None), slice(0, 1))), (x.shape[0], c.d))
        return tc.mean(x, axis=1)

    def spatial_forward(self, kept_tokens: Tensor, capture: list | None = None,
                        key_bias: Tensor | None = None) -> Tensor:
        """(n, k, d) region tokens -> (n, d) spatial representation Z^S.

        ``key_bias`` (n, k) holds log attention weights for the region keys.
        """
        squeeze = kept_tokens.ndim == 2
        if squeeze:
            kept_tokens = tc.reshape(kept_tokens, (1,) + kept_tokens.shape)
            if key_bias is not None:
                key_bias = tc.reshape(key_bias, (1,) + key_bias.shape)
        out = self._transformer(kept_tokens, "gfe", self.config.spatial_layers,
                                "readout.spatial", capture, key_bias)
        return tc.reshape(out, (self.config.d,)) if squeeze else out

    def temporal_forward(self, spatial_reps: Tensor, time_vecs: Tensor) -> Tensor:
        """(B, T, d) spatial reps + (B, T, d) TFE vectors -> (B, d) Z^ST."""
        squeeze = spatial_reps.ndim == 2
        x = tc.add(spatial_reps, time_vecs)
        if squeeze:
            x = tc.reshape(x, (1,) + x.shape)
        out = self._transformer(x, "temporal", self.config.temporal_layers,
                                "readout.temporal", None)
        return tc.reshape(out, (self.config.d,)) if squeeze else out

    def predict(self, z_st: Tensor) -> Tensor:
        c = self.config
        y = tc.tanh(linear(z_st, self.params, "predictor"))
        return tc.reshape(y, z_st.shape[:-1] + (c.channels, c.rows, c.cols))

    # ------------------------------------------------------------ full pass

    def full_forward(self, batch: Batch, mode: str = INFERENCE, rng: np.random.Generator | None = None,
                     bn_training: bool | None = None, capture_attention: bool = False,
                     teacher_override: np.ndarray | None = None) -> ForwardResult:
        """Run every interval of every sample through the network.

        ``teacher_override`` supplies fixed teacher representations instead
        of recomputing them (used by gradient checks).
        """
        c = self.config
        if bn_training is None:
            bn_training = mode == TRAINING
        b, t = batch.images.shape[:2]
        n = c.n_regions
        imgs = tc.constant(batch.images.reshape((b * t,) + batch.images.shape[2:]))
        z_local = lfe_forward(imgs, self.params, self.buffers, c.lfe_config(), bn_training)
        z_poi = sfe_forward(tc.constant(batch.poi), self.params, self.buffers, c.sfe_config(),
                            bn_training)
        tvec = tfe_vector(tc.constant(batch.time_features.reshape(b * t, -1)), self.params)
        z_time = tc.reshape(tvec, (b * t, 1, c.d))
        pos = self.scpe.embed(self.params)
        tokens = self.fuse_tokens(z_local, z_poi, z_time, pos)

        capture = [] if capture_attention else None
        decision = None
        teacher = None
        if c.uses_sampler:
            logits = score_logits(z_poi, z_time, self.params)
            rho = tc.softmax(logits, axis=-1)
            log_rho = tc.log_softmax(logits, axis=-1) if mode == TRAINING else None
            decision = gumbel_topk(rho, c.k, c.gumbel_tau, mode, rng, log_rho)
            kept, key_bias = apply_selection(tokens, decision)
            student = self.spatial_forward(kept, capture, key_bias)
            if mode == TRAINING:
                if teacher_override is not None:
                    teacher = tc.constant(teacher_override)
                else:
                    with tc.no_grad():
                        full = self.spatial_forward(tokens.detach())
                    teacher = tc.constant(full.data.reshape(b, t, c.d))
        else:
            student = self.spatial_forward(tokens, capture)
        student = tc.reshape(student, (b, t, c.d))
        z_st = self.temporal_forward(student, tc.reshape(tvec, (b, t, c.d)))
        pred = self.predict(z_st)
        return ForwardResult(pred, student, teacher, decision, capture or [])

    def infer(self, batch: Batch, capture_attention: bool = False) -> ForwardResult:
        with tc.no_grad():
            return self.full_forward(batch, INFERENCE, capture_attention=capture_attention)

    def config_dict(self) -> dict:
        return asdict(self.config)
