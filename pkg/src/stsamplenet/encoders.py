"""Per-interval feature encoders: local (LFE), semantic (SFE) and temporal (TFE)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

Params = dict  # name -> Tensor
Buffers = dict  # name -> np.ndarray (BatchNorm running stats)


@dataclass(frozen=True)
class ResNetConfig:
    in_channels: int
    d: int = 128
    blocks: int = 3
    kernel: int = 3

    def __post_init__(self):
        if self.d % 2:
            raise ValueError("feature dim d must be even")
        if self.blocks < 1:
            raise ValueError("need at least one residual block")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same-padding")


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_linear(params: Params, name: str, fan_in: int, fan_out: int, rng, bias: bool = True):
    params[f"{name}.weight"] = tc.parameter(xavier(rng, fan_in, fan_out), f"{name}.weight")
    if bias:
        params[f"{name}.bias"] = tc.parameter(np.zeros(fan_out), f"{name}.bias")


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    y = tc.matmul(x, params[f"{name}.weight"])
    b = params.get(f"{name}.bias")
    return tc.add_bias(y, b) if b is not None else y


def _init_conv(params, name, cin, cout, k, rng, bias):
    params[f"{name}.weight"] = tc.parameter(
        he_normal(rng, (cout, cin, k, k), cin * k * k), f"{name}.weight")
    if bias:
        params[f"{name}.bias"] = tc.parameter(np.zeros(cout), f"{name}.bias")


def _init_bn(params, buffers, name, c):
    params[f"{name}.gamma"] = tc.parameter(np.ones(c), f"{name}.gamma")
    params[f"{name}.beta"] = tc.parameter(np.zeros(c), f"{name}.beta")
    buffers[f"{name}.running_mean"] = np.zeros(c)
    buffers[f"{name}.running_var"] = np.ones(c)


def _bn(x, params, buffers, name, training):
    return tc.batch_norm2d(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                           buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"],
                           training)


def init_resnet(prefix: str, cfg: ResNetConfig, rng: np.random.Generator,
                params: Params, buffers: Buffers) -> None:
    # convs feeding BatchNorm carry no bias: BN would cancel it
    d, k = cfg.d, cfg.kernel
    _init_conv(params, f"{prefix}.stem", cfg.in_channels, d, k, rng, bias=False)
    _init_bn(params, buffers, f"{prefix}.stem.bn", d)
    for i in range(cfg.blocks):
        for j in (1, 2):
            _init_conv(params, f"{prefix}.block{i}.conv{j}", d, d, k, rng, bias=False)
            _init_bn(params, buffers, f"{prefix}.block{i}.bn{j}", d)
    _init_conv(params, f"{prefix}.merge", d, d, 1, rng, bias=True)


def resnet_forward(x: Tensor, params: Params, buffers: Buffers, prefix: str,
                   cfg: ResNetConfig, training: bool) -> Tensor:
    """(n, C, H, W) image batch -> (n, N, d) region features, N = H*W."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise tc.ShapeMismatch(
            f"{prefix}: expected (n, {cfg.in_channels}, H, W) input, got {x.shape}")
    n, _, h, w = x.shape
    y = tc.conv2d(x, params[f"{prefix}.stem.weight"])
    y = tc.gelu(_bn(y, params, buffers, f"{prefix}.stem.bn", training))
    for i in range(cfg.blocks):
        b = f"{prefix}.block{i}"
        z = tc.conv2d(y, params[f"{b}.conv1.weight"])
        z = tc.gelu(_bn(z, params, buffers, f"{b}.bn1", training))
        z = tc.conv2d(z, params[f"{b}.conv2.weight"])
        z = _bn(z, params, buffers, f"{b}.bn2", training)
        y = tc.gelu(tc.add(y, z))
    y = tc.conv2d(y, params[f"{prefix}.merge.weight"], params[f"{prefix}.merge.bias"])
    y = tc.reshape(y, (n, cfg.d, h * w))
    return tc.transpose(y, (0, 2, 1))


def lfe_forward(image: Tensor, params: Params, buffers: Buffers, cfg: ResNetConfig,
                training: bool = False) -> Tensor:
    """Local features Z^L from normalised (n, M, H, W) measurement images."""
    return resnet_forward(image, params, buffers, "lfe", cfg, training)


def sfe_forward(poi_image: Tensor, params: Params, buffers: Buffers, cfg: ResNetConfig,
                training: bool = False) -> Tensor:
    """Semantic features Z^poi from a normalised (P, H, W) or (1, P, H, W) POI image."""
    if poi_image.ndim == 3:
        poi_image = tc.reshape(poi_image, (1,) + poi_image.shape)
    return resnet_forward(poi_image, params, buffers, "sfe", cfg, training)


def init_tfe(params: Params, d: int, rng, in_dim: int = 10) -> None:
    init_linear(params, "tfe.fc1", in_dim, d, rng)
    init_linear(params, "tfe.fc2", d, d, rng)


def tfe_vector(time_features: Tensor, params: Params) -> Tensor:
    """(..., 10) calendar features -> (..., d) embedding (before region broadcast)."""
    if time_features.shape[-1] != params["tfe.fc1.weight"].shape[0]:
        raise tc.ShapeMismatch(f"tfe: expected last dim 10, got {time_features.shape}")
    single = time_features.ndim == 1
    if single:
        time_features = tc.reshape(time_features, (1,) + time_features.shape)
    h = tc.gelu(linear(time_features, params, "tfe.fc1"))
    out = linear(h, params, "tfe.fc2")
    return tc.reshape(out, out.shape[1:]) if single else out


def tfe_forward(time_features: Tensor, params: Params, n_regions: int) -> Tensor:
    """Z^time: the TFE vector replicated over all N regions, shape (..., N, d)."""
    v = tfe_vector(time_features, params)
    lead = v.shape[:-1]
    v = tc.reshape(v, lead + (1, v.shape[-1]))
    return tc.add(v, tc.constant(np.zeros(lead + (n_regions, v.shape[-1]))))
