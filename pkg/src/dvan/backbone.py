"""Small convolutional feature extractor shared across all time steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .tensor import Tensor, conv2d, max_pool2d, uniform_init


@dataclass(frozen=True)
class BackboneConfig:
    """Blocks are ``(out_channels, kernel, stride, pooling)``.

    Each block is conv (padding ``kernel // 2``) + bias + ReLU, followed by a
    2x2 max-pool when ``pooling`` is set. Pixels in [0, 1] are shifted by
    ``-input_shift`` before the first block.
    """

    input_size: int = 64
    blocks: tuple = ((16, 3, 1, True), (32, 3, 1, True), (64, 3, 1, True))
    in_channels: int = 3
    input_shift: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            (int(c), int(k), int(s), bool(p)) for c, k, s, p in self.blocks))
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        side = self.input_size
        for out_c, k, s, pool in self.blocks:
            if out_c < 1 or k < 1 or s < 1:
                raise ConfigError(f"bad backbone block {(out_c, k, s, pool)}")
            side = (side + 2 * (k // 2) - k) // s + 1
            if pool:
                side //= 2
            if side < 1:
                raise ConfigError(f"input {self.input_size}px collapses to nothing in the backbone")

    @property
    def feature_side(self) -> int:
        side = self.input_size
        for _, k, s, pool in self.blocks:
            side = (side + 2 * (k // 2) - k) // s + 1
            if pool:
                side //= 2
        return side

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][0]

    @classmethod
    def from_channels(cls, input_size: int, channels, in_channels: int = 3,
                      input_shift: float = 0.5) -> "BackboneConfig":
        return cls(input_size, tuple((c, 3, 1, True) for c in channels), in_channels, input_shift)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    params = {}
    cin = cfg.in_channels
    for i, (cout, k, _, _) in enumerate(cfg.blocks):
        fan_in = cin * k * k
        params[f"backbone/{i}/kernel"] = uniform_init((cout, cin, k, k), fan_in, rng, dtype)
        params[f"backbone/{i}/bias"] = uniform_init((cout,), fan_in, rng, dtype)
        cin = cout
    return params


def extract(pixels, params: dict, cfg: BackboneConfig) -> Tensor:
    """Feature map ``(D, K, K)`` for one canvas, or ``(N, D, K, K)`` for a stack."""
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels))
    if x.shape[-1] != cfg.input_size or x.shape[-2] != cfg.input_size:
        raise InputError(f"canvas is {x.shape[-2]}x{x.shape[-1]}, backbone expects {cfg.input_size}")
    if x.shape[-3] != cfg.in_channels:
        raise InputError(f"canvas has {x.shape[-3]} channels, backbone expects {cfg.in_channels}")
    if cfg.input_shift:
        x = x - cfg.input_shift
    for i, (_, k, s, pool) in enumerate(cfg.blocks):
        w = params[f"backbone/{i}/kernel"]
        b = params[f"backbone/{i}/bias"]
        x = (conv2d(x, w, stride=s, pad=k // 2) + b.reshape(-1, 1, 1)).relu()
        if pool:
            x = max_pool2d(x, 2)
    return x


def extract_sequence(canvases, params: dict, cfg: BackboneConfig) -> list:
    """One feature map per canvas, all through the same parameters."""
    pixels = np.stack([np.asarray(getattr(c, "pixels", c)) for c in canvases])
    maps = extract(pixels, params, cfg)
    return [maps[t] for t in range(len(canvases))]


def to_locations(feature_map: Tensor) -> Tensor:
    """``(..., D, K, K)`` to location-major ``(..., K*K, D)``; cell ``i*K + j``."""
    *lead, d, k, k2 = feature_map.shape
    flat = feature_map.reshape(*lead, d, k * k2)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return flat.transpose(axes)
