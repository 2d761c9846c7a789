"""Gated feature modulation conditioned on masked clean features and time.

The condition (already sensor-masked) gets a projected sinusoidal time
embedding added, then three 3x3 convolutions derive a sigmoid gate, a
scale, and a shift that reshape the noisy input:

    out = gate * (x * (1 + scale) + shift)

Each of the three branches can be disabled for ablations; with all three
off the block is the identity on the noisy input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from gridfusion import autodiff as ad
from gridfusion.autodiff import Tensor, fan_in_uniform

Array = np.ndarray


@dataclass(frozen=True)
class GsmConfig:
    scale: bool = True
    shift: bool = True
    gate: bool = True
    time_dim: int = 32

    def __post_init__(self):
        if self.time_dim < 2 or self.time_dim % 2 != 0:
            raise ValueError(f"time_dim must be even and >= 2, got {self.time_dim}")


def time_embedding(t: int, dim: int) -> Array:
    """Interleaved sin/cos of t at geometrically spaced frequencies."""
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    k = np.arange(dim // 2)
    freqs = 10000.0 ** (-2.0 * k / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


def init_modulation_params(
    gen: np.random.Generator, channels: int, time_dim: int, prefix: str
) -> dict[str, Array]:
    """Parameter block for one modulation unit; names share `prefix`."""
    fan_conv = channels * 9
    params = {}
    for branch in ("gamma", "alpha", "beta"):
        params[f"{prefix}.{branch}.w"] = fan_in_uniform(gen, (channels, channels, 3, 3), fan_conv)
        params[f"{prefix}.{branch}.b"] = fan_in_uniform(gen, (channels,), fan_conv)
    params[f"{prefix}.time.w"] = fan_in_uniform(gen, (channels, time_dim), time_dim)
    params[f"{prefix}.time.b"] = fan_in_uniform(gen, (channels,), time_dim)
    return params


def gated_modulate(
    params: Mapping[str, Tensor],
    prefix: str,
    x_t: Tensor,
    cond: Tensor,
    t: int,
    cfg: GsmConfig,
) -> Tensor:
    """Modulate noisy features x_t by the conditioned branches of `cfg`."""
    if x_t.shape != cond.shape:
        raise ad.AutodiffError(
            f"modulation shape mismatch: x_t {x_t.shape} vs cond {cond.shape}"
        )
    if not (cfg.scale or cfg.shift or cfg.gate):
        return x_t
    tape = x_t.tape
    channels = x_t.shape[1]
    emb = tape.constant(time_embedding(t, cfg.time_dim))
    proj = ad.linear(emb, params[f"{prefix}.time.w"], params[f"{prefix}.time.b"])
    conditioned = ad.add(cond, ad.reshape(proj, (1, channels, 1, 1)))

    def branch(name: str) -> Tensor:
        return ad.conv2d(
            conditioned, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"],
            stride=1, padding=1,
        )

    out = x_t
    if cfg.scale:
        out = ad.mul(x_t, ad.add(branch("alpha"), tape.constant(1.0)))
    if cfg.shift:
        out = ad.add(out, branch("beta"))
    if cfg.gate:
        out = ad.mul(ad.sigmoid(branch("gamma")), out)
    return out
