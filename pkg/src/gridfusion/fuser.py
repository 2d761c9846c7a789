"""Three-scale bidirectional feature-pyramid fusion with gated conditioning.

A shared strided-conv pyramid maps both the noisy latent and the masked
condition to scales at strides 1, 2 and 4. Encoder outputs are the noisy
pyramid modulated by the condition pyramid. Decoding runs one top-down
fusion into the middle scale, then a bottom-up pass, each node blending its
inputs with fast normalized weights:

    fuse(x_1..x_k) = Conv(swish(sum_i w_i x_i / (sum_i w_i + eps)))

Weights stay non-negative through a softplus reparameterization of the raw
learnables. The output is the channel concatenation of the three decoded
scales resized to full resolution, which doubles as the clean-latent
prediction, so `3 * channels` must equal the latent channel count when the
fuser drives the diffusion loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from gridfusion import autodiff as ad
from gridfusion.autodiff import Tensor, fan_in_uniform
from gridfusion.modulation import GsmConfig, gated_modulate, init_modulation_params

Array = np.ndarray

_RAW_UNIT_WEIGHT = float(np.log(np.expm1(1.0)))  # softplus(raw) == 1


@dataclass(frozen=True)
class FuserConfig:
    in_channels: int
    channels: int
    epsilon: float = 1e-4
    scales: int = 3
    modulation: GsmConfig = field(default_factory=GsmConfig)

    def __post_init__(self):
        if self.scales != 3:
            raise ValueError(f"the fuser is fixed at 3 scales, got {self.scales}")
        if self.in_channels < 1 or self.channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    @property
    def out_channels(self) -> int:
        return 3 * self.channels


def _conv_block(gen, out_ch, in_ch, prefix):
    fan = in_ch * 9
    return {
        f"{prefix}.w": fan_in_uniform(gen, (out_ch, in_ch, 3, 3), fan),
        f"{prefix}.b": fan_in_uniform(gen, (out_ch,), fan),
    }


def init_fuser_params(gen: np.random.Generator, cfg: FuserConfig) -> dict[str, Array]:
    c = cfg.channels
    params: dict[str, Array] = {}
    params.update(_conv_block(gen, c, cfg.in_channels, "fuser.pyr1"))
    params.update(_conv_block(gen, c, c, "fuser.pyr2"))
    params.update(_conv_block(gen, c, c, "fuser.pyr3"))
    for i in (1, 2, 3):
        params.update(init_modulation_params(gen, c, cfg.modulation.time_dim, f"fuser.enc{i}"))
    for node, n_inputs in (("td2", 2), ("out1", 2), ("out2", 3), ("out3", 2)):
        params[f"fuser.{node}.weights"] = np.full(n_inputs, _RAW_UNIT_WEIGHT)
        params.update(_conv_block(gen, c, c, f"fuser.{node}"))
    return params


def build_pyramid(params: Mapping[str, Tensor], x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Scales at strides 1, 2, 4; spatial dims must be divisible by 4."""
    _, _, h, w = x.shape
    if h % 4 or w % 4:
        raise ad.AutodiffError(f"pyramid input dims must be divisible by 4, got {h}x{w}")
    f1 = ad.conv2d(x, params["fuser.pyr1.w"], params["fuser.pyr1.b"], stride=1, padding=1)
    f2 = ad.conv2d(f1, params["fuser.pyr2.w"], params["fuser.pyr2.b"], stride=2, padding=1)
    f3 = ad.conv2d(f2, params["fuser.pyr3.w"], params["fuser.pyr3.b"], stride=2, padding=1)
    return f1, f2, f3


def fuse_weighted(
    params: Mapping[str, Tensor],
    node: str,
    inputs: list[Tensor],
    epsilon: float,
) -> Tensor:
    """Normalized weighted blend, swish, then a 3x3 conv."""
    raw = params[f"fuser.{node}.weights"]
    if raw.shape != (len(inputs),):
        raise ad.AutodiffError(
            f"node {node} has {raw.shape[0]} weights for {len(inputs)} inputs"
        )
    for t in inputs[1:]:
        if t.shape != inputs[0].shape:
            raise ad.AutodiffError(
                f"fuse inputs disagree: {t.shape} vs {inputs[0].shape}"
            )
    w = ad.softplus(raw)
    total = None
    for i, x in enumerate(inputs):
        term = ad.mul(ad.take(w, [i]), x)
        total = term if total is None else ad.add(total, term)
    denom = ad.add(ad.tsum(w), inputs[0].tape.constant(epsilon))
    blended = ad.div(total, denom)
    return ad.conv2d(
        ad.swish(blended), params[f"fuser.{node}.w"], params[f"fuser.{node}.b"],
        stride=1, padding=1,
    )


def fuser_forward(
    params: Mapping[str, Tensor],
    x_t: Tensor,
    cond: Tensor,
    t: int,
    cfg: FuserConfig,
) -> Tensor:
    """Denoise x_t under the masked condition; returns a 3C-channel map at
    the input resolution."""
    if x_t.shape != cond.shape:
        raise ad.AutodiffError(f"x_t shape {x_t.shape} != cond shape {cond.shape}")
    if x_t.shape[1] != cfg.in_channels:
        raise ad.AutodiffError(
            f"expected {cfg.in_channels} input channels, got {x_t.shape[1]}"
        )
    noisy = build_pyramid(params, x_t)
    guide = build_pyramid(params, cond)
    enc = tuple(
        gated_modulate(params, f"fuser.enc{i + 1}", noisy[i], guide[i], t, cfg.modulation)
        for i in range(3)
    )
    sizes = [e.shape[2:] for e in enc]

    def resize(x: Tensor, hw) -> Tensor:
        return ad.bilinear_resize(x, hw[0], hw[1])

    td2 = fuse_weighted(params, "td2", [enc[1], resize(enc[2], sizes[1])], cfg.epsilon)
    out1 = fuse_weighted(params, "out1", [enc[0], resize(td2, sizes[0])], cfg.epsilon)
    out2 = fuse_weighted(params, "out2", [enc[1], td2, resize(out1, sizes[1])], cfg.epsilon)
    out3 = fuse_weighted(params, "out3", [enc[2], resize(out2, sizes[2])], cfg.epsilon)
    return ad.concat([out1, resize(out2, sizes[0]), resize(out3, sizes[0])], axis=1)
