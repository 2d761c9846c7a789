"""Progressive sensor dropout: epoch-ramped Bernoulli masking of one
modality's channel block.

The ramp runs linearly from zero at epoch 0 to alpha_max percent at the
final epoch; a drawn mask multiplies the selected modality and leaves the
other untouched. Masked activations are not rescaled by 1/(1-p): the point
is to simulate signal loss, so the model has to cope with the reduced
magnitude rather than having it papered over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

TARGETS = ("camera", "lidar", "random")
GRANULARITIES = ("element", "modality")


class DropoutError(ValueError):
    pass


@dataclass(frozen=True)
class PsdtConfig:
    """Ramp settings: alpha_max is a percentage, epochs the ramp length."""

    alpha_max: float = 25.0
    epochs: int = 1
    target: str = "random"
    granularity: str = "modality"

    def __post_init__(self):
        if not 0.0 <= self.alpha_max <= 100.0:
            raise DropoutError(f"alpha_max must be in [0, 100], got {self.alpha_max}")
        if self.epochs < 1:
            raise DropoutError(f"epochs must be >= 1, got {self.epochs}")
        if self.target not in TARGETS:
            raise DropoutError(f"target must be one of {TARGETS}, got '{self.target}'")
        if self.granularity not in GRANULARITIES:
            raise DropoutError(
                f"granularity must be one of {GRANULARITIES}, got '{self.granularity}'"
            )


def dropout_prob(epoch: int, cfg: PsdtConfig) -> float:
    """Linear ramp (alpha_max / 100) * (epoch / epochs), clamped past the end."""
    if epoch < 0:
        raise DropoutError(f"epoch must be >= 0, got {epoch}")
    peak = cfg.alpha_max / 100.0
    if epoch >= cfg.epochs:
        return peak
    return peak * (epoch / cfg.epochs)


def modality_mask(
    shape: tuple[int, ...],
    channel_block: slice,
    p: float,
    rng: np.random.Generator,
    granularity: str = "element",
) -> Array:
    """Keep-mask for one modality's channels; ones everywhere else.

    Channels are assumed on axis 0 of `shape` (C, H, W). Element granularity
    drops cells independently; modality granularity zeroes the whole block
    with probability p, mimicking a dead sensor.
    """
    if not 0.0 <= p <= 1.0:
        raise DropoutError(f"p must be in [0, 1], got {p}")
    if granularity not in GRANULARITIES:
        raise DropoutError(f"granularity must be one of {GRANULARITIES}, got '{granularity}'")
    mask = np.ones(shape)
    block_shape = mask[channel_block].shape
    if granularity == "element":
        mask[channel_block] = (rng.random(block_shape) >= p).astype(np.float64)
    else:
        if rng.random() < p:
            mask[channel_block] = 0.0
    return mask


def mask_modality(
    features: Array,
    p: float,
    rng: np.random.Generator,
    channel_block: slice = slice(None),
    granularity: str = "element",
) -> tuple[Array, Array]:
    """Apply a fresh keep-mask to the selected channel block.

    Returns (masked features, mask); multiplying by the same mask again is a
    no-op, and channels outside the block are bit-identical to the input.
    """
    mask = modality_mask(features.shape, channel_block, p, rng, granularity)
    return features * mask, mask
