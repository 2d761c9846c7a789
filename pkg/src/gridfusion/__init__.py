"""Latent-diffusion fusion of two BEV sensor modalities on a synthetic grid."""

from gridfusion.autodiff import Tape, Tensor, backward, finite_diff_check
from gridfusion.rng import Rng

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "Rng",
]

__version__ = "0.1.0"
