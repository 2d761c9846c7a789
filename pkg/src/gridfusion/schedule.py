"""Variance schedule and closed-form quantities of the forward noising chain.

The table `alpha_bar` holds T + 1 entries with `alpha_bar[0] == 1`, so index
t == 0 means "clean". Reverse-time samplers address noise levels through
`step_alpha_bar`, which shifts their step index by one: step T - 1 is the
fully noised level `alpha_bar[T]` and the sentinel step -1 is the clean
state `alpha_bar[0]`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gridfusion.autodiff import Tensor, add, scalar_mul

Array = np.ndarray


class ScheduleError(ValueError):
    """Invalid schedule construction or out-of-range time index."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta, alpha = 1 - beta, and cumulative alpha_bar."""

    timesteps: int
    beta: Array
    alpha: Array
    alpha_bar: Array

    def __post_init__(self):
        t = self.timesteps
        if t < 1:
            raise ScheduleError(f"timesteps must be >= 1, got {t}")
        if self.beta.shape != (t,) or self.alpha.shape != (t,) or self.alpha_bar.shape != (t + 1,):
            raise ScheduleError("schedule table lengths inconsistent with timesteps")
        if not (np.all(self.beta > 0.0) and np.all(self.beta < 1.0)):
            raise ScheduleError("beta values must lie in (0, 1)")
        if self.alpha_bar[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if not (np.all(self.alpha_bar > 0.0) and np.all(np.isfinite(self.alpha_bar))):
            raise ScheduleError("alpha_bar must stay finite and positive")

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at diffusion time t in [0, T]."""
        if not 0 <= t <= self.timesteps:
            raise ScheduleError(f"t={t} outside [0, {self.timesteps}]")
        return float(self.alpha_bar[t])

    def step_alpha_bar(self, step: int) -> float:
        """Noise level for a sampler step index in [-1, T - 1]."""
        if not -1 <= step <= self.timesteps - 1:
            raise ScheduleError(f"sampler step {step} outside [-1, {self.timesteps - 1}]")
        return float(self.alpha_bar[step + 1])


def make_schedule(
    timesteps: int,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a schedule with T steps.

    linear: beta evenly spaced over [beta_start, beta_end].
    cosine: squared-cosine alpha_bar profile, betas clipped to 0.999;
            beta_start / beta_end are ignored for this kind.
    """
    if timesteps < 1:
        raise ScheduleError(f"timesteps must be >= 1, got {timesteps}")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )
        beta = np.linspace(beta_start, beta_end, timesteps)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(timesteps + 1) / timesteps
        profile = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
        profile = profile / profile[0]
        beta = 1.0 - profile[1:] / profile[:-1]
        beta = np.clip(beta, 1e-8, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind '{kind}'")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate(([1.0], np.cumprod(alpha)))
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(x0, t: int, eps, schedule: NoiseSchedule):
    """Noise a clean sample directly to time t.

    Returns sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps. Accepts
    either numpy arrays or tape tensors; with tensors the result stays
    differentiable through both x0 and eps.
    """
    is_tensor = isinstance(x0, Tensor)
    shape0 = x0.shape if is_tensor else np.shape(x0)
    shape_eps = eps.shape if isinstance(eps, Tensor) else np.shape(eps)
    if shape0 != shape_eps:
        raise ScheduleError(f"eps shape {shape_eps} != x0 shape {shape0}")
    ab = schedule.alpha_bar_at(t)
    if t == 0:
        return x0 if is_tensor else np.array(x0, copy=True)
    c0 = math.sqrt(ab)
    ce = math.sqrt(1.0 - ab)
    if is_tensor:
        return add(scalar_mul(x0, c0), scalar_mul(eps, ce))
    return c0 * np.asarray(x0) + ce * np.asarray(eps)


def posterior_mean_var(x0: Array, xt: Array, t: int, schedule: NoiseSchedule) -> tuple[Array, float]:
    """Mean and variance of the Gaussian posterior over x_{t-1} given (x0, x_t).

    mean = sqrt(ab_{t-1}) beta_t / (1 - ab_t) * x0
         + sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t) * x_t
    var  = (1 - ab_{t-1}) / (1 - ab_t) * beta_t
    """
    if not 1 <= t <= schedule.timesteps:
        raise ScheduleError(f"posterior needs 1 <= t <= T, got t={t}")
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if x0.shape != xt.shape:
        raise ScheduleError(f"x0 shape {x0.shape} != xt shape {xt.shape}")
    if t == 1:
        # ab_0 == 1 collapses the coefficients to (1, 0) and the variance to 0;
        # evaluated in floats the x0 coefficient would miss exactness by an ulp.
        return np.array(x0, copy=True), 0.0
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    beta_t = schedule.beta[t - 1]
    alpha_t = schedule.alpha[t - 1]
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    return c0 * x0 + ct * xt, float(var)
