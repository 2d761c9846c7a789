"""Few-step reverse-process solvers under the clean-sample parameterization.

All three solvers consume a predictor that maps a noisy state to an estimate
of the clean sample. Step indices run over [-1, T - 1]; index -1 is the
clean state (see schedule.step_alpha_bar). The final jump to -1 is always
first order: at that endpoint the noise scale is exactly zero and the
higher-order log-SNR coefficients are not finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from gridfusion.schedule import NoiseSchedule

Array = np.ndarray

SAMPLER_KINDS = ("ddim", "dpmpp", "deis")


class SamplerError(ValueError):
    """Invalid step pair, schedule request, or non-finite prediction."""


@dataclass(frozen=True)
class SamplerKind:
    """Solver selection; eta adds stochasticity and is honored by ddim only."""

    kind: str
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise SamplerError(f"unknown sampler '{self.kind}', expected one of {SAMPLER_KINDS}")
        if self.eta < 0.0:
            raise SamplerError(f"eta must be >= 0, got {self.eta}")


@dataclass(frozen=True)
class StepSchedule:
    """Strictly decreasing (t_now, t_next) pairs ending at the clean state."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.pairs:
            raise SamplerError("empty step schedule")
        for t_now, t_next in self.pairs:
            if t_next >= t_now:
                raise SamplerError(f"non-decreasing step pair ({t_now}, {t_next})")
        for (_, a), (b, _) in zip(self.pairs[:-1], self.pairs[1:]):
            if a != b:
                raise SamplerError("step pairs are not contiguous")
        if self.pairs[-1][1] != -1:
            raise SamplerError("step schedule must terminate at -1")

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


def make_step_schedule(timesteps: int, steps: int) -> StepSchedule:
    """Evenly spaced integer times from T - 1 down to the -1 sentinel."""
    if steps < 1:
        raise SamplerError(f"steps must be >= 1, got {steps}")
    if steps > timesteps:
        raise SamplerError(f"steps={steps} exceeds schedule length T={timesteps}")
    times = [int(round(v)) for v in np.linspace(-1.0, timesteps - 1.0, steps + 1)][::-1]
    return StepSchedule(pairs=tuple(zip(times[:-1], times[1:])))


def _levels(schedule: NoiseSchedule, t_now: int, t_next: int) -> tuple[float, float]:
    if t_next >= t_now:
        raise SamplerError(f"t_next={t_next} must precede t_now={t_now}")
    ab_now = schedule.step_alpha_bar(t_now)
    ab_next = schedule.step_alpha_bar(t_next)
    if ab_now >= 1.0:
        raise SamplerError("t_now maps to the clean state; nothing to denoise")
    return ab_now, ab_next


def _first_order_step(xt: Array, x0_hat: Array, ab_now: float, ab_next: float) -> Array:
    eps_hat = (xt - math.sqrt(ab_now) * x0_hat) / math.sqrt(1.0 - ab_now)
    return math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat


def ddim_step(
    xt: Array,
    x0_hat: Array,
    t_now: int,
    t_next: int,
    eta: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> Array:
    """One first-order jump; eta > 0 re-injects part of the implied noise."""
    if xt.shape != x0_hat.shape:
        raise SamplerError(f"x0_hat shape {x0_hat.shape} != xt shape {xt.shape}")
    ab_now, ab_next = _levels(schedule, t_now, t_next)
    if eta == 0.0:
        return _first_order_step(xt, x0_hat, ab_now, ab_next)
    eps_hat = (xt - math.sqrt(ab_now) * x0_hat) / math.sqrt(1.0 - ab_now)
    sigma = (
        eta
        * math.sqrt((1.0 - ab_next) / (1.0 - ab_now))
        * math.sqrt(max(1.0 - ab_now / ab_next, 0.0))
    )
    out = (
        math.sqrt(ab_next) * x0_hat
        + math.sqrt(max(1.0 - ab_next - sigma * sigma, 0.0)) * eps_hat
    )
    if sigma > 0.0:
        if rng is None:
            raise SamplerError("stochastic ddim step needs an rng")
        out = out + sigma * rng.standard_normal(xt.shape)
    return out


def _log_snr(ab: float) -> float:
    return 0.5 * (math.log(ab) - math.log1p(-ab))


def dpmpp_2m_step(
    xt: Array,
    x0_hat: Array,
    x0_hat_prev: Array | None,
    t_now: int,
    t_prev: int | None,
    t_next: int,
    schedule: NoiseSchedule,
) -> Array:
    """Second-order multistep update in log-SNR space (data prediction form).

    With no history the update reduces to the first-order jump. The previous
    clean-sample estimate extrapolates the prediction to the midpoint of the
    current interval.
    """
    if xt.shape != x0_hat.shape:
        raise SamplerError(f"x0_hat shape {x0_hat.shape} != xt shape {xt.shape}")
    ab_now, ab_next = _levels(schedule, t_now, t_next)
    if x0_hat_prev is None or t_prev is None or ab_next >= 1.0:
        return _first_order_step(xt, x0_hat, ab_now, ab_next)
    if t_prev <= t_now:
        raise SamplerError(f"history time t_prev={t_prev} must exceed t_now={t_now}")
    ab_prev = schedule.step_alpha_bar(t_prev)
    lam_prev = _log_snr(ab_prev)
    lam_now = _log_snr(ab_now)
    lam_next = _log_snr(ab_next)
    h = lam_next - lam_now
    h_prev = lam_now - lam_prev
    r = h_prev / h
    blended = (1.0 + 1.0 / (2.0 * r)) * x0_hat - 1.0 / (2.0 * r) * x0_hat_prev
    sig_now = math.sqrt(1.0 - ab_now)
    sig_next = math.sqrt(1.0 - ab_next)
    return (sig_next / sig_now) * xt - math.sqrt(ab_next) * math.expm1(-h) * blended


def deis_step(
    xt: Array,
    x0_history: Sequence[Array],
    t_history: Sequence[int],
    t_next: int,
    order: int,
    schedule: NoiseSchedule,
) -> Array:
    """Exponential-integrator step with polynomial extrapolation of the
    clean-sample prediction in log-SNR.

    Order 1 is exactly the deterministic first-order jump. Order 2 fits a
    line through the two most recent predictions and integrates it exactly
    against the exponential kernel. Insufficient history falls back to
    order 1; so does the final jump to the clean state.
    """
    if order not in (1, 2):
        raise SamplerError(f"order must be 1 or 2, got {order}")
    if not x0_history or len(x0_history) != len(t_history):
        raise SamplerError("deis_step needs aligned non-empty prediction and time history")
    t_now = t_history[-1]
    x0_hat = x0_history[-1]
    if xt.shape != x0_hat.shape:
        raise SamplerError(f"x0_hat shape {x0_hat.shape} != xt shape {xt.shape}")
    ab_now, ab_next = _levels(schedule, t_now, t_next)
    if order == 1 or len(x0_history) < 2 or ab_next >= 1.0:
        return _first_order_step(xt, x0_hat, ab_now, ab_next)
    t_prev = t_history[-2]
    if t_prev <= t_now:
        raise SamplerError(f"history time t_prev={t_prev} must exceed t_now={t_now}")
    ab_prev = schedule.step_alpha_bar(t_prev)
    lam_prev = _log_snr(ab_prev)
    lam_now = _log_snr(ab_now)
    lam_next = _log_snr(ab_next)
    h = lam_next - lam_now
    slope = (x0_hat - x0_history[-2]) / (lam_now - lam_prev)
    sig_now = math.sqrt(1.0 - ab_now)
    sig_next = math.sqrt(1.0 - ab_next)
    alpha_next = math.sqrt(ab_next)
    alpha_now = math.sqrt(ab_now)
    # integral of e^lambda over [lam_now, lam_next], times sigma_next:
    #   constant term:  alpha_next - sig_next * alpha_now / sig_now
    #   linear term:    alpha_next * (h - 1) + sig_next * alpha_now / sig_now
    carry = sig_next * alpha_now / sig_now
    return (
        (sig_next / sig_now) * xt
        + x0_hat * (alpha_next - carry)
        + slope * (alpha_next * (h - 1.0) + carry)
    )


def sample_loop(
    predictor: Callable[[Array, int, Array], Array],
    cond: Array,
    kind: SamplerKind,
    steps: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    deis_order: int = 2,
) -> Array:
    """Run the configured solver from pure noise and return the last
    clean-sample prediction (that estimate, not the final state, is what
    downstream heads consume).

    The predictor is called as predictor(x_t, t, cond) with t in [1, T]
    matching the noise level of x_t, the same convention training uses.
    """
    if steps < 1:
        raise SamplerError(f"steps must be >= 1, got {steps}")
    pairs = make_step_schedule(schedule.timesteps, steps)
    x = rng.standard_normal(np.shape(cond))
    x0_hat = None
    prev_hat: Array | None = None
    prev_t: int | None = None
    history: list[Array] = []
    t_hist: list[int] = []
    for i, (t_now, t_next) in enumerate(pairs):
        x0_hat = predictor(x, t_now + 1, cond)
        if np.shape(x0_hat) != np.shape(x):
            raise SamplerError(
                f"predictor output shape {np.shape(x0_hat)} != state shape {np.shape(x)} at step {i}"
            )
        if not np.all(np.isfinite(x0_hat)):
            raise SamplerError(f"predictor returned non-finite values at step {i} (t_now={t_now})")
        if kind.kind == "ddim":
            x = ddim_step(x, x0_hat, t_now, t_next, kind.eta, schedule, rng)
        elif kind.kind == "dpmpp":
            x = dpmpp_2m_step(x, x0_hat, prev_hat, t_now, prev_t, t_next, schedule)
            prev_hat, prev_t = x0_hat, t_now
        else:
            history.append(x0_hat)
            t_hist.append(t_now)
            x = deis_step(x, history, t_hist, t_next, deis_order, schedule)
    return x0_hat
