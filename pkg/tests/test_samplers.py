import math

import numpy as np
import pytest

from gridfusion.rng import Rng
from gridfusion.samplers import (
    SamplerError,
    SamplerKind,
    StepSchedule,
    ddim_step,
    deis_step,
    dpmpp_2m_step,
    make_step_schedule,
    sample_loop,
)
from gridfusion.schedule import NoiseSchedule, make_schedule


def _schedule_from_alpha_bar(levels):
    levels = np.asarray(levels, dtype=np.float64)
    alpha = levels[1:] / levels[:-1]
    return NoiseSchedule(timesteps=len(levels) - 1, beta=1.0 - alpha, alpha=alpha,
                         alpha_bar=levels)


def test_step_schedule_t8_steps4():
    sched = make_step_schedule(8, 4)
    assert sched.pairs == ((7, 5), (5, 3), (3, 1), (1, -1))


def test_step_schedule_single_step():
    sched = make_step_schedule(13, 1)
    assert sched.pairs == ((12, -1),)


def test_step_schedule_t100_steps8_matches_linspace():
    sched = make_step_schedule(100, 8)
    expect = [int(round(-1.0 + k * 100.0 / 8.0)) for k in range(9)][::-1]
    assert [p[0] for p in sched.pairs] == expect[:-1]
    assert [p[1] for p in sched.pairs] == expect[1:]
    assert len(sched) == 8
    nows = [p[0] for p in sched.pairs]
    assert nows == sorted(nows, reverse=True)
    assert sched.pairs[-1][1] == -1


@pytest.mark.parametrize("timesteps,steps", [(8, 1), (8, 8), (100, 7), (5, 3), (1, 1)])
def test_step_schedule_never_repeats_and_terminates(timesteps, steps):
    sched = make_step_schedule(timesteps, steps)
    times = [sched.pairs[0][0]] + [p[1] for p in sched.pairs]
    assert times[0] == timesteps - 1
    assert times[-1] == -1
    assert all(a > b for a, b in zip(times, times[1:]))


def test_step_schedule_rejects_too_many_steps():
    with pytest.raises(SamplerError):
        make_step_schedule(4, 5)
    with pytest.raises(SamplerError):
        make_step_schedule(4, 0)


def test_step_schedule_validates_structure():
    with pytest.raises(SamplerError):
        StepSchedule(pairs=((3, 5),))
    with pytest.raises(SamplerError):
        StepSchedule(pairs=((5, 3), (2, -1)))
    with pytest.raises(SamplerError):
        StepSchedule(pairs=((5, 3),))


def test_ddim_final_jump_returns_prediction():
    s = make_schedule(6, "linear", 0.05, 0.3)
    gen = np.random.default_rng(0)
    xt = gen.normal(size=(2, 3))
    x0_hat = gen.normal(size=(2, 3))
    out = ddim_step(xt, x0_hat, 2, -1, 0.0, s)
    assert np.array_equal(out, x0_hat)
    out = ddim_step(xt, x0_hat, 2, -1, 0.7, s, np.random.default_rng(1))
    assert np.array_equal(out, x0_hat)


def test_ddim_hand_evaluated_scalar_case():
    s = _schedule_from_alpha_bar([1.0, 0.64, 0.25])
    out = ddim_step(np.array(1.0), np.array(1.0), 1, 0, 0.0, s)
    eps_hat = (1.0 - 0.5) / math.sqrt(0.75)
    assert abs(eps_hat - 0.57735026919) < 1e-10
    assert abs(float(out) - (0.8 + 0.6 * eps_hat)) < 1e-12
    assert abs(float(out) - 1.14641016151) < 1e-10


def test_ddim_deterministic_when_eta_zero():
    s = make_schedule(10, "linear", 0.01, 0.1)
    gen = np.random.default_rng(3)
    xt, x0_hat = gen.normal(size=4), gen.normal(size=4)
    a = ddim_step(xt, x0_hat, 7, 4, 0.0, s, np.random.default_rng(0))
    b = ddim_step(xt, x0_hat, 7, 4, 0.0, s, np.random.default_rng(999))
    assert np.array_equal(a, b)


def test_ddim_eta_changes_output_and_uses_rng():
    s = make_schedule(10, "linear", 0.01, 0.1)
    gen = np.random.default_rng(3)
    xt, x0_hat = gen.normal(size=4), gen.normal(size=4)
    det = ddim_step(xt, x0_hat, 7, 4, 0.0, s)
    sto = ddim_step(xt, x0_hat, 7, 4, 1.0, s, np.random.default_rng(5))
    assert not np.allclose(det, sto)
    with pytest.raises(SamplerError):
        ddim_step(xt, x0_hat, 7, 4, 1.0, s, None)


def test_ddim_rejects_bad_pairs():
    s = make_schedule(10, "linear", 0.01, 0.1)
    x = np.zeros(2)
    with pytest.raises(SamplerError):
        ddim_step(x, x, 4, 7, 0.0, s)
    with pytest.raises(SamplerError):
        ddim_step(x, np.zeros(3), 7, 4, 0.0, s)


def test_dpmpp_first_step_equals_ddim():
    s = make_schedule(30, "linear", 1e-3, 0.1)
    gen = np.random.default_rng(4)
    xt, x0_hat = gen.normal(size=(3, 3)), gen.normal(size=(3, 3))
    lhs = dpmpp_2m_step(xt, x0_hat, None, 20, None, 10, s)
    rhs = ddim_step(xt, x0_hat, 20, 10, 0.0, s)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_dpmpp_scalar_reference_recurrence():
    # Independent scalar evaluation of the second-order multistep update.
    s = make_schedule(30, "linear", 1e-3, 0.1)
    t_prev, t_now, t_next = 25, 18, 9
    xt, d_now, d_prev = 0.8, 1.3, -0.4

    def lam(step):
        ab = s.step_alpha_bar(step)
        return math.log(math.sqrt(ab) / math.sqrt(1 - ab))

    h = lam(t_next) - lam(t_now)
    r = (lam(t_now) - lam(t_prev)) / h
    blend = (1 + 1 / (2 * r)) * d_now - 1 / (2 * r) * d_prev
    sig_now = math.sqrt(1 - s.step_alpha_bar(t_now))
    sig_next = math.sqrt(1 - s.step_alpha_bar(t_next))
    ref = (sig_next / sig_now) * xt - math.sqrt(s.step_alpha_bar(t_next)) * (math.exp(-h) - 1) * blend

    out = dpmpp_2m_step(np.array(xt), np.array(d_now), np.array(d_prev), t_now, t_prev, t_next, s)
    assert abs(float(out) - ref) < 1e-12


def test_dpmpp_two_step_loop_matches_scalar_reference():
    s = make_schedule(12, "linear", 0.01, 0.15)
    steps = 3
    pairs = make_step_schedule(12, steps).pairs
    a_pred, b_pred = 0.35, 0.2  # linear toy predictor x0_hat = a * x + b

    def predictor(x, t, cond):
        return a_pred * x + b_pred

    gen = Rng(5).stream("x")
    start = float(gen.standard_normal(()))

    # independent scalar rollout
    x = start
    hist = []
    for t_now, t_next in pairs:
        d = a_pred * x + b_pred
        ab_now = s.step_alpha_bar(t_now)
        ab_next = s.step_alpha_bar(t_next)
        if not hist or ab_next >= 1.0:
            eps = (x - math.sqrt(ab_now) * d) / math.sqrt(1 - ab_now)
            x = math.sqrt(ab_next) * d + math.sqrt(1 - ab_next) * eps
        else:
            d_prev, t_prev = hist[-1]
            lam = lambda ab: math.log(math.sqrt(ab) / math.sqrt(1 - ab))
            h = lam(ab_next) - lam(ab_now)
            r = (lam(ab_now) - lam(s.step_alpha_bar(t_prev))) / h
            blend = (1 + 1 / (2 * r)) * d - 1 / (2 * r) * d_prev
            x = (math.sqrt(1 - ab_next) / math.sqrt(1 - ab_now)) * x \
                - math.sqrt(ab_next) * (math.exp(-h) - 1) * blend
        hist.append((d, t_now))
        last = d

    out = sample_loop(
        predictor, np.zeros(()), SamplerKind("dpmpp"), steps, s,
        Rng(5).stream("x"),
    )
    assert abs(float(out) - last) < 1e-12


def test_deis_order1_equals_ddim():
    s = make_schedule(30, "linear", 1e-3, 0.1)
    gen = np.random.default_rng(6)
    xt, x0_hat = gen.normal(size=(2, 2)), gen.normal(size=(2, 2))
    lhs = deis_step(xt, [x0_hat], [20], 10, 1, s)
    rhs = ddim_step(xt, x0_hat, 20, 10, 0.0, s)
    assert np.allclose(lhs, rhs, atol=1e-12)
    # insufficient history falls back rather than failing
    lhs2 = deis_step(xt, [x0_hat], [20], 10, 2, s)
    assert np.allclose(lhs2, rhs, atol=1e-12)


def test_deis_order2_scalar_reference():
    s = make_schedule(40, "linear", 1e-3, 0.08)
    t_prev, t_now, t_next = 33, 22, 12
    xt, d_now, d_prev = -0.6, 0.9, 1.7

    def lam(step):
        ab = s.step_alpha_bar(step)
        return 0.5 * math.log(ab / (1 - ab))

    h = lam(t_next) - lam(t_now)
    slope = (d_now - d_prev) / (lam(t_now) - lam(t_prev))
    ab_now, ab_next = s.step_alpha_bar(t_now), s.step_alpha_bar(t_next)
    sig_now, sig_next = math.sqrt(1 - ab_now), math.sqrt(1 - ab_next)
    a_now, a_next = math.sqrt(ab_now), math.sqrt(ab_next)
    carry = sig_next * a_now / sig_now
    ref = (sig_next / sig_now) * xt + d_now * (a_next - carry) + slope * (a_next * (h - 1) + carry)

    out = deis_step(np.array(xt), [np.array(d_prev), np.array(d_now)], [t_prev, t_now], t_next, 2, s)
    assert abs(float(out) - ref) < 1e-12


def test_constant_oracle_is_fixed_point_for_all_samplers():
    s = make_schedule(16, "linear", 0.01, 0.1)
    c = 0.77
    cond = np.zeros((2, 2))
    for kind in ("ddim", "dpmpp", "deis"):
        out = sample_loop(lambda x, t, cnd: np.full_like(x, c), cond,
                          SamplerKind(kind), 4, s, Rng(1).stream(kind))
        assert np.allclose(out, c, atol=1e-12)


def test_oracle_predictor_reconstructs_x0():
    s = make_schedule(32, "linear", 1e-3, 0.05)
    x0 = np.random.default_rng(8).normal(size=(3, 4))
    for kind in ("ddim", "dpmpp", "deis"):
        for steps in (1, 2, 4, 8):
            out = sample_loop(lambda x, t, cond: x0.copy(), np.zeros_like(x0),
                              SamplerKind(kind), steps, s, Rng(2).stream(f"{kind}{steps}"))
            assert np.allclose(out, x0, atol=1e-9)


def test_ddim_full_step_oracle_reconstruction():
    s = make_schedule(50, "linear", 1e-3, 0.05)
    x0 = np.random.default_rng(9).normal(size=(2, 5))
    out = sample_loop(lambda x, t, cond: x0.copy(), np.zeros_like(x0),
                      SamplerKind("ddim"), s.timesteps, s, Rng(3).stream("full"))
    assert np.allclose(out, x0, atol=1e-6)


def test_sample_loop_calls_predictor_once_per_step():
    s = make_schedule(10, "linear", 0.01, 0.1)
    calls = []

    def predictor(x, t, cond):
        calls.append(t)
        return np.zeros_like(x)

    sample_loop(predictor, np.zeros(3), SamplerKind("ddim"), 1, s, Rng(4).stream("a"))
    assert len(calls) == 1
    assert calls[0] == 10  # top noise level for T=10

    calls.clear()
    sample_loop(predictor, np.zeros(3), SamplerKind("ddim"), 5, s, Rng(4).stream("a"))
    assert len(calls) == 5


def test_sample_loop_bit_identical_across_runs():
    s = make_schedule(20, "linear", 1e-3, 0.1)
    x0 = np.random.default_rng(10).normal(size=(2, 2))

    def run():
        return sample_loop(lambda x, t, cond: 0.5 * x + 0.1, np.zeros_like(x0),
                           SamplerKind("ddim"), 4, s, Rng(11).stream("noise"))

    assert np.array_equal(run(), run())


def test_all_samplers_agree_at_one_step():
    s = make_schedule(24, "linear", 1e-3, 0.1)

    def predictor(x, t, cond):
        return 0.3 * x - 0.2

    outs = [
        sample_loop(predictor, np.zeros((2, 3)), SamplerKind(kind), 1, s, Rng(12).stream("z"))
        for kind in ("ddim", "dpmpp", "deis")
    ]
    assert np.allclose(outs[0], outs[1], atol=1e-9)
    assert np.allclose(outs[0], outs[2], atol=1e-9)


def test_sample_loop_aborts_on_non_finite_prediction():
    s = make_schedule(10, "linear", 0.01, 0.1)

    def predictor(x, t, cond):
        return np.full_like(x, np.nan)

    with pytest.raises(SamplerError, match="step 0"):
        sample_loop(predictor, np.zeros(2), SamplerKind("ddim"), 2, s, Rng(0).stream("n"))


def test_noisy_predictor_error_non_increasing_in_steps():
    # An imperfect predictor whose error scales with the noise level of its
    # input: more solver steps means the last prediction happens closer to
    # the clean state, so reconstruction improves monotonically.
    s = make_schedule(100, "linear", 1e-4, 0.02)
    dim = 16
    step_grid = (1, 2, 4, 8)
    errs = {k: [] for k in step_grid}
    for seed in range(32):
        gen = Rng(seed).stream("toy")
        x0 = gen.standard_normal(dim)

        def predictor(x, t, cond):
            level = math.sqrt(1.0 - s.alpha_bar_at(t))
            return cond + 0.4 * level * x

        for steps in step_grid:
            out = sample_loop(predictor, x0, SamplerKind("ddim"), steps, s,
                              Rng(1000 + seed).stream("start"))
            errs[steps].append(float(np.mean((out - x0) ** 2)))
    means = [float(np.mean(errs[k])) for k in step_grid]
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_sampler_kind_validation():
    with pytest.raises(SamplerError):
        SamplerKind("euler")
    with pytest.raises(SamplerError):
        SamplerKind("ddim", eta=-0.1)
    with pytest.raises(SamplerError):
        deis_step(np.zeros(1), [np.zeros(1)], [5], 2, 3, make_schedule(10, "linear", 0.01, 0.1))
