import math

import numpy as np
import pytest

from gridfusion import autodiff as ad
from gridfusion.autodiff import Tape, backward, finite_diff_check


def test_zero_input_conv_is_zero():
    tape = Tape()
    x = tape.constant(np.zeros((1, 1, 3, 3)))
    k = tape.constant(np.array([[[[1.0, -2.0, 0.5]] * 3]]).reshape(1, 1, 3, 3))
    b = tape.constant(np.zeros(1))
    out = ad.conv2d(x, k, b, stride=1, padding=1)
    assert np.all(out.data == 0.0)


def test_identity_kernel_conv():
    tape = Tape()
    x = tape.constant(np.arange(12.0).reshape(1, 1, 3, 4))
    k = tape.constant(np.ones((1, 1, 1, 1)))
    b = tape.constant(np.zeros(1))
    out = ad.conv2d(x, k, b, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_ones_kernel_center_sum():
    # 3x3 input 1..9, 3x3 kernel of ones, pad 1: the center output cell sums
    # every input element, 45.
    tape = Tape()
    x = tape.constant(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    k = tape.constant(np.ones((1, 1, 3, 3)))
    b = tape.constant(np.zeros(1))
    out = ad.conv2d(x, k, b, stride=1, padding=1)
    assert out.data[0, 0, 1, 1] == 45.0


def test_conv_shape_validation():
    tape = Tape()
    x = tape.constant(np.zeros((1, 2, 4, 4)))
    k = tape.constant(np.zeros((1, 3, 3, 3)))
    b = tape.constant(np.zeros(1))
    with pytest.raises(ad.AutodiffError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        ad.conv2d(x, k, b, stride=1, padding=1)


def test_conv_even_kernel_rejected():
    tape = Tape()
    x = tape.constant(np.zeros((1, 1, 4, 4)))
    k = tape.constant(np.zeros((1, 1, 2, 2)))
    b = tape.constant(np.zeros(1))
    with pytest.raises(ad.AutodiffError, match="odd"):
        ad.conv2d(x, k, b)


def test_conv_linear_in_input():
    gen = np.random.default_rng(0)
    xa = gen.normal(size=(2, 3, 6, 6))
    xb = gen.normal(size=(2, 3, 6, 6))
    kv = gen.normal(size=(4, 3, 3, 3))
    a, b = 1.7, -0.3

    def run(x):
        tape = Tape()
        return ad.conv2d(
            tape.constant(x), tape.constant(kv), tape.constant(np.zeros(4)),
            stride=1, padding=1,
        ).data

    combined = run(a * xa + b * xb)
    assert np.allclose(combined, a * run(xa) + b * run(xb), atol=1e-12)


def test_conv_strided_shape():
    tape = Tape()
    x = tape.constant(np.zeros((1, 2, 8, 8)))
    k = tape.constant(np.zeros((5, 2, 3, 3)))
    b = tape.constant(np.zeros(5))
    out = ad.conv2d(x, k, b, stride=2, padding=1)
    assert out.shape == (1, 5, 4, 4)


def test_bilinear_constant_preserved_exactly():
    tape = Tape()
    x = tape.constant(np.full((1, 2, 3, 5), 5.0))
    out = ad.bilinear_resize(x, 7, 4)
    assert np.all(out.data == 5.0)


def test_bilinear_upscale_single_pixel():
    tape = Tape()
    x = tape.constant(np.full((1, 1, 1, 1), 3.25))
    out = ad.bilinear_resize(x, 4, 4)
    assert np.all(out.data == 3.25)


def _reference_bilinear(src: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = src.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def test_bilinear_matches_scalar_reference():
    field = np.array([[0.0, 1.0], [2.0, 3.0]])
    tape = Tape()
    out = ad.bilinear_resize(tape.constant(field.reshape(1, 1, 2, 2)), 4, 4)
    assert np.allclose(out.data[0, 0], _reference_bilinear(field, 4, 4), atol=1e-12)

    gen = np.random.default_rng(7)
    field = gen.normal(size=(5, 3))
    tape = Tape()
    out = ad.bilinear_resize(tape.constant(field.reshape(1, 1, 5, 3)), 7, 8)
    assert np.allclose(out.data[0, 0], _reference_bilinear(field, 7, 8), atol=1e-12)


def test_swish_sigmoid_mse_values():
    tape = Tape()
    zero = tape.constant(np.zeros(3))
    assert np.all(ad.swish(zero).data == 0.0)
    assert np.all(ad.sigmoid(zero).data == 0.5)
    x = tape.constant(np.array([1.0, -2.0, 0.5]))
    assert float(ad.mse(x, x).data) == 0.0


def test_concat_axis_validation():
    tape = Tape()
    a = tape.constant(np.zeros((2, 3)))
    b = tape.constant(np.zeros((2, 4)))
    out = ad.concat([a, b], axis=1)
    assert out.shape == (2, 7)
    with pytest.raises(ad.AutodiffError):
        ad.concat([a, b], axis=2)
    with pytest.raises(ad.AutodiffError):
        ad.concat([a, tape.constant(np.zeros((3, 3)))], axis=1)


def test_stop_gradient_value_and_zero_grad():
    tape = Tape()
    p = tape.parameter("p", np.array([1.0, 2.0]))
    blocked = ad.stop_gradient(p)
    assert np.array_equal(blocked.data, p.data)
    loss = ad.mean(ad.mul(blocked, blocked))
    grads = backward(tape, loss)
    assert np.all(grads["p"] == 0.0)


def test_backward_mean_gradient():
    tape = Tape()
    p = tape.parameter("p", np.array([1.0, 2.0, 3.0, 4.0]))
    grads = backward(tape, ad.mean(p))
    assert np.allclose(grads["p"], [0.25, 0.25, 0.25, 0.25])


def test_backward_chain_rule_by_hand():
    # loss = mse(w * x, y) with w=2, x=3, y=0: d/dw = 2 * 6 * 3 = 36
    tape = Tape()
    w = tape.parameter("w", np.array(2.0))
    x = tape.constant(np.array(3.0))
    y = tape.constant(np.array(0.0))
    loss = ad.mse(ad.mul(w, x), y)
    grads = backward(tape, loss)
    assert np.allclose(grads["w"], 36.0)


def test_backward_untouched_parameter_gets_zeros():
    tape = Tape()
    p = tape.parameter("used", np.array([1.0, 2.0]))
    tape.parameter("unused", np.array([[3.0, 4.0]]))
    grads = backward(tape, ad.mean(p))
    assert grads["unused"].shape == (1, 2)
    assert np.all(grads["unused"] == 0.0)


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    p = tape.parameter("p", np.array([1.0, 2.0]))
    with pytest.raises(ad.AutodiffError, match="scalar"):
        backward(tape, p)


def test_finite_diff_quadratic():
    def build(tape, values):
        p = tape.parameter("p", values["p"])
        return ad.mean(ad.mul(p, p))

    err = finite_diff_check(build, {"p": np.array([1.0])}, h=1e-6)
    assert err < 1e-8


def test_swish_derivative_analytic():
    x = 0.7
    tape = Tape()
    p = tape.parameter("p", np.array(x))
    grads = backward(tape, ad.swish(p))
    s = 1.0 / (1.0 + math.exp(-x))
    assert np.allclose(grads["p"], s + x * s * (1 - s), atol=1e-12)


PRIMITIVE_CASES = [
    ("add", lambda t, v: ad.mean(ad.add(v["a"], v["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("add_broadcast", lambda t, v: ad.mean(ad.add(v["a"], v["b"])), {"a": (2, 3, 4), "b": (1, 3, 1)}),
    ("sub", lambda t, v: ad.mean(ad.sub(v["a"], v["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("mul", lambda t, v: ad.mean(ad.mul(v["a"], v["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("mul_scalar_tensor", lambda t, v: ad.mean(ad.mul(v["a"], v["b"])), {"a": (), "b": (2, 5)}),
    ("div", lambda t, v: ad.mean(ad.div(v["a"], v["b"])), {"a": (3, 3), "b": ()}),
    ("neg", lambda t, v: ad.mean(ad.neg(v["a"])), {"a": (4,)}),
    ("scalar_mul", lambda t, v: ad.mean(ad.scalar_mul(v["a"], -1.3)), {"a": (4,)}),
    ("exp", lambda t, v: ad.mean(ad.exp(v["a"])), {"a": (3, 2)}),
    ("sigmoid", lambda t, v: ad.mean(ad.sigmoid(v["a"])), {"a": (5,)}),
    ("swish", lambda t, v: ad.mean(ad.swish(v["a"])), {"a": (5,)}),
    ("softplus", lambda t, v: ad.mean(ad.softplus(v["a"])), {"a": (5,)}),
    ("pow2", lambda t, v: ad.mean(ad.pow_const(v["a"], 2.0)), {"a": (5,)}),
    ("mean", lambda t, v: ad.mean(v["a"]), {"a": (2, 6)}),
    ("sum", lambda t, v: ad.tsum(v["a"]), {"a": (2, 3)}),
    ("mse", lambda t, v: ad.mse(v["a"], v["b"]), {"a": (3, 4), "b": (3, 4)}),
    ("reshape", lambda t, v: ad.mean(ad.reshape(v["a"], (6,))), {"a": (2, 3)}),
    ("concat", lambda t, v: ad.mean(ad.concat([v["a"], v["b"]], axis=0)), {"a": (2, 3), "b": (1, 3)}),
    ("slice", lambda t, v: ad.mean(ad.slice_axis(v["a"], 1, 1, 3)), {"a": (2, 4)}),
    ("linear", lambda t, v: ad.mean(ad.linear(v["x"], v["w"], v["b"])), {"x": (3,), "w": (2, 3), "b": (2,)}),
    (
        "conv2d",
        lambda t, v: ad.mean(ad.conv2d(v["x"], v["k"], v["b"], stride=1, padding=1)),
        {"x": (1, 2, 4, 4), "k": (3, 2, 3, 3), "b": (3,)},
    ),
    (
        "conv2d_strided",
        lambda t, v: ad.mean(ad.conv2d(v["x"], v["k"], v["b"], stride=2, padding=1)),
        {"x": (2, 2, 6, 6), "k": (2, 2, 3, 3), "b": (2,)},
    ),
    ("resize_up", lambda t, v: ad.mean(ad.bilinear_resize(v["x"], 6, 7)), {"x": (1, 2, 3, 4)}),
    ("resize_down", lambda t, v: ad.mean(ad.bilinear_resize(v["x"], 2, 2)), {"x": (1, 2, 5, 6)}),
]


@pytest.mark.parametrize("name,build_loss,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, build_loss, shapes):
    gen = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(5):
        values = {k: gen.normal(size=s) + (2.5 if name == "div" and k == "b" else 0.0)
                  for k, s in shapes.items()}

        def build(tape, vals):
            bound = {k: tape.parameter(k, vals[k]) for k in vals}
            return build_loss(tape, bound)

        err = finite_diff_check(build, values, h=1e-5)
        assert err < 1e-4, f"{name}: finite-difference mismatch {err}"


def test_smooth_l1_gradient_away_from_kink():
    gen = np.random.default_rng(11)
    vals = gen.normal(size=(8,)) * 2.0
    vals[np.abs(np.abs(vals) - 1.0) < 0.1] = 0.5

    def build(tape, v):
        return ad.mean(ad.smooth_l1(tape.parameter("a", v["a"])))

    assert finite_diff_check(build, {"a": vals}, h=1e-6) < 1e-4


def test_clamp_gradient_masks_clipped_region():
    tape = Tape()
    p = tape.parameter("p", np.array([-2.0, 0.5, 2.0]))
    loss = ad.tsum(ad.clamp(p, -1.0, 1.0))
    grads = backward(tape, loss)
    assert np.array_equal(grads["p"], [0.0, 1.0, 0.0])


def test_take_gather_and_scatter():
    tape = Tape()
    p = tape.parameter("p", np.arange(6.0).reshape(2, 3))
    picked = ad.take(p, [0, 4, 4])
    assert np.array_equal(picked.data, [0.0, 4.0, 4.0])
    grads = backward(tape, ad.tsum(picked))
    assert np.array_equal(grads["p"], [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])


def test_non_finite_result_raises():
    tape = Tape()
    zero = tape.constant(np.zeros(1))
    with pytest.raises(ad.AutodiffError, match="div"):
        ad.div(tape.constant(np.ones(1)), zero)


def test_finite_diff_reports_nan_as_failure():
    def build(tape, values):
        p = tape.parameter("p", values["p"])
        return ad.log(p)

    err = finite_diff_check(build, {"p": np.array(-0.5)}, h=1e-5)
    assert err == math.inf


def test_determinism_same_seed_same_ops():
    def run():
        gen = np.random.default_rng(42)
        tape = Tape()
        x = tape.constant(gen.normal(size=(1, 2, 4, 4)))
        k = tape.constant(gen.normal(size=(2, 2, 3, 3)))
        b = tape.constant(gen.normal(size=2))
        return ad.mean(ad.swish(ad.conv2d(x, k, b, 1, 1))).data.copy()

    assert np.array_equal(run(), run())


def test_small_network_gradients_match_finite_differences():
    gen = np.random.default_rng(3)
    values = {
        "k1": gen.normal(size=(2, 1, 3, 3)) * 0.5,
        "b1": gen.normal(size=2) * 0.1,
        "k2": gen.normal(size=(1, 2, 3, 3)) * 0.5,
        "b2": gen.normal(size=1) * 0.1,
    }
    x = gen.normal(size=(1, 1, 5, 5))
    target = gen.normal(size=(1, 1, 5, 5))

    def build(tape, v):
        p = {k: tape.parameter(k, v[k]) for k in v}
        h1 = ad.swish(ad.conv2d(tape.constant(x), p["k1"], p["b1"], 1, 1))
        h2 = ad.conv2d(h1, p["k2"], p["b2"], 1, 1)
        return ad.mse(h2, tape.constant(target))

    assert finite_diff_check(build, values, h=1e-5) < 1e-4
