"""Dense float64 tensors recorded on a reverse-mode differentiation tape.

Forward values are plain numpy arrays. Each operation appends one node to
the tape together with a closure that maps the output gradient to input
gradients, so a single reverse sweep visits every node exactly once.
Learnable arrays are registered on the tape by name; `backward` returns a
gradient for every registered parameter, zero for the ones the loss never
touched.

Everything is float64: the point of this engine is verifiable numerics,
not throughput.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

Array = np.ndarray


class AutodiffError(ValueError):
    """Shape mismatch, malformed graph, or a non-finite result."""


class Tensor:
    """Value node on a tape. The wrapped array is treated as immutable."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: int, data: Array):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(idx={self.idx}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    def __radd__(self, other):
        return add(_wrap(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    def __rmul__(self, other):
        return mul(_wrap(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __rtruediv__(self, other):
        return div(_wrap(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations plus a registry of parameters."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def _record(self, op: str, data: Array, inputs: tuple[int, ...], backward) -> Tensor:
        if not np.isfinite(data).all():
            raise AutodiffError(f"non-finite values produced by op '{op}'")
        self.nodes.append(_Node(op, inputs, backward))
        return Tensor(self, len(self.nodes) - 1, data)

    def constant(self, value) -> Tensor:
        """Leaf with no gradient of its own (gradients still flow past it)."""
        return self._record("const", np.asarray(value, dtype=np.float64), (), None)

    def parameter(self, name: str, value: Array) -> Tensor:
        """Named learnable leaf; `backward` reports a gradient for it."""
        if name in self.params:
            raise AutodiffError(f"parameter '{name}' registered twice")
        t = self._record("param", np.array(value, dtype=np.float64, copy=True), (), None)
        self.params[name] = t
        return t

    def bind(self, store: Mapping[str, Array]) -> dict[str, Tensor]:
        """Register every array in `store` and return the tensor handles."""
        return {name: self.parameter(name, store[name]) for name in store}


def _wrap(tape: Tape, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise AutodiffError("tensors belong to different tapes")
        return value
    return tape.constant(value)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise AutodiffError("tensors belong to different tapes")
    return tape


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    sa, sb = a.shape, b.shape
    return tape._record(
        "add", a.data + b.data, (a.idx, b.idx),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    sa, sb = a.shape, b.shape
    return tape._record(
        "sub", a.data - b.data, (a.idx, b.idx),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    da, db = a.data, b.data
    return tape._record(
        "mul", da * db, (a.idx, b.idx),
        lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    da, db = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = da / db
    return tape._record(
        "div", out, (a.idx, b.idx),
        lambda g: (_unbroadcast(g / db, da.shape), _unbroadcast(-g * da / (db * db), db.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return a.tape._record("neg", -a.data, (a.idx,), lambda g: (-g,))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record("scalar_mul", c * a.data, (a.idx,), lambda g: (c * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape._record("exp", out, (a.idx,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    da = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(da)
    return a.tape._record("log", out, (a.idx,), lambda g: (g / da,))


def pow_const(a: Tensor, p: float) -> Tensor:
    da = a.data
    p = float(p)
    if p == 0.0:
        return a.tape._record("pow", np.ones_like(da), (a.idx,), lambda g: (np.zeros_like(da),))
    return a.tape._record(
        "pow", da ** p, (a.idx,), lambda g: (g * p * da ** (p - 1.0),)
    )


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return a.tape._record("sigmoid", out, (a.idx,), lambda g: (g * out * (1.0 - out),))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x); derivative s + x * s * (1 - s)."""
    s = _sigmoid(a.data)
    da = a.data
    return a.tape._record(
        "swish", da * s, (a.idx,), lambda g: (g * (s + da * s * (1.0 - s)),)
    )


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    s = _sigmoid(a.data)
    return a.tape._record("softplus", out, (a.idx,), lambda g: (g * s,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes through only where no clipping occurred."""
    da = a.data
    mask = (da > lo) & (da < hi)
    return a.tape._record(
        "clamp", np.clip(da, lo, hi), (a.idx,), lambda g: (g * mask,)
    )


def smooth_l1(a: Tensor) -> Tensor:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; C1 at the joint."""
    da = a.data
    absd = np.abs(da)
    inner = absd < 1.0
    out = np.where(inner, 0.5 * da * da, absd - 0.5)
    return a.tape._record(
        "smooth_l1", out, (a.idx,), lambda g: (g * np.where(inner, da, np.sign(da)),)
    )


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on values; contributes exactly zero gradient upstream."""
    return a.tape._record("stop_gradient", a.data, (a.idx,), lambda g: (None,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return a.tape._record(
        "reshape", a.data.reshape(shape), (a.idx,), lambda g: (g.reshape(old),)
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise AutodiffError("concat of zero tensors")
    tape = _same_tape(*tensors)
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise AutodiffError(f"concat axis {axis} out of range for {ndim}-d input")
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise AutodiffError("concat inputs differ in rank")
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise AutodiffError(
                    f"concat inputs disagree on axis {d}: {t.shape} vs {tensors[0].shape}"
                )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return tape._record(
        "concat", out, tuple(t.idx for t in tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    da = a.data
    index = [slice(None)] * da.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = da.shape

    def back(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return a.tape._record("slice_axis", da[index].copy(), (a.idx,), back)


def take(a: Tensor, flat_indices) -> Tensor:
    """Gather elements of the flattened input; 1-d output."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    da = a.data
    if idx.size and (idx.min() < 0 or idx.max() >= da.size):
        raise AutodiffError("take index out of range")
    shape = da.shape

    def back(g):
        out = np.zeros(da.size)
        np.add.at(out, idx, g)
        return (out.reshape(shape),)

    return a.tape._record("take", da.ravel()[idx].copy(), (a.idx,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape._record(
        "sum", np.asarray(a.data.sum()), (a.idx,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size
    return a.tape._record(
        "mean", np.asarray(a.data.mean()), (a.idx,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return tape._record(
        "mse", np.asarray(np.mean(diff * diff)), (a.idx, b.idx),
        lambda g: (g * 2.0 * diff / n, g * -2.0 * diff / n),
    )


# ---------------------------------------------------------------------------
# dense linear map (used for time-embedding projection)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a 1-d x; w is (out, in), b is (out,)."""
    tape = _same_tape(x, w, b)
    dx, dw = x.data, w.data
    if dx.ndim != 1 or dw.ndim != 2 or dw.shape[1] != dx.shape[0]:
        raise AutodiffError(f"linear shape mismatch: x {dx.shape}, w {dw.shape}")
    out = dw @ dx + b.data
    return tape._record(
        "linear", out, (x.idx, w.idx, b.idx),
        lambda g: (dw.T @ g, np.outer(g, dx), g.copy()),
    )


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N,C,H,W) input with an (O,C,kh,kw) kernel.

    Output spatial extent is floor((H + 2p - kh) / stride) + 1. Odd kernel
    sides only; padding (k - 1) / 2 preserves the spatial extent at stride 1.
    """
    tape = _same_tape(x, kernel, bias)
    dx, dk, db = x.data, kernel.data, bias.data
    if dx.ndim != 4 or dk.ndim != 4:
        raise AutodiffError(f"conv2d expects 4-d input and kernel, got {dx.shape} and {dk.shape}")
    n, c, h, w = dx.shape
    o, ck, kh, kw = dk.shape
    if ck != c:
        raise AutodiffError(f"conv2d channel mismatch: input {dx.shape} vs kernel {dk.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise AutodiffError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if db.shape != (o,):
        raise AutodiffError(f"conv2d bias shape {db.shape} does not match {o} output channels")
    if stride < 1:
        raise AutodiffError("conv2d stride must be >= 1")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise AutodiffError(f"conv2d output would be empty for input {dx.shape}, kernel {dk.shape}")

    xp = np.pad(dx, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (oh - 1) + 1 : stride,
                                  j : j + stride * (ow - 1) + 1 : stride]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    wmat = dk.reshape(o, c * kh * kw)
    out = np.matmul(wmat[None], cols2) + db[None, :, None]
    out = out.reshape(n, o, oh, ow)

    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        gl = g.reshape(n, o, oh * ow)
        grad_b = gl.sum(axis=(0, 2))
        g_flat = gl.transpose(1, 0, 2).reshape(o, n * oh * ow)
        c_flat = cols2.transpose(1, 0, 2).reshape(c * kh * kw, n * oh * ow)
        grad_w = (g_flat @ c_flat.T).reshape(o, c, kh, kw)
        gcols = np.matmul(wmat.T[None], gl).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (oh - 1) + 1 : stride,
                    j : j + stride * (ow - 1) + 1 : stride] += gcols[:, :, i, j]
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        else:
            gx = gxp
        return (gx, grad_w, grad_b)

    return tape._record("conv2d", out, (x.idx, kernel.idx, bias.idx), back)


# ---------------------------------------------------------------------------
# bilinear resize


def _resize_taps(n_in: int, n_out: int) -> tuple[Array, Array, Array]:
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation with half-pixel (align-corners false) sampling.

    Computed in lerp form, so constant fields survive bit-exactly.
    """
    dx = x.data
    if dx.ndim != 4:
        raise AutodiffError(f"bilinear_resize expects (N,C,H,W), got {dx.shape}")
    if out_h < 1 or out_w < 1:
        raise AutodiffError("bilinear_resize target extents must be >= 1")
    n, c, h, w = dx.shape
    y0, y1, fy = _resize_taps(h, out_h)
    x0, x1, fx = _resize_taps(w, out_w)

    a = dx[:, :, y0[:, None], x0[None, :]]
    b = dx[:, :, y0[:, None], x1[None, :]]
    cc = dx[:, :, y1[:, None], x0[None, :]]
    d = dx[:, :, y1[:, None], x1[None, :]]
    top = a + fx[None, :] * (b - a)
    bot = cc + fx[None, :] * (d - cc)
    out = top + fy[:, None] * (bot - top)

    def back(g):
        wy0 = (1.0 - fy)[:, None]
        wy1 = fy[:, None]
        wx0 = (1.0 - fx)[None, :]
        wx1 = fx[None, :]
        gx = np.zeros((n * c, h * w))
        g2 = g.reshape(n * c, out_h, out_w)
        rows = np.arange(n * c)[:, None]
        for yy, wyy in ((y0, wy0), (y1, wy1)):
            for xx, wxx in ((x0, wx0), (x1, wx1)):
                flat = (yy[:, None] * w + xx[None, :]).ravel()[None, :]
                vals = (g2 * wyy * wxx).reshape(n * c, out_h * out_w)
                np.add.at(gx, (rows, flat), vals)
        return (gx.reshape(n, c, h, w),)

    return x.tape._record("bilinear_resize", out, (x.idx,), back)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference harness


def backward(tape: Tape, loss: Tensor) -> dict[str, Array]:
    """Gradients of a scalar loss for every registered parameter."""
    if loss.tape is not tape:
        raise AutodiffError("loss tensor does not belong to this tape")
    if loss.shape != ():
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    grads: list[Array | None] = [None] * len(tape.nodes)
    grads[loss.idx] = np.ones(())
    for idx in range(loss.idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if grads[inp] is None:
                grads[inp] = gi
            else:
                grads[inp] = grads[inp] + gi
    out = {}
    for name, tensor in tape.params.items():
        g = grads[tensor.idx]
        out[name] = np.zeros_like(tensor.data) if g is None else np.asarray(g)
    return out


def finite_diff_check(
    build: Callable[[Tape, Mapping[str, Array]], Tensor],
    params: Mapping[str, Array],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    `build(tape, values)` must construct a scalar loss, registering each
    entry of `values` on the tape (typically via `tape.bind`). A non-finite
    loss anywhere in the probe is reported as math.inf, never raised.
    """
    if h <= 0:
        raise ValueError("finite_diff_check requires h > 0")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values) -> tuple[Tape, Tensor]:
        tape = Tape()
        return tape, build(tape, values)

    try:
        tape, loss = run(base)
        analytic = backward(tape, loss)
    except AutodiffError:
        return math.inf

    worst = 0.0
    for name, value in base.items():
        flat = value.ravel()
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                _, lp = run(base)
                flat[i] = orig - h
                _, lm = run(base)
            except AutodiffError:
                return math.inf
            finally:
                flat[i] = orig
            numeric = (float(lp.data) - float(lm.data)) / (2.0 * h)
            if not math.isfinite(numeric):
                return math.inf
            a = float(analytic[name].ravel()[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


def fan_in_uniform(gen: np.random.Generator, shape: Sequence[int], fan_in: int) -> Array:
    """Uniform init in +-sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    return gen.uniform(-bound, bound, size=tuple(shape))
