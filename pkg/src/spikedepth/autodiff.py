"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

A Tensor wraps a numpy value array plus an optional gradient. Operations
executed while a Tape is active append nodes (inputs, output, backward
rule) to the tape in creation order, which is already a topological
order; backward() then walks the tape once in reverse and accumulates
gradients into every reachable tensor. Repeated backward calls without
zeroing accumulate gradients (standard semantics).

The one non-smooth primitive is spike_threshold: a hard Heaviside step in
the forward pass whose backward pass uses the arctan surrogate derivative

    d out / d x = alpha / (2 * (1 + (pi * alpha * (x - v_th) / 2)**2))

No convolution here carries a bias term; the spiking engine is bias-free
by construction.

Default precision is 32-bit; set_default_dtype(np.float64) switches to the
64-bit verification mode used for tighter gradient checks. All kernels are
plain numpy, so results are deterministic for a fixed build.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@dataclass(frozen=True)
class SurrogateConfig:
    """Slope of the arctan surrogate used through the spike threshold."""
    alpha: float = 2.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("surrogate alpha must be positive")


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations, in (topological) creation order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK.pop() is self
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense real tensor participating (optionally) in the gradient tape."""

    __slots__ = ("values", "grad", "node", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.node = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    # light operator sugar over the functional API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor-tensor product not supported; use mul_const")
        return scale(self, float(other))

    __rmul__ = __mul__


def constant(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=False, name=name)


def parameter(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _tracked(*tensors) -> bool:
    if _active_tape() is None:
        return False
    return any(t.requires_grad or t.node is not None for t in tensors)


def _record(inputs, out_values, backward_fn) -> Tensor:
    out = Tensor(out_values)
    if _tracked(*inputs):
        node = _Node(tuple(inputs), out, backward_fn)
        out.node = node
        _active_tape().nodes.append(node)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(
            f"{op}: shapes {a.values.shape} and {b.values.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and reduction primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _record([a, b], a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _record([a, b], a.values - b.values, lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    return _record([a], a.values * c, lambda g: (g * c,))


def mul_const(a: Tensor, arr) -> Tensor:
    """Elementwise product with a constant array (no gradient into arr)."""
    arr = np.asarray(arr, dtype=a.values.dtype)
    if arr.shape != a.values.shape:
        raise ShapeMismatchError(
            f"mul_const: shapes {a.values.shape} and {arr.shape} differ")
    return _record([a], a.values * arr, lambda g: (g * arr,))


def square(a: Tensor) -> Tensor:
    v = a.values
    return _record([a], v * v, lambda g: (2.0 * v * g,))


def abs_elem(a: Tensor) -> Tensor:
    v = a.values
    return _record([a], np.abs(v), lambda g: (np.sign(v) * g,))


def sum_reduce(a: Tensor) -> Tensor:
    shape = a.values.shape
    return _record([a], np.sum(a.values),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_reduce(a: Tensor) -> Tensor:
    shape = a.values.shape
    n = a.values.size
    return _record([a], np.mean(a.values),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.values.shape
    return _record([a], a.values.reshape(shape),
                   lambda g: (g.reshape(old),))


def masked_select(a: Tensor, mask) -> Tensor:
    """Flatten the entries of a where mask is True; backward scatters back."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.values.shape:
        raise ShapeMismatchError(
            f"masked_select: mask shape {mask.shape} != tensor {a.values.shape}")

    def bwd(g):
        out = np.zeros_like(a.values)
        out[mask] = g
        return (out,)

    return _record([a], a.values[mask], bwd)


def diff_x(a: Tensor) -> Tensor:
    """Forward difference along the last axis: out[..., j] = a[..., j+1] - a[..., j]."""
    if a.values.shape[-1] < 2:
        raise ShapeMismatchError("diff_x needs at least 2 columns")

    def bwd(g):
        out = np.zeros_like(a.values)
        out[..., 1:] += g
        out[..., :-1] -= g
        return (out,)

    return _record([a], np.diff(a.values, axis=-1), bwd)


def diff_y(a: Tensor) -> Tensor:
    """Forward difference along the second-to-last axis."""
    if a.values.ndim < 2 or a.values.shape[-2] < 2:
        raise ShapeMismatchError("diff_y needs at least 2 rows")

    def bwd(g):
        out = np.zeros_like(a.values)
        out[..., 1:, :] += g
        out[..., :-1, :] -= g
        return (out,)

    return _record([a], np.diff(a.values, axis=-2), bwd)


# ---------------------------------------------------------------------------
# spiking nonlinearity

def spike_threshold(preact: Tensor, threshold: float = 1.0,
                    cfg: SurrogateConfig = SurrogateConfig()) -> Tensor:
    """Hard Heaviside step (spike iff preact >= threshold) with arctan
    surrogate derivative in the backward pass."""
    v = preact.values
    out = (v >= threshold).astype(v.dtype)

    def bwd(g):
        centered = v - threshold
        d = cfg.alpha / (2.0 * (1.0 + (math.pi * cfg.alpha * centered / 2.0) ** 2))
        return (g * d,)

    return _record([preact], out, bwd)


def surrogate_derivative(x, alpha: float = 2.0):
    """Closed form of the arctan surrogate derivative at centered preactivation x."""
    x = np.asarray(x, dtype=np.float64)
    return alpha / (2.0 * (1.0 + (math.pi * alpha * x / 2.0) ** 2))


# ---------------------------------------------------------------------------
# spatial primitives

def _im2col(xp: np.ndarray, k: int, s: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::s, ::s]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           layer: str | None = None) -> Tensor:
    """Bias-free 2-D cross-correlation of x (C_in, H, W) with weight
    (C_out, C_in, k, k); zero padding, square odd kernels."""
    where = f" in layer {layer!r}" if layer else ""
    if x.values.ndim != 3:
        raise ShapeMismatchError(f"conv2d{where}: input must be (C, H, W), "
                                 f"got {x.values.shape}")
    if weight.values.ndim != 4 or weight.values.shape[2] != weight.values.shape[3]:
        raise ShapeMismatchError(f"conv2d{where}: weight must be (C_out, C_in, k, k), "
                                 f"got {weight.values.shape}")
    co, ci, k, _ = weight.values.shape
    if k % 2 == 0:
        raise ShapeMismatchError(f"conv2d{where}: kernel size must be odd, got {k}")
    if padding > k - 1:
        raise ShapeMismatchError(f"conv2d{where}: padding {padding} exceeds k-1")
    if ci != x.values.shape[0]:
        raise ShapeMismatchError(
            f"conv2d{where}: weight expects {ci} input channels, input has "
            f"{x.values.shape[0]}")

    h, w = x.values.shape[1], x.values.shape[2]
    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, k, stride)
    wm = weight.values.reshape(co, ci * k * k)
    out = (wm @ cols).reshape(co, ho, wo)

    def bwd(g):
        gm = g.reshape(co, ho * wo)
        dw = (gm @ cols.T).reshape(weight.values.shape)
        # input gradient = transposed convolution: dilate g by the stride,
        # full-pad by k-1, correlate with the flipped transposed kernel to
        # get the padded-input gradient, then crop the forward zero padding
        gd = np.zeros((co, stride * (ho - 1) + 1, stride * (wo - 1) + 1),
                      dtype=g.dtype)
        gd[:, ::stride, ::stride] = g
        gp = np.pad(gd, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wt = np.ascontiguousarray(
            weight.values.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        cols2, hd, wd = _im2col(gp, k, 1)
        dxp = (wt.reshape(ci, co * k * k) @ cols2).reshape(ci, hd, wd)
        if hd < h + 2 * padding or wd < w + 2 * padding:
            # windows past the stride remainder received no gradient
            dxp = np.pad(dxp, ((0, 0), (0, h + 2 * padding - hd),
                               (0, w + 2 * padding - wd)))
        dx = dxp[:, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(dx), dw)

    return _record([x, weight], out, bwd)


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def nn_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of (C, H, W) by an integer factor; each
    source cell is replicated into a factor x factor block. Integer-valued
    inputs stay integer-valued."""
    if factor not in (1, 2, 4, 8, 16):
        raise ValueError(f"upsample factor must be a power of two <= 16, got {factor}")
    if x.values.ndim != 3:
        raise ShapeMismatchError(f"nn_upsample: input must be (C, H, W), "
                                 f"got {x.values.shape}")
    if factor == 1:
        return _record([x], x.values.copy(), lambda g: (g,))
    c, h, w = x.values.shape
    out = x.values.repeat(factor, axis=1).repeat(factor, axis=2)

    def bwd(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _record([x], out, bwd)


# ---------------------------------------------------------------------------
# backward sweep and finite-difference oracle

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Single reverse sweep from a scalar loss through the tape."""
    if loss.values.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape "
                         f"{loss.values.shape}")
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise ValueError("no tape: run the forward pass inside `with Tape():`")
    loss.accumulate_grad(np.asarray(1.0, dtype=loss.values.dtype))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is not None:
                inp.accumulate_grad(gi)


def grad_check(f, x: Tensor, eps: float | None = None) -> float:
    """Max relative error between analytic gradient of scalar-valued f(x)
    and central finite differences, per coordinate of x."""
    if eps is None:
        eps = 1e-6
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        backward(out, tape)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()

    # evaluate the difference quotient in 64-bit so the oracle's own
    # rounding noise stays far below the tolerance under test
    global _DEFAULT_DTYPE
    saved_dtype, saved_values = _DEFAULT_DTYPE, x.values
    _DEFAULT_DTYPE = np.float64
    x.values = saved_values.astype(np.float64)
    numeric = np.zeros_like(x.values, dtype=np.float64)
    flat = x.values.reshape(-1)
    nflat = numeric.reshape(-1)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).values)
            flat[i] = orig - eps
            fm = float(f(x).values)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
    finally:
        _DEFAULT_DTYPE = saved_dtype
        x.values = saved_values

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_suite(n_instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of every smooth primitive plus a composed
    encoder-style graph (conv - upsample - conv - mean). Returns the max
    relative error per check over n_instances random instances. The spike
    threshold is excluded (piecewise-constant forward); its backward is
    validated against the closed-form surrogate expression elsewhere."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def run(name, make):
        worst = 0.0
        for _ in range(n_instances):
            f, x = make()
            worst = max(worst, grad_check(f, x))
        results[name] = worst

    def rand(*shape):
        return parameter(rng.normal(size=shape))

    run("square", lambda: (lambda x: sum_reduce(square(x)), rand(4, 5)))
    run("abs_elem", lambda: (lambda x: sum_reduce(abs_elem(x)),
                             parameter(rng.normal(size=(4, 5)) + 0.5)))
    run("mean_reduce", lambda: (lambda x: mean_reduce(x), rand(3, 4)))
    run("diff_x", lambda: (lambda x: sum_reduce(square(diff_x(x))), rand(4, 5)))
    run("diff_y", lambda: (lambda x: sum_reduce(square(diff_y(x))), rand(5, 4)))

    def make_masked():
        mask = rng.random((4, 5)) > 0.4
        mask.flat[0] = True
        return (lambda x: sum_reduce(square(masked_select(x, mask))), rand(4, 5))

    run("masked_select", make_masked)

    def make_add():
        b = constant(rng.normal(size=(3, 4)))
        return (lambda x: sum_reduce(square(add(x, b))), rand(3, 4))

    run("add", make_add)

    def make_sub():
        b = constant(rng.normal(size=(3, 4)))
        return (lambda x: sum_reduce(square(sub(x, b))), rand(3, 4))

    run("sub", make_sub)

    def make_conv_x():
        w = constant(rng.normal(size=(3, 2, 3, 3)))
        s = int(rng.integers(1, 3))
        return (lambda x: mean_reduce(square(conv2d(x, w, stride=s, padding=1))),
                rand(2, 6, 6))

    run("conv2d_input", make_conv_x)

    def make_conv_w():
        x = constant(rng.normal(size=(2, 6, 6)))
        s = int(rng.integers(1, 3))
        return (lambda w: mean_reduce(square(conv2d(x, w, stride=s, padding=1))),
                rand(3, 2, 3, 3))

    run("conv2d_weight", make_conv_w)

    def make_upsample():
        f = int(rng.choice([2, 4]))
        return (lambda x: mean_reduce(square(nn_upsample(x, f))), rand(2, 3, 3))

    run("nn_upsample", make_upsample)

    def make_composite():
        w1 = constant(rng.normal(size=(3, 2, 3, 3)) * 0.5)
        w2 = constant(rng.normal(size=(1, 3, 3, 3)) * 0.5)

        def f(x):
            h = conv2d(x, w1, stride=2, padding=1)
            h = square(h)
            h = nn_upsample(h, 2)
            h = conv2d(h, w2, stride=1, padding=1)
            return mean_reduce(square(h))

        return (f, rand(2, 8, 8))

    run("encoder_composite", make_composite)
    return results
