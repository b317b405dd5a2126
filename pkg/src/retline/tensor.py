"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (retention operators, fusion layers, the decoder stack)
is built from the primitives here. Forward values are plain numpy arrays in
double precision; gradients are computed by replaying a Tape in exact reverse
execution order. Matmuls register their scalar multiply/add counts with any
active OpCounter, which is what the cost model and decode statistics read.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-5

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = []
        _TLS.tapes = stack
    return stack


def _counter_stack() -> list:
    stack = getattr(_TLS, "counters", None)
    if stack is None:
        stack = []
        _TLS.counters = stack
    return stack


class OpCounter:
    """Scalar multiply/add accumulator for one evaluation context."""

    __slots__ = ("mults", "adds")

    def __init__(self):
        self.mults = 0
        self.adds = 0

    @property
    def total(self) -> int:
        return self.mults + self.adds

    def snapshot(self) -> tuple:
        return (self.mults, self.adds)


class count_ops:
    """Context manager routing op costs into `counter` while active."""

    def __init__(self, counter: OpCounter):
        self.counter = counter

    def __enter__(self) -> OpCounter:
        _counter_stack().append(self.counter)
        return self.counter

    def __exit__(self, *exc):
        _counter_stack().pop()
        return False


def register_matmul_cost(m: int, k: int, p: int) -> None:
    """Record the m*k*p multiplies and m*p*(k-1) adds of an (m,k)x(k,p) product."""
    for counter in _counter_stack():
        counter.mults += m * k * p
        counter.adds += m * p * (k - 1)


class Tensor:
    """n-dimensional float64 array, optionally tracked for gradients.

    Data is immutable by convention after construction; ops return fresh
    tensors. `grad` is populated on requires_grad leaves by backward().
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path: arr already float64 and finite by construction
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Used as a context manager; ops executed inside record themselves, and
    backward() replays the records in exact reverse execution order. One tape
    per forward pass, confined to a single thread.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, grad_fn)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, inputs: tuple, grad_fn) -> None:
        self._nodes.append((out, inputs, grad_fn))

    def __len__(self) -> int:
        return len(self._nodes)


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: tuple, grad_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, grad_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ∂loss/∂leaf on every requires_grad leaf reachable from `loss`.

    Must run inside the `with Tape()` block that recorded the forward pass.
    Repeated calls without zeroing grads accumulate. Forward values are never
    mutated.
    """
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

    # pass-local gradients keyed by tensor identity; leaves are whatever is
    # left once every recorded node has consumed its output gradient
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, grad_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        contribs = grad_fn(g)
        for t, c in zip(inputs, contribs):
            if c is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
                holders[key] = t
    for key, t in holders.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-dim row vector b for biases."""
    if a.shape == b.shape:
        out = Tensor._wrap(a.data + b.data, False)

        def grad_fn(g):
            return g, g

        return _record(out, (a, b), grad_fn)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor._wrap(a.data + b.data, False)

        def grad_fn(g):
            gb = g.reshape(-1, b.shape[0]).sum(axis=0)
            return g, gb

        return _record(out, (a, b), grad_fn)
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(a.data - b.data, False)

    def grad_fn(g):
        return g, -g

    return _record(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(a.data * b.data, False)

    def grad_fn(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), grad_fn)


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (no gradient into c)."""
    c = np.asarray(c, dtype=np.float64)
    out = Tensor._wrap(a.data * c, False)

    def grad_fn(g):
        return (g * c,)

    return _record(out, (a,), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * c, False)

    def grad_fn(g):
        return (g * c,)

    return _record(out, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; registers m*k*p mults and m*p*(k-1) adds."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    m, k = a.shape
    k2, p = b.shape
    if k != k2:
        raise ValueError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    register_matmul_cost(m, k, p)
    out = Tensor._wrap(a.data @ b.data, False)

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out = Tensor._wrap(np.ascontiguousarray(a.data.T), False)

    def grad_fn(g):
        return (np.ascontiguousarray(g.T),)

    return _record(out, (a,), grad_fn)


def permute(a: Tensor, axes: tuple) -> Tensor:
    out = Tensor._wrap(np.ascontiguousarray(np.transpose(a.data, axes)), False)
    inv = np.argsort(axes)

    def grad_fn(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record(out, (a,), grad_fn)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape), False)
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(out, (a,), grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("slice_rows expects a 2-D tensor")
    out = Tensor._wrap(a.data[start:stop].copy(), False)
    n = a.shape[0]

    def grad_fn(g):
        ga = np.zeros((n, a.shape[1]))
        ga[start:stop] = g
        return (ga,)

    return _record(out, (a,), grad_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    out = Tensor._wrap(a.data[:, start:stop].copy(), False)

    def grad_fn(g):
        ga = np.zeros(a.shape)
        ga[:, start:stop] = g
        return (ga,)

    return _record(out, (a,), grad_fn)


def concat_rows(parts: list) -> Tensor:
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=0), False)
    sizes = [p.shape[0] for p in parts]

    def grad_fn(g):
        grads, at = [], 0
        for s in sizes:
            grads.append(g[at:at + s])
            at += s
        return tuple(grads)

    return _record(out, tuple(parts), grad_fn)


def concat_cols(parts: list) -> Tensor:
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1), False)
    sizes = [p.shape[1] for p in parts]

    def grad_fn(g):
        grads, at = [], 0
        for s in sizes:
            grads.append(g[:, at:at + s])
            at += s
        return tuple(grads)

    return _record(out, tuple(parts), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum()), False)

    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor._wrap(np.asarray(a.data.sum() / n), False)

    def grad_fn(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(out, (a,), grad_fn)


def scale_rows(a: Tensor, weights) -> Tensor:
    """Multiply each row by a constant per-row weight (no gradient into weights)."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if a.data.ndim != 2 or w.shape[0] != a.shape[0]:
        raise ValueError("scale_rows expects (n,d) tensor and n weights")
    out = Tensor._wrap(a.data * w, False)

    def grad_fn(g):
        return (g * w,)

    return _record(out, (a,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ValueError("softmax_rows expects a 2-D tensor with at least one column")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(s, False)

    def grad_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), grad_fn)


def masked_softmax_rows(x: Tensor, allow) -> Tensor:
    """Row-wise softmax over the entries where `allow` is True; others get
    probability exactly 0. Every row must allow at least one entry."""
    allow = np.asarray(allow, dtype=bool)
    if allow.shape != x.shape:
        raise ValueError("mask shape must match tensor shape")
    if not allow.any(axis=1).all():
        raise ValueError("masked_softmax_rows: some row allows no entries")
    masked = np.where(allow, x.data, -np.inf)
    z = masked - masked.max(axis=1, keepdims=True)
    e = np.where(allow, np.exp(np.where(allow, z, 0.0)), 0.0)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(s, False)

    def grad_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), grad_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ValueError("log_softmax_rows expects a 2-D tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor._wrap(z - lse, False)
    s = np.exp(z - lse)

    def grad_fn(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _record(out, (x,), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor._wrap(x.data * phi_cdf, False)

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (phi_cdf + x.data * pdf),)

    return _record(out, (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise ValueError("exp overflow")
    out = Tensor._wrap(y, False)

    def grad_fn(g):
        return (g * y,)

    return _record(out, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    out = Tensor._wrap(np.log(x.data), False)

    def grad_fn(g):
        return (g / x.data,)

    return _record(out, (x,), grad_fn)


def cumsum0(x: Tensor) -> Tensor:
    """Cumulative sum down axis 0."""
    out = Tensor._wrap(np.cumsum(x.data, axis=0), False)

    def grad_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis=0), axis=0), axis=0),)

    return _record(out, (x,), grad_fn)


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each row by its sum; rows must sum to something positive."""
    if x.data.ndim != 2:
        raise ValueError("normalize_rows expects a 2-D tensor")
    s = x.data.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("normalize_rows: row sums must be positive")
    y = x.data / s
    out = Tensor._wrap(y, False)

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) / s,)

    return _record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = Tensor._wrap(s, False)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), grad_fn)


def pow_const(x: Tensor, p: float) -> Tensor:
    """x**p for strictly positive x (used for temperature-scaled gates)."""
    if np.any(x.data <= 0):
        raise ValueError("pow_const requires strictly positive inputs")
    y = x.data ** p
    out = Tensor._wrap(y, False)

    def grad_fn(g):
        return (g * p * y / x.data,)

    return _record(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize each trailing-dim vector to zero mean / unit variance, then
    apply the affine gain and bias. eps sits inside the square root."""
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ValueError("layer_norm: trailing extent must be nonzero")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm: gain/bias must have shape (d,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gain.data + bias.data, False)

    def grad_fn(g):
        gg = g * gain.data
        gx = None
        if x.requires_grad:
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            gx = (gg - m1 - xhat * m2) * inv
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), grad_fn)


def embedding_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embedding_rows expects a flat id list")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    out = Tensor._wrap(table.data[ids].copy(), False)

    def grad_fn(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), grad_fn)


def rotate_pairs(x: Tensor, angles) -> Tensor:
    """Rotate consecutive coordinate pairs of each row by the given angles.

    angles has shape (n, d/2); rotation is norm-preserving and linear, so the
    backward pass is the inverse rotation.
    """
    if x.data.ndim != 2 or x.shape[1] % 2 != 0:
        raise ValueError("rotate_pairs expects (n, d) with even d")
    ang = np.asarray(angles, dtype=np.float64)
    if ang.shape != (x.shape[0], x.shape[1] // 2):
        raise ValueError("angles must have shape (n, d/2)")
    cos, sin = np.cos(ang), np.sin(ang)
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    y = np.empty_like(x.data)
    y[:, 0::2] = xe * cos - xo * sin
    y[:, 1::2] = xe * sin + xo * cos
    out = Tensor._wrap(y, False)

    def grad_fn(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        gx = np.empty_like(g)
        gx[:, 0::2] = ge * cos + go * sin
        gx[:, 1::2] = -ge * sin + go * cos
        return (gx,)

    return _record(out, (x,), grad_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor._wrap(x.data * mask, False)

    def grad_fn(g):
        return (g * mask,)

    return _record(out, (x,), grad_fn)


def unfold(x: Tensor, kernel: int, stride: tuple, pad: int):
    """im2col for a (c, h, w) tensor: returns ((oh*ow, c*kernel*kernel) tensor,
    oh, ow). Patch rows are ordered row-major over output positions."""
    if x.data.ndim != 3:
        raise ValueError("unfold expects a (c, h, w) tensor")
    c, h, w = x.shape
    sh, sw = stride
    oh = (h + 2 * pad - kernel) // sh + 1
    ow = (w + 2 * pad - kernel) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError("unfold: kernel does not fit input")
    hp, wp = h + 2 * pad, w + 2 * pad
    padded = np.zeros((c, hp, wp))
    padded[:, pad:pad + h, pad:pad + w] = x.data

    # flat gather indices into the padded array, shape (oh*ow, c*k*k)
    ci = np.arange(c)[None, :, None, None]
    ki = np.arange(kernel)[None, None, :, None]
    kj = np.arange(kernel)[None, None, None, :]
    base_i = (np.arange(oh) * sh)[:, None]
    base_j = (np.arange(ow) * sw)[None, :]
    pos_i = (base_i + np.zeros_like(base_j)).reshape(-1)[:, None, None, None]
    pos_j = (base_j + np.zeros_like(base_i)).reshape(-1)[:, None, None, None]
    flat = (ci * hp + pos_i + ki) * wp + (pos_j + kj)
    flat = flat.reshape(oh * ow, c * kernel * kernel)

    cols = padded.reshape(-1)[flat]
    out = Tensor._wrap(np.ascontiguousarray(cols), False)

    def grad_fn(g):
        gpad = np.zeros(c * hp * wp)
        np.add.at(gpad, flat.reshape(-1), g.reshape(-1))
        gpad = gpad.reshape(c, hp, wp)
        return (np.ascontiguousarray(gpad[:, pad:pad + h, pad:pad + w]),)

    return _record(out, (x,), grad_fn), oh, ow


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Worst relative error between backward() and central finite differences
    of the scalar-valued f over every coordinate of x. Relative error uses an
    absolute floor of 1e-8 so a zero/zero comparison reports 0."""
    if h <= 0:
        raise ValueError("step size must be positive")
    was_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape():
        loss = f(x)
        if loss.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        if not np.isfinite(loss.data).all():
            raise ValueError("grad_check: function value is not finite")
        backward(loss)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was_rg

    worst = 0.0
    flat = x.data.reshape(-1)
    ana = analytic.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x).item()
        flat[i] = keep - h
        fm = f(x).item()
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("grad_check: function value is not finite")
        numeric = (fp - fm) / (2.0 * h)
        denom = max(abs(numeric), abs(ana[i]), 1e-8)
        worst = max(worst, abs(numeric - ana[i]) / denom)
    return worst
