"""Dense-tensor numerics with a tape-based reverse-mode differentiation engine.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is active
(and touching at least one tensor that requires a gradient) are recorded; the
tape is replayed in reverse by :meth:`Tape.backward`, which accumulates into
``Param.grad``. Outside a tape every op is a plain numpy evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Param(Tensor):
    """A named, trainable tensor with a gradient buffer of identical shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> list[int]:
        """Propagate d(loss) back through the tape; returns visited record indices."""
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar or an explicit seed, got {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        visited = []
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            visited.append(idx)
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Param):
                    inp.grad += gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        return visited


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as an op output, registering ``backward`` on the active tape.

    ``backward(g)`` returns one gradient (or None) per input, each already
    reduced to that input's shape.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def backward(g):
        return (g / (1.0 + np.exp(-x)),)

    return record_op(out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); NaN propagates so divergence stays visible."""
    d = x.data
    mask = d > 0
    return record_op(np.maximum(d, 0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return record_op(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def reverse_axis(x: Tensor, axis: int) -> Tensor:
    """Flip ``x`` along ``axis``: index i maps to extent-1-i."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return record_op(np.flip(x.data, axis), (x,), lambda g: (np.flip(g, axis),))


def take(x: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    ax = axis % x.ndim

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * ax + (idx,), g)
        return (gx,)

    return record_op(np.take(x.data, idx, axis=ax), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    ax = axis % xs[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return record_op(np.concatenate([t.data for t in xs], axis=ax), tuple(xs),
                     lambda g: tuple(np.split(g, bounds, axis=ax)))


# ---------------------------------------------------------------------------
# linear algebra


def _mm_last(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """a [..., K] @ m [K, N] as one 2-D GEMM (stacked matmul is far slower)."""
    return (a.reshape(-1, a.shape[-1]) @ m).reshape(a.shape[:-1] + (m.shape[1],))


def linear_map(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with the first axis of ``w`` (no bias)."""
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear_map: cannot apply weight {w.shape} to input {x.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = _mm_last(g, wd.T)
        gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        return gx, gw

    return record_op(_mm_last(xd, wd), (x, w), backward)


def pointwise_conv1d(x: Tensor, k: Tensor) -> Tensor:
    """Width-1 convolution over the channel axis of a [..., V, T, C] tensor."""
    if k.ndim == 3:
        if k.shape[0] != 1:
            raise ShapeError(f"pointwise_conv1d needs kernel width 1, got {k.shape}")
        k = reshape(k, k.shape[1:])
    return linear_map(x, k)


def axis_matmul(m: Tensor, x: Tensor, axis: int) -> Tensor:
    """Left-multiply ``x`` by matrix ``m`` along ``axis``.

    out[..., v, ...] = sum_u m[v, u] * x[..., u, ...]
    """
    ax = axis % x.ndim
    if m.ndim != 2 or m.shape[1] != x.shape[ax]:
        raise ShapeError(f"axis_matmul: matrix {m.shape} vs axis {ax} of {x.shape}")
    md = m.data
    xm = np.moveaxis(x.data, ax, -1)  # [..., U]
    out = np.moveaxis(_mm_last(xm, md.T), -1, ax)

    def backward(g):
        gm_ = np.moveaxis(g, ax, -1)  # [..., V]
        gx = np.moveaxis(_mm_last(gm_, md), -1, ax)
        gmat = gm_.reshape(-1, md.shape[0]).T @ xm.reshape(-1, md.shape[1])
        return gmat, gx

    return record_op(out, (m, x), backward)


def temporal_conv(x: Tensor, k: Tensor) -> Tensor:
    """Zero-padded 'same' convolution along axis -2 of [..., T, Cin].

    ``k`` has shape [W, Cin, Cout] with odd W; tap w reads frame t + w - W//2.
    """
    width, cin, cout = k.shape
    if width % 2 != 1 or x.shape[-1] != cin:
        raise ShapeError(f"temporal_conv: kernel {k.shape} vs input {x.shape}")
    pad = width // 2
    t = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    kd = k.data
    out = np.zeros(x.shape[:-1] + (cout,), dtype=x.dtype)
    for w in range(width):
        out += _mm_last(xp[..., w:w + t, :], kd[w])

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        g2 = g.reshape(-1, cout)
        for w in range(width):
            gxp[..., w:w + t, :] += _mm_last(g, kd[w].T)
            gk[w] = xp[..., w:w + t, :].reshape(-1, cin).T @ g2
        return gxp[..., pad:pad + t, :], gk

    return record_op(out, (x, k), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis vector (population variance), then scale and shift."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        gbeta = g.reshape(-1, c).sum(axis=0)
        return gx, ggamma, gbeta

    return record_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of [B, K] logits against integer labels."""
    z = logits.data
    y = np.asarray(labels, dtype=np.intp)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"cross entropy: logits {z.shape} vs labels {y.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), y].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (p * (g / n),)

    return record_op(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# initialization


def uniform_param(name: str, shape: Sequence[int], fan_in: int,
                  rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Param:
    bound = math.sqrt(1.0 / fan_in)
    return Param(name, rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype))


def constant_param(name: str, shape: Sequence[int], value: float, dtype=DEFAULT_DTYPE) -> Param:
    return Param(name, np.full(tuple(shape), value, dtype=dtype))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: str = ""
    per_param: dict[str, float] = field(default_factory=dict)
    failure: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} max_rel_err={self.max_rel_error:.3e} worst={self.worst}"
        return msg + (f" ({self.failure})" if self.failure else "")


def grad_check(f: Callable[[], Tensor], params: Iterable[Param], eps: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    All params must be float64.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params; {p.name} is {p.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if np.size(loss.data) != 1:
        raise ShapeError(f"grad_check needs a scalar objective, got shape {np.shape(loss.data)}")
    if not np.isfinite(loss.data).all():
        return GradCheckReport(False, math.inf, failure="non-finite value at unperturbed point")
    tape.backward(loss)

    report = GradCheckReport(True, 0.0)
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().data.item()
            flat[i] = orig - eps
            lo = f().data.item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                return GradCheckReport(False, math.inf, worst=p.name,
                                       per_param=report.per_param,
                                       failure=f"non-finite value perturbing {p.name}[{i}]")
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.per_param[p.name] = worst
        if worst > report.max_rel_error:
            report.max_rel_error = worst
            report.worst = p.name
    report.passed = report.max_rel_error <= tol
    return report
