"""Selective state-space scan.

Recurrence per channel c and state s, over the sequence axis (-2 of x):

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t = sum_s C_t[s] * h_t[c, s] + D * x_t

with delta, B, C computed from x itself (input-dependent selection).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .nn_core import Param, Tensor, record_op

_FAULTS = {"combine_sign": False}


@contextlib.contextmanager
def inject_combine_fault():
    """Flip the sign of the carried term in the chunked combine (mutation testing only)."""
    _FAULTS["combine_sign"] = True
    try:
        yield
    finally:
        _FAULTS["combine_sign"] = False


# ---------------------------------------------------------------------------
# raw recurrence kernels; arrays are [L, ...] with the scan on axis 0


def scan_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h_t = a_t * h_{t-1} + u_t with h_{-1} = 0."""
    h = np.empty_like(u)
    h[0] = u[0]
    for t in range(1, u.shape[0]):
        np.multiply(a[t], h[t - 1], out=h[t])
        h[t] += u[t]
    return h


def scan_chunked(a: np.ndarray, u: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence via chunk-local scans joined by the associative combine.

    (a2, b2) o (a1, b1) = (a2 * a1, a2 * b1 + b2). Every full chunk is scanned
    from a zero state, all chunks at once, while tracking its running decay
    product; chunk summaries are then folded left to give each chunk its
    incoming state. A partial trailing chunk is finished sequentially.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    length = u.shape[0]
    rest = u.shape[1:]
    n_chunks = length // chunk
    main = n_chunks * chunk
    h = np.empty_like(u)
    prev = np.zeros(rest, dtype=u.dtype)
    if n_chunks:
        # chunk-position-major copies keep every step a contiguous slab
        shape = (n_chunks, chunk) + rest
        am = a[:main].reshape(shape).swapaxes(0, 1).copy()
        hm = u[:main].reshape(shape).swapaxes(0, 1).copy()
        decay = am  # overwritten in place with running products
        for j in range(1, chunk):
            hm[j] += am[j] * hm[j - 1]
            decay[j] *= decay[j - 1]
        carry = np.empty((n_chunks,) + rest, dtype=u.dtype)
        sign = -1 if _FAULTS["combine_sign"] else 1
        last_h, last_d = hm[-1], decay[-1]
        for c in range(n_chunks):
            carry[c] = prev
            prev = last_h[c] + sign * (last_d[c] * prev)
        decay *= carry
        hm += decay
        h[:main].reshape(shape)[...] = hm.swapaxes(0, 1)
    for t in range(main, length):
        prev = a[t] * prev + u[t]
        h[t] = prev
    return h


def _run_scan(a: np.ndarray, u: np.ndarray, chunk: int | None) -> np.ndarray:
    if chunk is None:
        return scan_sequential(a, u)
    return scan_chunked(a, u, chunk)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class SsmParams:
    """Selective-SSM weights for one scan direction."""

    a_log: Param       # [C, S]; A = -exp(a_log)
    w_delta: Param     # [C, 1]
    delta_bias: Param  # [C]
    w_b: Param         # [C, S]
    w_c: Param         # [C, S]
    d_skip: Param      # [C]

    @classmethod
    def init(cls, prefix: str, channels: int, state_size: int,
             rng: np.random.Generator, dtype=nn.DEFAULT_DTYPE) -> "SsmParams":
        if state_size < 1 or channels < 1:
            raise ValueError("channels and state_size must be >= 1")
        a_log = np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1)))
        # softplus(bias) log-uniform in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=channels))
        bias = dt + np.log(-np.expm1(-dt))
        return cls(
            a_log=Param(f"{prefix}.a_log", a_log.astype(dtype)),
            w_delta=nn.uniform_param(f"{prefix}.w_delta", (channels, 1), 1, rng, dtype),
            delta_bias=Param(f"{prefix}.delta_bias", bias.astype(dtype)),
            w_b=nn.uniform_param(f"{prefix}.w_b", (channels, state_size), channels, rng, dtype),
            w_c=nn.uniform_param(f"{prefix}.w_c", (channels, state_size), channels, rng, dtype),
            d_skip=nn.constant_param(f"{prefix}.d_skip", (channels,), 1.0, dtype),
        )

    @property
    def channels(self) -> int:
        return self.w_b.shape[0]

    @property
    def state_size(self) -> int:
        return self.w_b.shape[1]

    def parameters(self) -> list[Param]:
        return [self.a_log, self.w_delta, self.delta_bias, self.w_b, self.w_c, self.d_skip]


def state_matrix(p: SsmParams) -> Tensor:
    """A = -exp(a_log), strictly negative."""
    return nn.neg(nn.exp(p.a_log))


# ---------------------------------------------------------------------------
# discretization


def _discretize_arrays(delta, a, b_t):
    a_bar = np.exp(delta[..., :, None] * a)
    b_bar = delta[..., :, None] * b_t[..., None, :]
    return a_bar, b_bar


def discretize(delta, a, b_t) -> tuple[Tensor, Tensor]:
    """Zero-order hold on A, Euler step on B.

    delta [..., L, C], a [C, S], b_t [..., L, S] ->
    a_bar = exp(delta * a), b_bar = delta * b_t, both [..., L, C, S].
    """
    delta, a, b_t = nn.as_tensor(delta), nn.as_tensor(a), nn.as_tensor(b_t)
    if np.any(delta.data <= 0):
        raise ValueError("discretize: step size delta must be strictly positive")
    d4 = nn.reshape(delta, delta.shape + (1,))
    a_bar = nn.exp(nn.mul(d4, a))
    b_bar = nn.mul(d4, nn.reshape(b_t, b_t.shape[:-1] + (1, b_t.shape[-1])))
    return a_bar, b_bar


# ---------------------------------------------------------------------------
# fused differentiable scan


def ssm_core(x: Tensor, delta: Tensor, a: Tensor, b_t: Tensor, c_t: Tensor,
             chunk: int | None = None) -> Tensor:
    """Discretize, run the recurrence, and read out (skip term excluded).

    x, delta: [..., L, C]; a: [C, S]; b_t, c_t: [..., L, S] -> [..., L, C].
    Internally the sequence axis is moved to the front; only the hidden
    states are kept for the backward pass.
    """
    xd, dd, bd, cd = (np.ascontiguousarray(np.moveaxis(t.data, -2, 0)) for t in (x, delta, b_t, c_t))
    ad = a.data
    a_bar, u = _discretize_arrays(dd, ad, bd)
    u *= xd[..., None]
    h = _run_scan(a_bar, u, chunk)  # [L, ..., C, S]
    y = (h @ cd[..., None])[..., 0]

    def backward(gy):
        gy = np.ascontiguousarray(np.moveaxis(gy, -2, 0))
        a_bar = np.exp(dd[..., None] * ad)
        # adjoint: lam_t = dy_t/dh_t + a_bar_{t+1} * lam_{t+1}
        a_next = np.empty_like(a_bar)
        a_next[:-1] = a_bar[1:]
        a_next[-1] = 0
        lam = _run_scan(a_next[::-1], (gy[..., None] * cd[..., None, :])[::-1], chunk)[::-1]
        del a_next
        g_c = (gy[..., None, :] @ h)[..., 0, :]
        g_abar = np.empty_like(h)
        g_abar[0] = 0
        np.multiply(lam[1:], h[:-1], out=g_abar[1:])
        g_abar *= a_bar
        del a_bar
        lam_b = (lam @ bd[..., None])[..., 0]
        g_delta = (g_abar * ad).sum(-1) + lam_b * xd
        g_a = (g_abar * dd[..., None]).reshape((-1,) + ad.shape).sum(axis=0)
        g_b = ((dd * xd)[..., None, :] @ lam)[..., 0, :]
        g_x = lam_b * dd
        back = (lambda g: np.moveaxis(g, 0, -2))
        return back(g_x), back(g_delta), g_a, back(g_b), back(g_c)

    return record_op(np.moveaxis(y, 0, -2).astype(x.dtype, copy=False),
                     (x, delta, a, b_t, c_t), backward)


def selection(x: Tensor, p: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (delta, B_t, C_t) for a [..., L, C] sequence."""
    pre = nn.add(nn.mul(x, nn.reshape(p.w_delta, (p.channels,))), p.delta_bias)
    return nn.softplus(pre), nn.linear_map(x, p.w_b), nn.linear_map(x, p.w_c)


def _scan(x, p: SsmParams, chunk, delta=None, b=None, c=None) -> Tensor:
    x = nn.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != p.channels:
        raise nn.ShapeError(f"scan input {x.shape} does not match {p.channels} channels")
    if delta is None or b is None or c is None:
        d_sel, b_sel, c_sel = selection(x, p)
        delta = d_sel if delta is None else delta
        b = b_sel if b is None else b
        c = c_sel if c is None else c
    delta, b, c = (nn.as_tensor(t, x.dtype) for t in (delta, b, c))
    y = ssm_core(x, delta, state_matrix(p), b, c, chunk)
    return nn.add(y, nn.mul(x, p.d_skip))


def selective_scan_seq(x, p: SsmParams, *, delta=None, b=None, c=None) -> Tensor:
    """Reference sequential scan over axis -2 of x [..., L, C].

    ``delta``/``b``/``c`` override the input-dependent selection when given
    (shapes [..., L, C] / [..., L, S] / [..., L, S]).
    """
    return _scan(x, p, None, delta, b, c)


def selective_scan_parallel(x, p: SsmParams, chunk: int, *, delta=None, b=None, c=None) -> Tensor:
    """Chunked associative scan; mathematically identical to :func:`selective_scan_seq`."""
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    return _scan(x, p, chunk, delta, b, c)


def selective_scan(x, p: SsmParams, chunk: int | None = None) -> Tensor:
    return _scan(x, p, chunk)


def bidirectional_scan(x, p_fwd: SsmParams, p_bwd: SsmParams, chunk: int | None = None) -> Tensor:
    """Forward scan plus the re-reversed scan of the reversed sequence."""
    if (p_fwd.channels, p_fwd.state_size) != (p_bwd.channels, p_bwd.state_size):
        raise nn.ShapeError("forward and backward SSMs must share channels and state size")
    x = nn.as_tensor(x)
    fwd = selective_scan(x, p_fwd, chunk)
    bwd = nn.reverse_axis(selective_scan(nn.reverse_axis(x, -2), p_bwd, chunk), -2)
    return nn.add(fwd, bwd)
