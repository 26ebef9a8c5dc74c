"""Unidirectional temporal Mamba block with sub-frame (spatial-temporal) scan ordering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .nn_core import Param, Tensor
from .ssm_scan import SsmParams, selective_scan


class ConfigError(ValueError):
    pass


def st_reorder(x: Tensor, n: int) -> Tensor:
    """[..., T, V, C] -> [..., T*n, (V/n)*C].

    Each frame is cut into n runs of V/n consecutive joints; tokens are ordered
    (frame, section) lexicographically and carry the flattened section features.
    """
    *lead, t, v, c = x.shape
    if n < 1 or v % n:
        raise ConfigError(f"sub-frame count {n} must divide the joint count {v}")
    return nn.reshape(x, (*lead, t * n, (v // n) * c))


def st_restore(y: Tensor, n: int, num_joints: int) -> Tensor:
    """Inverse of :func:`st_reorder` for a known joint count."""
    *lead, length, width = y.shape
    if n < 1 or num_joints % n or length % n or width % (num_joints // n):
        raise ConfigError(f"cannot restore shape {y.shape} with n={n}, V={num_joints}")
    section = num_joints // n
    return nn.reshape(y, (*lead, length // n, num_joints, width // section))


@dataclass
class TemporalParams:
    norm: tuple[Param, Param]  # over the (V/n)*C token
    w_in: Param                # [(V/n)*C, E]
    ssm: SsmParams             # E channels
    w_out: Param               # [E, (V/n)*C]

    @classmethod
    def init(cls, prefix: str, token_dim: int, inner: int, state_size: int,
             rng: np.random.Generator, dtype=nn.DEFAULT_DTYPE) -> "TemporalParams":
        return cls(
            norm=(nn.constant_param(f"{prefix}.norm.gamma", (token_dim,), 1.0, dtype),
                  nn.constant_param(f"{prefix}.norm.beta", (token_dim,), 0.0, dtype)),
            w_in=nn.uniform_param(f"{prefix}.w_in", (token_dim, inner), token_dim, rng, dtype),
            ssm=SsmParams.init(f"{prefix}.ssm", inner, state_size, rng, dtype),
            w_out=nn.uniform_param(f"{prefix}.w_out", (inner, token_dim), inner, rng, dtype),
        )

    def parameters(self) -> list[Param]:
        return [*self.norm, self.w_in, *self.ssm.parameters(), self.w_out]


def temporal_block(x: Tensor, params: TemporalParams, n: int, chunk: int | None = None,
                   joint_order: Sequence[int] | None = None) -> Tensor:
    """Residual unidirectional scan over the (frame, section) token path.

    x is [..., V, T, C]. ``joint_order`` optionally permutes joints before
    sectioning (e.g. part-major order); the permutation is undone afterwards.
    """
    v = x.shape[-3]
    h = nn.swapaxes(x, -3, -2)  # [..., T, V, C]
    if joint_order is not None:
        h = nn.take(h, joint_order, axis=-2)
    tokens = st_reorder(h, n)
    z = nn.layer_norm(tokens, *params.norm)
    z = nn.linear_map(selective_scan(nn.linear_map(z, params.w_in), params.ssm, chunk), params.w_out)
    h = st_restore(z, n, v)
    if joint_order is not None:
        h = nn.take(h, np.argsort(joint_order), axis=-2)
    return nn.add(nn.swapaxes(h, -3, -2), x)
