"""Topology-aware aggregation of scan outputs and the gated fusion that combines them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn_core as nn
from .nn_core import Param, Tensor
from .resources import read_edges


def adjacency_matrix(edges: Iterable[tuple[int, int]], num_joints: int) -> np.ndarray:
    """Symmetric 0/1 bone adjacency without self-loops."""
    adj = np.zeros((num_joints, num_joints))
    for i, j in edges:
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise ValueError(f"edge ({i}, {j}) outside 0..{num_joints - 1}")
        adj[i, j] = adj[j, i] = 1.0
    return adj


def load_adjacency(path: str | Path = "ntu25.edges", num_joints: int = 25) -> np.ndarray:
    return adjacency_matrix(read_edges(path), num_joints)


def symmetric_normalized(adj: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2."""
    a = adj + np.eye(adj.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def row_normalized(adj: np.ndarray) -> np.ndarray:
    """D^-1 (A + I); rows sum to one."""
    a = adj + np.eye(adj.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def topology_aggregate(x: Tensor, a: Tensor, alpha: Tensor, gamma: Param, beta: Param,
                       eps: float = 1e-5, normalize: bool = True) -> Tensor:
    """layer_norm(alpha * (A @_joints x) + x) for x [..., V, T, C'].

    ``normalize=False`` returns the pre-normalization value.
    """
    v = x.shape[-3]
    if a.shape != (v, v):
        raise nn.ShapeError(f"topology {a.shape} does not match {v} joints")
    pre = nn.add(nn.mul(nn.axis_matmul(a, x, -3), alpha), x)
    return nn.layer_norm(pre, gamma, beta, eps) if normalize else pre


@dataclass
class FusionInputs:
    x_p: Tensor        # parts scan output
    x_s: Tensor        # body scan output
    x_p_graph: Tensor  # topology-aggregated parts
    x_s_graph: Tensor  # topology-aggregated body
    x_g: Tensor        # ReLU gate

    def __post_init__(self):
        shapes = {t.shape for t in (self.x_p, self.x_s, self.x_p_graph, self.x_s_graph, self.x_g)}
        if len(shapes) != 1:
            raise nn.ShapeError(f"fusion inputs disagree in shape: {sorted(shapes)}")


def self_fusion(f: FusionInputs) -> Tensor:
    return nn.add(nn.mul(f.x_p, f.x_g), nn.mul(f.x_s, f.x_g))


def cross_fusion(f: FusionInputs) -> Tensor:
    return nn.add(nn.mul(f.x_p_graph, f.x_s), nn.mul(f.x_p, f.x_s_graph))


def gated_fusion(f: FusionInputs, w_f: Param) -> Tensor:
    """Up-project the sum of self- and cross-fusion products to width C."""
    return nn.linear_map(nn.add(self_fusion(f), cross_fusion(f)), w_f)
