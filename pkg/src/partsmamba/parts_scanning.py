"""Projected spatial streams, part-wise and body-level bidirectional scans, ReLU gate."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .nn_core import Param, Tensor
from .resources import read_table
from .ssm_scan import SsmParams, bidirectional_scan

Direction = tuple[SsmParams, SsmParams]


@dataclass(frozen=True)
class PartPartition:
    """Disjoint joint subsets covering the skeleton; each list is a scan order."""

    names: tuple[str, ...]
    parts: tuple[tuple[int, ...], ...]
    num_joints: int

    def __post_init__(self):
        if len(self.names) != len(self.parts):
            raise ValueError("one name per part required")
        seen: set[int] = set()
        for name, part in zip(self.names, self.parts):
            if not part:
                raise ValueError(f"part {name!r} is empty")
            for j in part:
                if not 0 <= j < self.num_joints:
                    raise ValueError(f"part {name!r}: joint {j} outside 0..{self.num_joints - 1}")
                if j in seen:
                    raise ValueError(f"joint {j} appears in more than one part")
                seen.add(j)
        if len(seen) != self.num_joints:
            missing = sorted(set(range(self.num_joints)) - seen)
            raise ValueError(f"partition does not cover joints {missing}")

    @classmethod
    def from_lists(cls, parts: Sequence[Sequence[int]], num_joints: int,
                   names: Sequence[str] | None = None) -> "PartPartition":
        names = tuple(names) if names is not None else tuple(f"part{i}" for i in range(len(parts)))
        return cls(names, tuple(tuple(int(j) for j in p) for p in parts), num_joints)

    @classmethod
    def load(cls, path: str | Path = "ntu25.parts", num_joints: int | None = None) -> "PartPartition":
        rows = read_table(path)
        total = sum(len(ids) for _, ids in rows)
        return cls.from_lists([ids for _, ids in rows], num_joints or total,
                              [name for name, _ in rows])

    def to_text(self) -> str:
        return "".join(f"{n}: {' '.join(map(str, p))}\n" for n, p in zip(self.names, self.parts))

    def part_of(self, joint: int) -> int:
        for i, part in enumerate(self.parts):
            if joint in part:
                return i
        raise KeyError(joint)

    @property
    def order(self) -> tuple[int, ...]:
        """All joints, part after part, in scan order."""
        return tuple(j for part in self.parts for j in part)


@dataclass
class SpatialStreams:
    x_p: Tensor
    x_s: Tensor
    x_g: Tensor


def project_streams(x_gcn: Tensor, w_p: Param, w_s: Param, w_g: Param,
                    norm_p: tuple[Param, Param], norm_s: tuple[Param, Param],
                    norm_g: tuple[Param, Param], eps: float = 1e-5) -> SpatialStreams:
    """Down-project [..., V, T, C] features to three normalized C' streams.

    The gate stream is returned before its ReLU.
    """
    for w in (w_p, w_s, w_g):
        if w.shape[0] != x_gcn.shape[-1] or w.shape[1] > w.shape[0]:
            raise nn.ShapeError(f"projection {w.shape} incompatible with input {x_gcn.shape}")
    return SpatialStreams(
        nn.layer_norm(nn.linear_map(x_gcn, w_p), *norm_p, eps),
        nn.layer_norm(nn.linear_map(x_gcn, w_s), *norm_s, eps),
        nn.layer_norm(nn.linear_map(x_gcn, w_g), *norm_g, eps),
    )


def part_wise_scan(x_p: Tensor, partition: PartPartition, ssms: Sequence[Direction],
                   mix: Param, chunk: int | None = None) -> Tensor:
    """Independent bidirectional scans per part within each frame, then channel mixing.

    x_p is [..., V, T, C']. Each part's output is written back to its own joints.
    """
    if x_p.shape[-3] != partition.num_joints:
        raise nn.ShapeError(f"partition covers {partition.num_joints} joints, input has {x_p.shape[-3]}")
    if len(ssms) != len(partition.parts):
        raise ValueError(f"need {len(partition.parts)} SSM pairs, got {len(ssms)}")
    frames = nn.swapaxes(x_p, -3, -2)  # [..., T, V, C']
    outs = [bidirectional_scan(nn.take(frames, part, axis=-2), fwd, bwd, chunk)
            for part, (fwd, bwd) in zip(partition.parts, ssms)]
    stacked = nn.concat(outs, axis=-2)
    restored = nn.take(stacked, np.argsort(partition.order), axis=-2)
    return nn.pointwise_conv1d(nn.swapaxes(restored, -3, -2), mix)


def body_scan(x_s: Tensor, ssm: Direction, chunk: int | None = None) -> Tensor:
    """Bidirectional scan over all joints of every frame in canonical order."""
    frames = nn.swapaxes(x_s, -3, -2)
    return nn.swapaxes(bidirectional_scan(frames, ssm[0], ssm[1], chunk), -3, -2)


def gate_stream(x_g: Tensor) -> Tensor:
    return nn.relu(x_g)
