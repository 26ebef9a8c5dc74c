"""Checkpoint container: text manifest followed by raw little-endian parameter payloads.

Layout::

    partsmamba-checkpoint <version>
    stage <gcn|hybrid>
    config <key> = <value>          (one line per config field)
    param <name> <dtype> <d0,d1,...> (scalar shape written as '-')
    end
    <payload bytes, parameters in manifest order>
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, PartsMamba

MAGIC = "partsmamba-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]  # insertion order = manifest order
    stage: str
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: PartsMamba, stage: str) -> "Checkpoint":
        return cls(model.config, {name: p.data.copy() for name, p in model.named_parameters().items()}, stage)

    def build_model(self) -> PartsMamba:
        model = PartsMamba(self.config)
        model.load_arrays(self.params)
        return model


def _shape_text(shape) -> str:
    return ",".join(map(str, shape)) if shape else "-"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    lines = [f"{MAGIC} {ckpt.version}", f"stage {ckpt.stage}"]
    lines += [f"config {line}" for line in ckpt.config.to_text().splitlines()]
    for name, arr in ckpt.params.items():
        lines.append(f"param {name} {arr.dtype.name} {_shape_text(arr.shape)}")
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in ckpt.params.values():
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a partsmamba checkpoint")
    try:
        header = blob[:cut].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: manifest is not ASCII") from None
    payload = memoryview(blob)[cut + len(marker):]
    magic, _, version = header[0].partition(" ")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a partsmamba checkpoint")
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format version {version}")
    stage = ""
    config_lines = []
    table = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "stage":
            stage = rest
        elif kind == "config":
            config_lines.append(rest)
        elif kind == "param":
            try:
                name, dtype, shape = rest.split(" ")
                dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
                table.append((name, np.dtype(dtype).newbyteorder("<"), dims))
            except (ValueError, TypeError):
                raise CheckpointError(f"{path}: malformed parameter line {line!r}") from None
        else:
            raise CheckpointError(f"{path}: unexpected manifest line {line!r}")
    try:
        config = ModelConfig.from_text("\n".join(config_lines))
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad config in manifest: {exc}") from None
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, dtype, dims in table:
        if name in params:
            raise CheckpointError(f"{path}: parameter {name} listed twice")
        count = int(np.prod(dims, dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name}")
        params[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return Checkpoint(config, params, stage, int(version))
