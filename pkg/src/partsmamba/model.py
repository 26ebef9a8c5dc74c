"""Full network: graph-convolution head, K spatial-temporal blocks, pooled classifier."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .graph_fusion import (FusionInputs, gated_fusion, load_adjacency, row_normalized,
                           symmetric_normalized, topology_aggregate)
from .nn_core import Param, Tensor
from .parts_scanning import PartPartition, body_scan, gate_stream, part_wise_scan, project_streams
from .ssm_scan import SsmParams
from .temporal_encoder import ConfigError, TemporalParams, temporal_block

OCCLUSION_POLICIES = ("none", "parts-masked")


@dataclass
class ModelConfig:
    """Every model dimension and training hyperparameter; serializes as ``key = value`` text."""

    num_joints: int = 25
    window: int = 64
    channels: int = 64
    inner_channels: int = 0          # 0 -> channels // 2
    state_size: int = 8
    blocks: int = 2
    sections: int = 5
    num_classes: int = 4
    head_kernel: int = 5
    partition: str = "ntu25.parts"
    adjacency: str = "ntu25.edges"
    occlusion_table: str = "ntu25.occlusion"
    seed: int = 0
    dtype: str = "float32"
    scan_chunk: int = 16             # 0 -> sequential scan
    tie_gate_projection: bool = False
    tie_directions: bool = False
    section_order: str = "canonical"  # or "parts"
    # training
    epochs_gcn: int = 20
    epochs_hybrid: int = 200
    batch_size: int = 16
    optimizer: str = "adam"          # or "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    cosine_decay: bool = False
    occlusion_policy: str = "none"
    target_accuracy: float = 0.0     # > 0 stops a stage once running accuracy reaches it

    def __post_init__(self):
        if self.inner_channels == 0:
            self.inner_channels = self.channels // 2
        self.validate()

    def validate(self) -> None:
        if self.inner_channels < 1 or self.inner_channels > self.channels:
            raise ConfigError(f"inner_channels must be in 1..channels, got {self.inner_channels}")
        if self.sections < 1 or self.num_joints % self.sections:
            raise ConfigError(f"sections ({self.sections}) must divide num_joints ({self.num_joints})")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")
        for name in ("window", "channels", "state_size", "num_classes", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigError("head_kernel must be a positive odd integer")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer}")
        if self.occlusion_policy not in OCCLUSION_POLICIES:
            raise ConfigError(f"occlusion_policy must be one of {OCCLUSION_POLICIES}")
        if self.section_order not in ("canonical", "parts"):
            raise ConfigError("section_order must be canonical or parts")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def chunk(self) -> int | None:
        return self.scan_chunk or None

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(kinds[key], value, key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(kind: str, value: str, key: str):
    try:
        if kind == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError
            return value.lower() == "true"
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class HeadParams:
    w1: Param  # [3, C]
    w2: Param  # [C, C]
    wt: Param  # [kernel, C, C]

    def parameters(self) -> list[Param]:
        return [self.w1, self.w2, self.wt]


@dataclass
class SpatialParams:
    w_p: Param
    w_s: Param
    w_g: Param
    norm_p: tuple[Param, Param]
    norm_s: tuple[Param, Param]
    norm_g: tuple[Param, Param]
    parts: list[tuple[SsmParams, SsmParams]]
    body: tuple[SsmParams, SsmParams]
    mix: Param
    a_p: Param
    a_s: Param
    alpha: Param
    norm_pg: tuple[Param, Param]
    norm_sg: tuple[Param, Param]
    w_f: Param

    def parameters(self) -> list[Param]:
        out = [self.w_p, self.w_s, self.w_g, *self.norm_p, *self.norm_s, *self.norm_g]
        for fwd, bwd in [*self.parts, self.body]:
            out += fwd.parameters() + bwd.parameters()
        out += [self.mix, self.a_p, self.a_s, self.alpha, *self.norm_pg, *self.norm_sg, self.w_f]
        return _dedupe(out)


def _dedupe(params: list[Param]) -> list[Param]:
    seen: set[int] = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _norm(prefix: str, width: int, dtype) -> tuple[Param, Param]:
    return (nn.constant_param(f"{prefix}.gamma", (width,), 1.0, dtype),
            nn.constant_param(f"{prefix}.beta", (width,), 0.0, dtype))


def _direction_pair(prefix: str, width: int, state: int, tie: bool, rng, dtype):
    fwd = SsmParams.init(f"{prefix}.fwd", width, state, rng, dtype)
    bwd = fwd if tie else SsmParams.init(f"{prefix}.bwd", width, state, rng, dtype)
    return fwd, bwd


# ---------------------------------------------------------------------------
# layers


def gcn_head(x: Tensor, params: HeadParams, a_hat: Tensor) -> Tensor:
    """[..., V, T, 3] -> [..., V, T, C]: two graph convolutions then a temporal convolution."""
    if x.shape[-1] != 3:
        raise nn.ShapeError(f"head expects xyz input, got trailing extent {x.shape[-1]}")
    h = nn.relu(nn.axis_matmul(a_hat, nn.linear_map(x, params.w1), -3))
    h = nn.axis_matmul(a_hat, nn.linear_map(h, params.w2), -3)
    return nn.relu(nn.temporal_conv(h, params.wt))


def spatial_fusion_block(x: Tensor, params: SpatialParams, partition: PartPartition,
                         chunk: int | None = None, parts_gate_only: bool = False) -> Tensor:
    """Projected streams -> part/body scans + gate -> topology aggregation -> gated fusion, residual.

    ``parts_gate_only`` keeps only the parts*gate product inside the fusion
    (a probe used to verify part locality).
    """
    streams = project_streams(x, params.w_p, params.w_s, params.w_g,
                              params.norm_p, params.norm_s, params.norm_g)
    x_p = part_wise_scan(streams.x_p, partition, params.parts, params.mix, chunk)
    x_g = gate_stream(streams.x_g)
    if parts_gate_only:
        return nn.add(nn.linear_map(nn.mul(x_p, x_g), params.w_f), x)
    x_s = body_scan(streams.x_s, params.body, chunk)
    fused = gated_fusion(FusionInputs(
        x_p=x_p,
        x_s=x_s,
        x_p_graph=topology_aggregate(x_p, params.a_p, params.alpha, *params.norm_pg),
        x_s_graph=topology_aggregate(x_s, params.a_s, params.alpha, *params.norm_sg),
        x_g=x_g,
    ), params.w_f)
    return nn.add(fused, x)


class PartsMamba:
    """Parameters plus forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        dtype = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        self.partition = PartPartition.load(cfg.partition, cfg.num_joints)
        adj = load_adjacency(cfg.adjacency, cfg.num_joints)
        self.a_hat = Tensor(row_normalized(adj).astype(dtype))
        graph = symmetric_normalized(adj).astype(dtype)
        self.joint_order = self.partition.order if cfg.section_order == "parts" else None

        c, ci, s = cfg.channels, cfg.inner_channels, cfg.state_size
        self.head = HeadParams(
            w1=nn.uniform_param("head.w1", (3, c), 3, rng, dtype),
            w2=nn.uniform_param("head.w2", (c, c), c, rng, dtype),
            wt=nn.uniform_param("head.wt", (cfg.head_kernel, c, c), cfg.head_kernel * c, rng, dtype),
        )
        self.spatial: list[SpatialParams] = []
        self.temporal: list[TemporalParams] = []
        token = (cfg.num_joints // cfg.sections) * c
        for k in range(cfg.blocks):
            pre = f"block{k}.spatial"
            w_s = nn.uniform_param(f"{pre}.w_s", (c, ci), c, rng, dtype)
            self.spatial.append(SpatialParams(
                w_p=nn.uniform_param(f"{pre}.w_p", (c, ci), c, rng, dtype),
                w_s=w_s,
                w_g=w_s if cfg.tie_gate_projection else nn.uniform_param(f"{pre}.w_g", (c, ci), c, rng, dtype),
                norm_p=_norm(f"{pre}.norm_p", ci, dtype),
                norm_s=_norm(f"{pre}.norm_s", ci, dtype),
                norm_g=_norm(f"{pre}.norm_g", ci, dtype),
                parts=[_direction_pair(f"{pre}.parts.{name}", ci, s, cfg.tie_directions, rng, dtype)
                       for name in self.partition.names],
                body=_direction_pair(f"{pre}.body", ci, s, cfg.tie_directions, rng, dtype),
                mix=nn.uniform_param(f"{pre}.mix", (ci, ci), ci, rng, dtype),
                a_p=Param(f"{pre}.a_p", graph.copy()),
                a_s=Param(f"{pre}.a_s", graph.copy()),
                alpha=nn.constant_param(f"{pre}.alpha", (), 0.0, dtype),
                norm_pg=_norm(f"{pre}.norm_pg", ci, dtype),
                norm_sg=_norm(f"{pre}.norm_sg", ci, dtype),
                w_f=nn.uniform_param(f"{pre}.w_f", (ci, c), ci, rng, dtype),
            ))
            self.temporal.append(TemporalParams.init(f"block{k}.temporal", token, 2 * c, s, rng, dtype))
        self.classifier = nn.uniform_param("classifier.w", (c, cfg.num_classes), c, rng, dtype)

    # -- parameters -------------------------------------------------------

    def parameters(self, stage: str = "hybrid") -> list[Param]:
        out = self.head.parameters()
        if stage == "hybrid":
            for sp, tp in zip(self.spatial, self.temporal):
                out += sp.parameters() + tp.parameters()
        out.append(self.classifier)
        return _dedupe(out)

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict and set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, value in arrays.items():
            p = params[name]
            if value.shape != p.shape:
                raise nn.ShapeError(f"{name}: stored {value.shape}, model {p.shape}")
            p.data = np.array(value, dtype=p.dtype)
            p.zero_grad()

    # -- forward ----------------------------------------------------------

    def features(self, clip, stage: str = "hybrid") -> Tensor:
        x = nn.as_tensor(clip)
        if x.dtype != self.config.np_dtype:
            x = Tensor(x.data.astype(self.config.np_dtype))
        h = gcn_head(x, self.head, self.a_hat)
        if stage == "hybrid":
            for sp, tp in zip(self.spatial, self.temporal):
                h = spatial_fusion_block(h, sp, self.partition, self.config.chunk)
                h = temporal_block(h, tp, self.config.sections, self.config.chunk, self.joint_order)
        return h

    def __call__(self, clip, stage: str = "hybrid") -> Tensor:
        return model_forward(clip, self, stage)


def model_forward(clip, model: PartsMamba, stage: str = "hybrid") -> Tensor:
    """Logits [..., num_classes] for clip(s) shaped [..., V, T, 3].

    ``stage="gcn"`` skips the spatial-temporal blocks (head + classifier only).
    """
    if stage not in ("gcn", "hybrid"):
        raise ValueError(f"unknown stage {stage!r}")
    h = model.features(clip, stage)
    pooled = nn.mean(h, axis=(-3, -2))
    return nn.linear_map(pooled, model.classifier)


# ---------------------------------------------------------------------------
# analytic cost model

# elementwise costs in multiply-add units
_LAYER_NORM = 5   # centre, square, scale, affine (2)
_SCAN_SELECT = 1  # delta projection + softplus, per channel (plus 2*S for B and C below)
_SCAN_DISCRETIZE = 2  # exp(delta*A) and delta*B, per channel-state


@dataclass(frozen=True)
class FlopBreakdown:
    head: int
    spatial: int
    temporal: int
    classifier: int
    per_block: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.head + self.spatial + self.temporal + self.classifier


def scan_cost(length: int, channels: int, state: int) -> int:
    """Multiply-adds for one selective scan direction over ``length`` steps."""
    select = channels * _SCAN_SELECT + 2 * channels * state
    discretize = _SCAN_DISCRETIZE * channels * state + channels * state  # last term: b_bar * x
    update = 2 * state * channels
    readout = state * channels + channels  # C.h plus skip
    return length * (select + discretize + update + readout)


def head_cost(cfg: ModelConfig) -> int:
    v, t, c = cfg.num_joints, cfg.window, cfg.channels
    m = v * t
    layer1 = v * v * t * c + m * 3 * c   # A_hat @ (X W1) with X W1 first
    layer2 = v * v * t * c + m * c * c
    tconv = m * cfg.head_kernel * c * c
    relus = 2 * m * c
    return layer1 + layer2 + tconv + relus


def classifier_cost(cfg: ModelConfig) -> int:
    return cfg.num_joints * cfg.window * cfg.channels + cfg.channels * cfg.num_classes


def spatial_cost(cfg: ModelConfig) -> int:
    v, t, c, ci, s = cfg.num_joints, cfg.window, cfg.channels, cfg.inner_channels, cfg.state_size
    m = v * t
    proj = 3 * (m * c * ci + _LAYER_NORM * m * ci)
    scans = 4 * t * scan_cost(v, ci, s) + 2 * m * ci  # parts fwd/bwd + body fwd/bwd, two direction sums
    mix = m * ci * ci
    gate = m * ci
    topo = 2 * (v * v * t * ci + 2 * m * ci + _LAYER_NORM * m * ci)
    fusion = 7 * m * ci + m * ci * c
    residual = m * c
    return proj + scans + mix + gate + topo + fusion + residual


def temporal_cost(cfg: ModelConfig) -> int:
    t, n, c = cfg.window, cfg.sections, cfg.channels
    length = t * n
    token = (cfg.num_joints // n) * c
    inner = 2 * c
    return (_LAYER_NORM * length * token + length * token * inner
            + scan_cost(length, inner, cfg.state_size)
            + length * inner * token + cfg.num_joints * t * c)


def flops_breakdown(cfg: ModelConfig, include_head: bool = True) -> FlopBreakdown:
    per_block = {"spatial": spatial_cost(cfg), "temporal": temporal_cost(cfg)}
    return FlopBreakdown(
        head=head_cost(cfg) if include_head else 0,
        spatial=cfg.blocks * per_block["spatial"],
        temporal=cfg.blocks * per_block["temporal"],
        classifier=classifier_cost(cfg),
        per_block=per_block,
    )


def flops_estimate(cfg: ModelConfig, include_head: bool = True) -> int:
    """Analytic multiply-add count of one forward pass on a single clip."""
    return flops_breakdown(cfg, include_head).total
