"""Optimizers and the two-step (head first, then hybrid) training procedure."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .checkpoint import Checkpoint
from .data_occlusion import SCENES, apply_mask, load_occlusion_table, mask_parts
from .model import ModelConfig, PartsMamba, model_forward
from .nn_core import Param

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: Sequence[Param], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1 - self.b1 ** self.step_count
        c2 = 1 - self.b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params: Sequence[Param], lr: float = 0.05, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, b in zip(self.params, self.buf):
            b *= self.momentum
            b += p.grad
            p.data -= (lr * b).astype(p.dtype)


def make_optimizer(cfg: ModelConfig, params: Sequence[Param]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr)
    return SGD(params, cfg.lr, cfg.momentum)


def learning_rate(cfg: ModelConfig, epoch: int, epochs: int) -> float:
    if not cfg.cosine_decay:
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / epochs))


@dataclass
class MetricsRecord:
    run: str                # "<stage>:<epoch>" for training, repetition id or "mean" for eval
    split: str
    occlusion: str
    loss: float
    accuracy: float
    seconds: float | None = None

    def to_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time or self.seconds is None:
            d.pop("seconds")
        return d


@dataclass
class TrainResult:
    gcn: Checkpoint
    hybrid: Checkpoint
    metrics: list[MetricsRecord]


def draw_training_masks(policy: str, n: int, v: int, t: int, rng: np.random.Generator,
                        table: dict | None = None) -> np.ndarray | None:
    """Per-sample visibility grids [n, V, T] for ``parts-masked``: each sample picks
    one of {no occlusion, the five part scenes} uniformly."""
    if policy == "none":
        return None
    table = table or load_occlusion_table()
    choices = rng.integers(0, len(SCENES) + 1, size=n)
    grids = np.ones((n, v, t), dtype=bool)
    for i, c in enumerate(choices):
        if c:
            grids[i] = mask_parts(SCENES[c - 1], table, v, t).visible
    return grids


def _run_stage(model: PartsMamba, stage: str, x: np.ndarray, y: np.ndarray, epochs: int,
               rng: np.random.Generator, table: dict, on_record: Callable | None) -> list[MetricsRecord]:
    cfg = model.config
    params = model.parameters(stage)
    opt = make_optimizer(cfg, params)
    records = []
    n = len(x)
    v, t = x.shape[1], x.shape[2]
    for epoch in range(epochs):
        start = time.perf_counter()
        lr = learning_rate(cfg, epoch, epochs)
        order = rng.permutation(n)
        grids = draw_training_masks(cfg.occlusion_policy, n, v, t, rng, table)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = x[idx] if grids is None else apply_mask(x[idx], grids[idx])
            for p in params:
                p.zero_grad()
            with nn.Tape() as tape:
                logits = model_forward(xb, model, stage)
                loss = nn.softmax_cross_entropy(logits, y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at stage {stage} epoch {epoch} "
                                    f"batch starting {lo}; lr={lr}")
            tape.backward(loss)
            opt.step(lr)
            total_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        rec = MetricsRecord(f"{stage}:{epoch}", "train", cfg.occlusion_policy,
                            total_loss / n, correct / n, time.perf_counter() - start)
        records.append(rec)
        log.info("stage=%s epoch=%d loss=%.4f acc=%.3f (%.1fs)", stage, epoch, rec.loss, rec.accuracy, rec.seconds)
        if on_record is not None:
            on_record(rec)
        if cfg.target_accuracy > 0 and rec.accuracy >= cfg.target_accuracy:
            break
    return records


def train_two_step(x: np.ndarray, y: np.ndarray, config: ModelConfig,
                   occlusion_policy: str | None = None,
                   on_record: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Stage 1 trains head + classifier; stage 2 trains everything from the stage-1 head.

    ``x`` is [N, V, T, 3], ``y`` integer labels.
    """
    if occlusion_policy is not None:
        config = config.replace(occlusion_policy=occlusion_policy)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if y.min() < 0 or y.max() >= config.num_classes:
        raise ValueError(f"labels must lie in 0..{config.num_classes - 1}")
    x = x.astype(config.np_dtype)
    rng = np.random.default_rng(config.seed)
    table = load_occlusion_table(config.occlusion_table)

    gcn_model = PartsMamba(config)
    records = _run_stage(gcn_model, "gcn", x, y, config.epochs_gcn, rng, table, on_record)
    gcn_ckpt = Checkpoint.from_model(gcn_model, "gcn")

    hybrid = PartsMamba(config)
    hybrid.load_arrays({p.name: p.data for p in gcn_model.head.parameters()}, strict=False)
    records += _run_stage(hybrid, "hybrid", x, y, config.epochs_hybrid, rng, table, on_record)
    return TrainResult(gcn_ckpt, Checkpoint.from_model(hybrid, "hybrid"), records)


def evaluate(model: PartsMamba, x: np.ndarray, y: np.ndarray, stage: str = "hybrid",
             batch_size: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, top-1 accuracy) without recording a tape."""
    total, correct = 0.0, 0
    for lo in range(0, len(x), batch_size):
        logits = model_forward(x[lo:lo + batch_size], model, stage)
        total += float(nn.softmax_cross_entropy(logits, y[lo:lo + batch_size]).data) * len(logits.data)
        correct += int((logits.data.argmax(axis=1) == y[lo:lo + batch_size]).sum())
    return total / len(x), correct / len(x)
