"""Self-verification suite behind ``partsmamba check``.

Each check is a zero-argument function returning ``(passed, detail)``; the
registry order is the report order and every name appears once.
"""
from __future__ import annotations

import io
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn_core as nn
from . import ssm_scan as ss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data_occlusion import (OcclusionMask, apply_mask, mask_random_frames, mask_temporal,
                             parse_ntu_skeleton, parse_occlusion_spec, write_ntu_skeleton)
from .model import ModelConfig, PartsMamba, flops_estimate, model_forward
from .nn_core import Param, Tensor
from .parts_scanning import PartPartition, part_wise_scan
from .temporal_encoder import TemporalParams, st_reorder, st_restore, temporal_block

MICRO = dict(num_joints=6, window=4, channels=8, inner_channels=4, state_size=2, blocks=1,
             sections=2, num_classes=3, partition="micro6.parts", adjacency="micro6.edges",
             occlusion_table="micro6.occlusion", dtype="float64", scan_chunk=2)


def micro_config(**overrides) -> ModelConfig:
    """The tiny float64 configuration used for end-to-end gradient checks."""
    return ModelConfig(**{**MICRO, **overrides})


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_ssm(rng, channels, state, prefix="s"):
    p = ss.SsmParams.init(prefix, channels, state, rng, np.float64)
    for q in (p.w_delta, p.w_b, p.w_c):
        q.data = rng.normal(size=q.shape)
    p.delta_bias.data = rng.normal(scale=0.5, size=p.delta_bias.shape)
    return p


def check_scan_equivalence(instances: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        length = int(rng.integers(2, 129))
        p = _random_ssm(rng, int(rng.integers(1, 17)), int(rng.integers(1, 9)))
        x = rng.normal(size=(length, p.channels))
        chunk = int(rng.integers(1, length))
        seq = ss.selective_scan_seq(x, p).data
        par = ss.selective_scan_parallel(x, p, chunk).data
        err = float(np.abs(par - seq).max() / max(np.abs(seq).max(), 1e-300))
        worst = max(worst, err if np.isfinite(err) else np.inf)
    return worst <= 1e-5, f"{instances} instances, max rel err {worst:.2e}"


def check_scan_gradient(seed: int = 1):
    rng = np.random.default_rng(seed)
    p = _random_ssm(rng, 3, 2)
    x = Param("x", rng.normal(size=(2, 9, 3)))
    r = rng.normal(size=(2, 9, 3))
    worst = 0.0
    for chunk in (None, 1, 4):
        rep = nn.grad_check(lambda: nn.sum(nn.mul(ss.selective_scan(x, p, chunk), r)), p.parameters() + [x])
        if not rep.passed:
            return False, f"chunk={chunk}: {rep.failure or rep.worst} rel err {rep.max_rel_error:.2e}"
        worst = max(worst, rep.max_rel_error)
    return True, f"max rel err {worst:.2e}"


def check_op_gradients(seed: int = 2):
    rng = np.random.default_rng(seed)
    x = Param("x", rng.normal(size=(2, 3, 4)))
    w = Param("w", rng.normal(size=(4, 5)))
    k = Param("k", rng.normal(size=(3, 4, 2)))
    m = Param("m", rng.normal(size=(2, 2)))
    g = Param("g", rng.normal(size=4))
    b = Param("b", rng.normal(size=4))
    labels = np.array([1, 0, 4, 2, 3, 0])
    cases = {
        "linear_map": (lambda: nn.sum(nn.linear_map(x, w)), [x, w]),
        "layer_norm": (lambda: nn.sum(nn.mul(nn.layer_norm(x, g, b), x)), [x, g, b]),
        "temporal_conv": (lambda: nn.sum(nn.mul(nn.temporal_conv(x, k), nn.temporal_conv(x, k))), [x, k]),
        "axis_matmul": (lambda: nn.sum(nn.mul(nn.axis_matmul(m, x, 0), x)), [m, x]),
        "softplus": (lambda: nn.sum(nn.softplus(x)), [x]),
        "cross_entropy": (lambda: nn.softmax_cross_entropy(nn.reshape(nn.linear_map(x, w), (6, 5)), labels),
                          [x, w]),
    }
    worst = 0.0
    for name, (f, params) in cases.items():
        rep = nn.grad_check(f, params)
        if not rep.passed:
            return False, f"{name}: rel err {rep.max_rel_error:.2e}"
        worst = max(worst, rep.max_rel_error)
    return True, f"{len(cases)} ops, max rel err {worst:.2e}"


def check_model_gradient(seed: int = 3):
    cfg = micro_config(seed=seed)
    model = PartsMamba(cfg)
    rng = np.random.default_rng(seed)
    for sp in model.spatial:
        sp.alpha.data = np.asarray(0.3)  # the zero init would leave the topology branch untested
    x = rng.normal(size=(2, cfg.num_joints, cfg.window, 3))
    y = np.array([0, 2])
    rep = nn.grad_check(lambda: nn.softmax_cross_entropy(model_forward(x, model), y), model.parameters())
    return rep.passed, f"{len(rep.per_param)} tensors, max rel err {rep.max_rel_error:.2e}" + \
        ("" if rep.passed else f", worst {rep.worst}")


def check_part_locality(probes: int = 50, seed: int = 4):
    rng = np.random.default_rng(seed)
    part = PartPartition.load("ntu25.parts", 25)
    c = 4
    ssms = [(_random_ssm(rng, c, 2, f"{n}.f"), _random_ssm(rng, c, 2, f"{n}.b")) for n in part.names]
    mix = Tensor(rng.normal(size=(c, c)))
    violations = 0
    for _ in range(probes):
        x = rng.normal(size=(25, 6, c))
        v = int(rng.integers(25))
        outside = np.setdiff1d(np.arange(25), part.parts[part.part_of(v)])
        x2 = x.copy()
        x2[outside] += rng.normal(size=(len(outside), 6, c))
        a = part_wise_scan(Tensor(x), part, ssms, mix, 2).data[v]
        b = part_wise_scan(Tensor(x2), part, ssms, mix, 2).data[v]
        violations += not np.array_equal(a, b)
    return violations == 0, f"{probes} probes, {violations} violations"


def check_causality(probes: int = 20, seed: int = 5):
    rng = np.random.default_rng(seed)
    v, t, c, n = 6, 10, 4, 2
    params = TemporalParams.init("t", (v // n) * c, 2 * c, 2, rng, np.float64)
    for q in (params.ssm.w_delta, params.ssm.w_b, params.ssm.w_c):
        q.data = rng.normal(size=q.shape)
    violations = 0
    for _ in range(probes):
        x = rng.normal(size=(v, t, c))
        frame = int(rng.integers(0, t - 1))
        x2 = x.copy()
        x2[:, frame + 1:] += rng.normal(size=(v, t - frame - 1, c))
        a = temporal_block(Tensor(x), params, n, 3).data[:, :frame + 1]
        b = temporal_block(Tensor(x2), params, n, 3).data[:, :frame + 1]
        violations += not np.array_equal(a, b)
    return violations == 0, f"{probes} probes, {violations} violations"


def check_st_roundtrip(seed: int = 6):
    rng = np.random.default_rng(seed)
    for v, n in ((25, 5), (6, 2), (25, 1), (25, 25)):
        x = rng.normal(size=(2, 7, v, 3))
        back = st_restore(st_reorder(Tensor(x), n), n, v).data
        if not np.array_equal(back, x):
            return False, f"V={v}, n={n} not restored"
    return True, "4 layouts restored bit-exactly"


def check_checkpoint_roundtrip(seed: int = 7):
    model = PartsMamba(micro_config(seed=seed, dtype="float32"))
    x = np.random.default_rng(seed).normal(size=(2, 6, 4, 3)).astype(np.float32)
    before = model_forward(x, model).data
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(Checkpoint.from_model(model, "hybrid"), path)
        after = model_forward(x, load_checkpoint(path).build_model()).data
    return bool(np.array_equal(before, after)), "forward identical after save/load"


def check_mask_algebra(seed: int = 8):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 64, 3))
    m1 = mask_temporal(0.3, "random", 64, seed=seed)
    m2 = mask_random_frames(0.25, 64, seed=seed + 1)
    once = apply_mask(x, m1)
    ok = np.array_equal(apply_mask(once, m1), once)
    ok &= np.array_equal(apply_mask(once, m2), apply_mask(x, m1 & m2))
    ok &= np.array_equal(apply_mask(x, OcclusionMask.full(25, 64)), x)
    return bool(ok), "idempotent, intersection-commuting, identity on full mask"


def check_ntu_roundtrip(seed: int = 9):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(3, 25, 3))
    buf = io.StringIO()
    write_ntu_skeleton(buf, [[("72057594037931101", c)] for c in coords])
    clip = parse_ntu_skeleton(io.StringIO(buf.getvalue()), "S001C001P001R001A007.skeleton")
    ok = np.array_equal(clip.joints, coords.transpose(1, 0, 2)) and clip.label == 6
    return bool(ok), "write -> parse preserves coordinates and label"


def check_spec_roundtrip():
    specs = ["none", "parts:left_arm", "parts:trunk", "temporal:0.5:middle", "temporal:0.3:random",
             "randomframe:0.25", "periodic:8"]
    for text in specs:
        spec = parse_occlusion_spec(text)
        if parse_occlusion_spec(spec.text) != spec:
            return False, f"{text} changed on re-parse"
    return True, f"{len(specs)} specs"


def check_flops_linearity():
    base = ModelConfig(window=256)
    ratio = flops_estimate(base.replace(window=512)) / flops_estimate(base)
    return 1.9 <= ratio <= 2.1, f"flops(2T)/flops(T) = {ratio:.4f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "scan_equivalence": check_scan_equivalence,
    "scan_gradient": check_scan_gradient,
    "op_gradients": check_op_gradients,
    "model_gradient": check_model_gradient,
    "part_locality": check_part_locality,
    "causality": check_causality,
    "st_roundtrip": check_st_roundtrip,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
    "mask_algebra": check_mask_algebra,
    "ntu_roundtrip": check_ntu_roundtrip,
    "spec_roundtrip": check_spec_roundtrip,
    "flops_linearity": check_flops_linearity,
}


def run_checks(inject_fault: bool = False, only: list[str] | None = None) -> list[CheckResult]:
    """Run the registry (or the named subset); exceptions count as failures."""
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            if inject_fault:
                with ss.inject_combine_fault():
                    passed, detail = fn()
            else:
                passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
