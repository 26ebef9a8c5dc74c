"""Command-line entry point: ``partsmamba {train|eval|check|maskgen|synth}``.

Exit codes: 0 success, 1 verification or metric failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data_occlusion import (SPEC_GRAMMAR, ParseError, SkeletonClip, apply_mask,
                             load_dataset, load_occlusion_table, parse_ntu_skeleton,
                             parse_occlusion_spec, save_dataset, stack_clips, synth_dataset)
from .model import OCCLUSION_POLICIES, ModelConfig
from .temporal_encoder import ConfigError
from .training import MetricsRecord, TrainingError, evaluate, train_two_step

log = logging.getLogger("partsmamba")

METRICS_FORMAT = "partsmamba-metrics"
MASK_FORMAT = "partsmamba-mask"
FORMAT_VERSION = 1
EVAL_REPEATS = 5


class UsageError(Exception):
    """Bad arguments, missing paths or invalid configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_config(args) -> ModelConfig:
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.config is None:
        return ModelConfig(**overrides)
    return ModelConfig.from_file(_existing(args.config, "config file"), **overrides)


def load_clips(path: str | None) -> list[SkeletonClip]:
    """Native dataset file, a single ``.skeleton`` file, or a directory of them."""
    p = _existing(path, "data path")
    if p.is_dir():
        files = sorted(p.glob("*.skeleton"))
        if not files:
            raise UsageError(f"no .skeleton files in {path}")
        clips = []
        for f in files:
            with open(f) as stream:
                clips.append(parse_ntu_skeleton(stream, f.name))
        return clips
    if p.suffix == ".skeleton":
        with open(p) as stream:
            return [parse_ntu_skeleton(stream, p.name)]
    return load_dataset(p)


def _tensors(clips: list[SkeletonClip], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    if clips[0].joints.shape[0] != cfg.num_joints:
        raise UsageError(f"data has {clips[0].joints.shape[0]} joints, config expects {cfg.num_joints}")
    x, y = stack_clips(clips, cfg.window, cfg.np_dtype)
    if (y < 0).any() or (y >= cfg.num_classes).any():
        raise UsageError(f"labels must lie in 0..{cfg.num_classes - 1} (found {y.min()}..{y.max()})")
    return x, y


def _header(command: str, **fields) -> str:
    return json.dumps({"format": METRICS_FORMAT, "version": FORMAT_VERSION, "command": command, **fields},
                      sort_keys=True)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    policy = args.occlusion or cfg.occlusion_policy
    if policy not in OCCLUSION_POLICIES:
        raise UsageError(f"train --occlusion must be one of {', '.join(OCCLUSION_POLICIES)}, got {policy!r}")
    cfg = cfg.replace(occlusion_policy=policy)
    x, y = _tensors(load_clips(args.data), cfg)
    out = _out_dir(args)

    resolved = cfg.to_text()
    sys.stdout.write("# resolved config\n" + resolved)
    (out / "config.txt").write_text(resolved)

    metrics_path = out / "metrics.jsonl"
    timing_path = out / "timing.jsonl"
    with open(metrics_path, "w") as metrics, open(timing_path, "w") as timing:
        metrics.write(_header("train", seed=cfg.seed, occlusion=policy) + "\n")

        def emit(rec: MetricsRecord) -> None:
            metrics.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            metrics.flush()
            timing.write(json.dumps({"run": rec.run, "seconds": round(rec.seconds, 3)}) + "\n")

        result = train_two_step(x, y, cfg, on_record=emit)
    save_checkpoint(result.gcn, out / "stage_gcn.ckpt")
    save_checkpoint(result.hybrid, out / "stage_hybrid.ckpt")
    final = result.metrics[-1]
    print(f"trained {len(x)} clips: final {final.run} loss={final.loss:.4f} accuracy={final.accuracy:.4f}")
    print(f"wrote {out / 'stage_gcn.ckpt'}, {out / 'stage_hybrid.ckpt'}, {metrics_path}")
    return 0


def eval_records(ckpt: Checkpoint, x: np.ndarray, y: np.ndarray, spec_text: str,
                 seed: int) -> list[MetricsRecord]:
    """Evaluate under one occlusion spec: 5 repetitions plus their mean for
    seeded-random specs, a single ``mean`` record otherwise."""
    spec = parse_occlusion_spec(spec_text)
    cfg = ckpt.config
    model = ckpt.build_model()
    table = load_occlusion_table(cfg.occlusion_table)
    n, v, t = x.shape[:3]
    if not spec.is_random:
        grid = spec.mask(v, t, table).visible
        loss, acc = evaluate(model, apply_mask(x, grid), y, ckpt.stage)
        return [MetricsRecord("mean", "eval", spec.text, loss, acc)]
    records = []
    for rep in range(EVAL_REPEATS):
        # every clip gets its own draw; the repetition seed fixes all of them
        seeds = np.random.default_rng([seed, rep]).integers(0, 2**31 - 1, size=n)
        grids = np.stack([spec.mask(v, t, table, int(s)).visible for s in seeds])
        loss, acc = evaluate(model, apply_mask(x, grids), y, ckpt.stage)
        records.append(MetricsRecord(f"rep{rep}", "eval", spec.text, loss, acc))
    records.append(MetricsRecord("mean", "eval", spec.text,
                                 float(np.mean([r.loss for r in records])),
                                 float(np.mean([r.accuracy for r in records]))))
    return records


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    spec_text = args.occlusion or "none"
    parse_occlusion_spec(spec_text)  # fail fast, before loading data
    seed = 0 if args.seed is None else args.seed
    x, y = _tensors(load_clips(args.data), ckpt.config)
    records = eval_records(ckpt, x, y, spec_text, seed)
    lines = [_header("eval", seed=seed, occlusion=spec_text, stage=ckpt.stage)]
    lines += [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args) / "eval.jsonl").write_text(text)
    return 0


def cmd_check(args) -> int:
    from .checks import format_report, run_checks

    results = run_checks(inject_fault=args.inject_fault)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def mask_text(spec_text: str, v: int, t: int, seed: int, table: dict) -> str:
    spec = parse_occlusion_spec(spec_text)
    grid = spec.mask(v, t, table, seed).visible
    header = f"# {MASK_FORMAT} v{FORMAT_VERSION} spec={spec.text} seed={seed} V={v} T={t}"
    rows = [" ".join("1" if b else "0" for b in row) for row in grid]
    return "\n".join([header, *rows]) + "\n"


def cmd_maskgen(args) -> int:
    cfg = _load_config(args)
    if not args.occlusion:
        raise UsageError("maskgen needs --occlusion SPEC")
    seed = 0 if args.seed is None else args.seed
    text = mask_text(args.occlusion, cfg.num_joints, cfg.window, seed,
                     load_occlusion_table(cfg.occlusion_table))
    if args.out:
        (_out_dir(args) / "mask.txt").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    seed = 0 if args.seed is None else args.seed
    clips = synth_dataset(args.classes, args.samples, seed, cfg.window)
    path = _out_dir(args) / "synth.txt"
    save_dataset(path, clips)
    print(f"wrote {len(clips)} clips ({args.classes} classes x {args.samples}) to {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "check": cmd_check, "maskgen": cmd_maskgen, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--data", help="native dataset file, .skeleton file or directory of them")
    common.add_argument("--occlusion", help=f"occlusion spec ({SPEC_GRAMMAR}); for train: none|parts-masked")
    common.add_argument("--ckpt", help="checkpoint to evaluate")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="partsmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="two-step training")
    sub.add_parser("eval", parents=[common], help="accuracy under an occlusion spec")
    check = sub.add_parser("check", parents=[common], help="run the oracle suite")
    check.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("maskgen", parents=[common], help="write an occlusion mask grid")
    synth = sub.add_parser("synth", parents=[common], help="write the synthetic dataset")
    synth.add_argument("--classes", type=int, default=4)
    synth.add_argument("--samples", type=int, default=50, help="clips per class")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ParseError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
