"""Command line interface of madseq."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from madseq.benchmark import benchmark_matrix, write_benchmark_csv
from madseq.checkpoint import load_checkpoint
from madseq.codec import check_roundtrip
from madseq.config import ExperimentConfig, load_config, write_config
from madseq.dataset import load_dataset, records_of_split, summarize, write_dataset
from madseq.inference import DECODING_MODES, evaluate
from madseq.masking import RefinementSchedule
from madseq.model import MaskedAutoDecoder, grad_check
from madseq.shapes_world import (
    KEYPOINT_NAMES,
    PERSON_CLASS,
    SHAPE_CLASSES,
    generate_dataset,
    generate_scene,
    scene_rng,
)
from madseq.trainer import Trainer
from madseq.training import build_batch, mad_task_output, task_kind, total_loss


def _ratio_override(text: str) -> list[str]:
    RefinementSchedule.parse(text)
    return [f"{key}={text}" for key in ("keypoint_ratios", "caption_ratios")]


def get_parser() -> argparse.ArgumentParser:
    """Return argument parser of the madseq command."""
    parser = argparse.ArgumentParser(
        prog="madseq",
        description="Masked autodecoding of multi-task vision sequences.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat YAML configuration file.")
    common.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Replace a configuration value. Can be repeated.",
    )
    common.add_argument("--seed", type=int, help="Seed of training and data.")
    common.add_argument("--out", default=".", help="Output directory.")
    common.add_argument("--mode", choices=DECODING_MODES, help="Decoding mode.")
    common.add_argument(
        "--refine-ratios",
        help="Comma separated refinement ratios of keypoints and captions.",
    )
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="Increase log level."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Write shapes dataset.")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="Train a model.")
    p.add_argument("--data", help="Dataset directory. Default is generated data.")
    p.add_argument(
        "--dump-plots-data", metavar="CSV", help="Write convergence curve data."
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="Dataset directory. Default is generated data.")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--limit", type=int, default=0, help="Evaluate first N images.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="Time decoding.")
    p.add_argument("--checkpoint", help="Checkpoint. Default is random weights.")
    p.add_argument("--tasks", default="detection,captioning")
    p.add_argument(
        "--stages",
        default="0,3",
        help="Comma separated numbers K of refinement stages for mad mode.",
    )
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("tokenize", parents=[common], help="Check codec round trips.")
    p.add_argument("--num-scenes", type=int, default=10)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("gradcheck", parents=[common], help="Check gradients.")
    p.add_argument("--coords", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _experiment(args) -> ExperimentConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"data_seed={args.seed}"]
    if args.mode is not None:
        overrides.append(f"decoding={args.mode}")
    if args.refine_ratios is not None:
        overrides += _ratio_override(args.refine_ratios)
    return load_config(args.config, overrides)


def _records(args, cfg: ExperimentConfig, split: Optional[str] = None):
    if getattr(args, "data", None):
        records = load_dataset(args.data, log_level=args.verbose)
    else:
        records = generate_dataset(cfg.world, log_level=args.verbose)
    if split is not None:
        records = records_of_split(records, split)
    return records


def _write_json(obj, filename: Path) -> None:
    with open(filename, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def cmd_gen_data(args) -> dict:
    """Write shapes-world dataset."""
    cfg = _experiment(args)
    out = Path(args.out)
    records = generate_dataset(cfg.world, log_level=args.verbose)
    write_dataset(
        records,
        out,
        categories=SHAPE_CLASSES,
        keypoint_names={PERSON_CLASS: KEYPOINT_NAMES},
        log_level=args.verbose,
    )
    summary = summarize(records)
    return {
        "out": str(out),
        "num_images": summary.num_images,
        "num_instances": summary.num_instances,
        "num_keypoint_instances": summary.num_keypoint_instances,
        "num_captioned": summary.num_captioned,
    }


def cmd_train(args) -> dict:
    """Train and write log, checkpoints and configuration."""
    cfg = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.yaml")
    records = _records(args, cfg)
    train = records_of_split(records, "train")
    val = records_of_split(records, "val")
    trainer = Trainer(
        cfg,
        train,
        val_records=val,
        out_dir=out,
        plots_data=args.dump_plots_data,
        log_level=args.verbose,
    )
    trainer.run()
    last = trainer.history[-1] if trainer.history else {}
    return {
        "out": str(out),
        "steps": trainer.step,
        "final_loss": last.get("loss"),
    }


def _load_model(filename, cfg: ExperimentConfig):
    ckpt = load_checkpoint(filename)
    saved = ExperimentConfig.from_dict(ckpt.config) if ckpt.config else cfg
    model = MaskedAutoDecoder(saved.model_config(ckpt.vocab))
    ckpt.load_into(model)
    return model, ckpt.vocab, saved


def cmd_eval(args) -> dict:
    """Evaluate a checkpoint and write the report."""
    cfg = _experiment(args)
    model, vocab, saved = _load_model(args.checkpoint, cfg)
    records = _records(args, saved, split=args.split)
    if args.limit > 0:
        records = records[: args.limit]
    mode = args.mode or saved.train.decoding
    report = evaluate(
        model,
        vocab,
        records,
        saved.codec,
        cfg=cfg.inference,
        mode=mode,
        tasks=saved.train.task_kinds,
        log_level=args.verbose,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out / "eval_report.json")
    return report.to_dict()


def cmd_bench(args) -> dict:
    """Time masked and autoregressive decoding with the same weights."""
    cfg = _experiment(args)
    modes = [args.mode] if args.mode else list(DECODING_MODES)
    if args.checkpoint:
        model, vocab, saved = _load_model(args.checkpoint, cfg)
        codec_cfg = saved.codec
    else:
        if "ar" in modes:
            cfg = cfg.updated({"sequence_tokens": True})
        torch.manual_seed(cfg.train.seed)
        vocab = cfg.vocab()
        model = MaskedAutoDecoder(cfg.model_config(vocab))
        codec_cfg = cfg.codec
    if args.refine_ratios is not None:
        schedules = [RefinementSchedule.parse(args.refine_ratios)]
    else:
        stages = [int(k) for k in args.stages.split(",") if k.strip()]
        schedules = [RefinementSchedule((0.5,) * k) for k in stages]
    tasks = [task_kind(t.strip()) for t in args.tasks.split(",") if t.strip()]
    rows = benchmark_matrix(
        model,
        vocab,
        codec_cfg,
        tasks,
        modes,
        schedules,
        trials=args.trials,
        warmup=args.warmup,
        image_size=cfg.world.image_size,
        seed=cfg.train.seed,
        log_level=args.verbose,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_benchmark_csv(rows, out / "benchmark.csv")
    return {"out": str(out / "benchmark.csv"), "rows": [r.to_dict() for r in rows]}


def cmd_tokenize(args) -> dict:
    """Encode and decode generated scenes and count disagreements."""
    cfg = _experiment(args)
    vocab = cfg.vocab()
    checked = {}
    violations = []
    for i in range(args.num_scenes):
        record = generate_scene(cfg.world, scene_rng(cfg.world.data_seed, i), i)
        record.annotation.validate(vocab.num_classes)
        report = check_roundtrip(
            record.annotation, vocab, cfg.codec, np.random.default_rng([i])
        )
        for task, n in report.checked.items():
            checked[task] = checked.get(task, 0) + n
        violations += [f"scene {i}: {v}" for v in report.violations]
    return {
        "num_scenes": args.num_scenes,
        "checked": checked,
        "violations": len(violations),
        "details": violations,
    }


def cmd_gradcheck(args) -> dict:
    """Compare autograd and finite-difference gradients of a small model."""
    cfg = _experiment(args)
    small = cfg.updated(
        {
            "embed_dim": 16,
            "num_heads": 2,
            "ffn_dim": 32,
            "enc_layers": 1,
            "dec_layers": 2,
            "stem_channels": [4, 8, 16],
            "num_slots": 2,
            "mask_side": 4,
            "caption_len": 6,
            "image_size": 64,
            "max_shapes": 2,
        }
    )
    torch.manual_seed(small.train.seed)
    vocab = small.vocab()
    model = MaskedAutoDecoder(small.model_config(vocab)).double()
    rng = np.random.default_rng(small.train.seed)
    record = generate_scene(small.world, rng)
    train_cfg = dataclasses.replace(small.train, decoding="mad")
    batch = build_batch([record], vocab, small.codec, train_cfg, rng)
    images = batch.images.double()

    def loss_fn(m):
        memory = m.encode(images)
        outputs = [
            mad_task_output(m, memory, batch.of_task(t), vocab, train_cfg)
            for t in train_cfg.task_kinds
            if batch.of_task(t)
        ]
        return total_loss(outputs, vocab, train_cfg).total

    result = grad_check(
        model,
        loss_fn,
        epsilon=1e-6,
        coords_per_parameter=args.coords,
        seed=small.train.seed,
        log_level=args.verbose,
    )
    return {
        "max_rel_error": result.max_rel_error,
        "max_abs_error": result.max_abs_error,
        "passed": result.passed,
        "num_coords": result.num_coords,
        "per_parameter": result.per_parameter,
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run a madseq command and return its exit status.

    The result of a command is printed as JSON on stdout. A failure prints
    ``{"error", "message", "command"}`` as JSON on stderr and returns 1.
    Usage errors exit with status 2.

    """
    parser = get_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "command": args.command,
        }
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
