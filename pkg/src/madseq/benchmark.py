"""Decode latency of masked and autoregressive decoding with the same weights."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from madseq.codec import CodecConfig, instance_prompt
from madseq.inference import DECODING_MODES, InferenceConfig, Predictor
from madseq.masking import RefinementSchedule
from madseq.model import MaskedAutoDecoder
from madseq.vocab import TaskKind, Vocab

BENCH_BOX = (0.25, 0.25, 0.75, 0.75)


@dataclass
class BenchmarkRow:
    """Latency of one (task, mode, schedule) configuration.

    Times are per image in milliseconds and exclude the image encoder and
    the warm-up trials. ``passes`` is the number of decoder forward passes
    of one decode.

    """

    task: str
    mode: str
    stages: int
    ratios: str
    body_length: int
    passes: int
    trials: int
    mean_ms: float
    median_ms: float
    min_ms: float

    def to_dict(self) -> dict:
        """Return plain dict."""
        return asdict(self)


def _bench_prompt(task: TaskKind, vocab: Vocab, keypoint_class: int) -> list[int]:
    if task in (TaskKind.DETECTION, TaskKind.CAPTIONING):
        return [vocab.prompt_id(task)]
    class_id = keypoint_class if task is TaskKind.KEYPOINT else 0
    return instance_prompt(task, BENCH_BOX, class_id, vocab)


def benchmark_decode(
    model: MaskedAutoDecoder,
    vocab: Vocab,
    codec_cfg: CodecConfig,
    task: Union[TaskKind, int] = TaskKind.DETECTION,
    mode: str = "mad",
    schedule: Optional[RefinementSchedule] = None,
    trials: int = 5,
    warmup: int = 1,
    image_size: int = 256,
    seed: int = 0,
    log_level: int = 0,
) -> BenchmarkRow:
    """Time the decode of one task sequence.

    Parameters
    ----------
    model : MaskedAutoDecoder
        Model whose weights are shared by both modes.
    vocab : Vocab
        Vocabulary. Autoregressive mode needs sequence tokens.
    codec_cfg : CodecConfig
        Sequence format.
    task : TaskKind, optional
        Decoded task. Default is detection.
    mode : str, optional
        "mad" or "ar". Default is "mad".
    schedule : RefinementSchedule, optional
        Refinement stages in "mad" mode. Default is none.
    trials, warmup : int, optional
        Timed and untimed repetitions. Defaults are 5 and 1.
    image_size : int, optional
        Side of the random input image. Default is 256.
    seed : int, optional
        Seed of the input image and re-mask positions.
    log_level : int, optional
        Log level. Default is 0.

    Runs single-threaded with gradients disabled.

    """
    if mode not in DECODING_MODES:
        raise ValueError(f"Unknown decoding mode '{mode}'.")
    if trials < 1 or warmup < 0:
        raise ValueError("trials must be >= 1 and warmup >= 0.")
    task = TaskKind(task)
    schedule = schedule or RefinementSchedule(())
    ratios = str(schedule)
    cfg = InferenceConfig(**{_ratio_key(task): ratios})
    predictor = Predictor(model, vocab, codec_cfg, cfg=cfg, mode=mode, tasks=[task])
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(image_size, image_size, 3), dtype=np.uint8)
    prompt = _bench_prompt(task, vocab, cfg.keypoint_class)

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        memory = predictor.encode(image)
        for _ in range(warmup):
            predictor.decode_task(task, prompt, memory, rng)
        times = []
        passes = 0
        for _ in range(trials):
            calls = model.decoder_calls
            t0 = time.perf_counter()
            predictor.decode_task(task, prompt, memory, rng)
            times.append(1000.0 * (time.perf_counter() - t0))
            passes = model.decoder_calls - calls
    finally:
        torch.set_num_threads(threads)

    row = BenchmarkRow(
        task=task.name.lower(),
        mode=mode,
        stages=schedule.num_stages if mode == "mad" else 0,
        ratios=ratios if mode == "mad" else "",
        body_length=codec_cfg.body_length(task),
        passes=passes,
        trials=trials,
        mean_ms=float(np.mean(times)),
        median_ms=float(np.median(times)),
        min_ms=float(np.min(times)),
    )
    if log_level:
        print(
            f" {row.task} {row.mode} K={row.stages}: {row.passes} passes,"
            f" median {row.median_ms:.2f} ms"
        )
    return row


def _ratio_key(task: TaskKind) -> str:
    return {
        TaskKind.DETECTION: "detection_ratios",
        TaskKind.SEGMENTATION: "segmentation_ratios",
        TaskKind.KEYPOINT: "keypoint_ratios",
        TaskKind.CAPTIONING: "caption_ratios",
    }[task]


def benchmark_matrix(
    model: MaskedAutoDecoder,
    vocab: Vocab,
    codec_cfg: CodecConfig,
    tasks: Sequence[TaskKind],
    modes: Sequence[str],
    schedules: Sequence[RefinementSchedule],
    trials: int = 5,
    warmup: int = 1,
    image_size: int = 256,
    seed: int = 0,
    log_level: int = 0,
) -> list[BenchmarkRow]:
    """Return rows of every task and mode; "mad" runs once per schedule."""
    rows = []
    for task in tasks:
        for mode in modes:
            for schedule in schedules if mode == "mad" else [None]:
                rows.append(
                    benchmark_decode(
                        model,
                        vocab,
                        codec_cfg,
                        task=task,
                        mode=mode,
                        schedule=schedule,
                        trials=trials,
                        warmup=warmup,
                        image_size=image_size,
                        seed=seed,
                        log_level=log_level,
                    )
                )
    return rows


def write_benchmark_csv(rows: Sequence[BenchmarkRow], filename: Union[str, Path]):
    """Write rows as CSV with a header line."""
    names = [f.name for f in fields(BenchmarkRow)]
    with open(filename, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_dict())
