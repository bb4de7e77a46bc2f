"""Training loop with JSON-lines logging, checkpoints and periodic validation."""
from __future__ import annotations

import csv
import json
import time
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from madseq.checkpoint import save_checkpoint
from madseq.config import ExperimentConfig
from madseq.dataset import DatasetRecord, scale_and_crop
from madseq.inference import evaluate
from madseq.metrics import EvalReport
from madseq.model import MaskedAutoDecoder
from madseq.training import LossBreakdown, build_batch, build_optimizer, train_step

TRAIN_LOG = "train_log.jsonl"
FINAL_CHECKPOINT = "model.ckpt"
PLOTS_COLUMNS = (
    "step",
    "loss",
    "det_ap50",
    "det_map",
    "seg_ap50",
    "kpt_pck",
    "caption_bleu4",
)


class Trainer:
    """Train a MaskedAutoDecoder on shapes-world records.

    Every step draws ``batch_size`` training records without replacement,
    optionally rescales them, builds the task-mixed batch and runs one
    optimizer update. All randomness is derived from the ``seed`` setting,
    so two runs with the same configuration give the same parameters.

    Examples
    --------
    >>> trainer = Trainer(cfg, train_records, out_dir="run")
    >>> model = trainer.run()

    """

    def __init__(
        self,
        config: ExperimentConfig,
        train_records: Sequence[DatasetRecord],
        val_records: Optional[Sequence[DatasetRecord]] = None,
        out_dir: Optional[Union[str, Path]] = None,
        plots_data: Optional[Union[str, Path]] = None,
        log_level: int = 0,
    ):
        """Init method.

        Parameters
        ----------
        config : ExperimentConfig
            Experiment settings.
        train_records : sequence of DatasetRecord
            Training images.
        val_records : sequence of DatasetRecord, optional
            Validation images used when ``eval_interval`` is positive.
        out_dir : str or Path, optional
            Directory of the log and checkpoints. Nothing is written when
            omitted.
        plots_data : str or Path, optional
            CSV of validation metrics per evaluation step.
        log_level : int, optional
            Log level. Default is 0.

        """
        if not train_records:
            raise ValueError("No training records.")
        self._cfg = config
        self._train_records = list(train_records)
        self._val_records = list(val_records or [])
        self._out_dir = None if out_dir is None else Path(out_dir)
        self._plots_data = None if plots_data is None else Path(plots_data)
        self._log_level = log_level

        torch.manual_seed(config.train.seed)
        self._rng = np.random.default_rng(config.train.seed)
        self._vocab = config.vocab()
        self._model = MaskedAutoDecoder(config.model_config(self._vocab))
        self._optimizer, self._scheduler = build_optimizer(self._model, config.train)
        self._step = 0
        self._history: list[dict] = []
        self._evaluations: list[tuple[int, EvalReport]] = []

    @property
    def model(self) -> MaskedAutoDecoder:
        """Return model."""
        return self._model

    @property
    def vocab(self):
        """Return vocabulary."""
        return self._vocab

    @property
    def step(self) -> int:
        """Return number of steps taken."""
        return self._step

    @property
    def history(self) -> list[dict]:
        """Return log records of every step."""
        return self._history

    @property
    def evaluations(self) -> list[tuple[int, EvalReport]]:
        """Return (step, report) of every periodic validation."""
        return self._evaluations

    def _sample_records(self) -> list[DatasetRecord]:
        n = min(self._cfg.train.batch_size, len(self._train_records))
        picks = self._rng.choice(len(self._train_records), n, replace=False)
        records = [self._train_records[i] for i in picks]
        if self._cfg.train.augment:
            records = [scale_and_crop(r, self._rng) for r in records]
        return records

    def train_one_step(self) -> LossBreakdown:
        """Run one step and return its losses."""
        train_cfg = self._cfg.train
        records = self._sample_records()
        batch = build_batch(
            records, self._vocab, self._cfg.codec, train_cfg, self._rng
        )
        diagnostics = None
        if self._out_dir is not None:
            diagnostics = self._out_dir / f"nonfinite_step{self._step + 1}.json"
        breakdown = train_step(
            self._model,
            self._optimizer,
            batch,
            self._vocab,
            train_cfg,
            scheduler=self._scheduler,
            diagnostics_path=diagnostics,
            log_level=self._log_level,
        )
        self._step += 1
        return breakdown

    def save(self, filename: Union[str, Path]) -> None:
        """Write checkpoint of the current parameters."""
        save_checkpoint(
            filename,
            self._model,
            self._vocab,
            config=self._cfg.to_dict(),
            step=self._step,
        )

    def validate(self) -> EvalReport:
        """Evaluate the first ``eval_images`` validation records."""
        records = self._val_records[: self._cfg.train.eval_images]
        report = evaluate(
            self._model,
            self._vocab,
            records,
            self._cfg.codec,
            cfg=self._cfg.inference,
            mode=self._cfg.train.decoding,
            tasks=self._cfg.train.task_kinds,
        )
        self._evaluations.append((self._step, report))
        return report

    def run(self) -> MaskedAutoDecoder:
        """Train for ``total_steps`` steps and return the model."""
        train_cfg = self._cfg.train
        if self._out_dir is not None:
            self._out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self._out_dir / TRAIN_LOG, "w", encoding="utf-8")
        else:
            log_file = None
        if self._log_level:
            t1 = time.time()
            print(
                f" training {train_cfg.total_steps} steps "
                f"({train_cfg.decoding}, tasks={','.join(train_cfg.tasks)}) ..."
            )
        t_start = time.perf_counter()
        try:
            while self._step < train_cfg.total_steps:
                lr = self._optimizer.param_groups[0]["lr"]
                breakdown = self.train_one_step()
                record = {"step": self._step, "lr": lr}
                record.update(breakdown.to_record())
                record["seconds"] = time.perf_counter() - t_start
                self._history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    log_file.flush()
                if self._log_level and (
                    self._step % max(train_cfg.log_interval, 1) == 0
                ):
                    print(f"  - step {self._step}: loss = {record['loss']:.6f}")
                if (
                    self._out_dir is not None
                    and train_cfg.checkpoint_interval > 0
                    and self._step % train_cfg.checkpoint_interval == 0
                ):
                    self.save(self._out_dir / f"step{self._step:06d}.ckpt")
                if (
                    train_cfg.eval_interval > 0
                    and self._val_records
                    and self._step % train_cfg.eval_interval == 0
                ):
                    report = self.validate()
                    if log_file is not None:
                        log_file.write(
                            json.dumps(
                                {"step": self._step, "eval": report.to_dict()},
                                sort_keys=True,
                            )
                            + "\n"
                        )
        finally:
            if log_file is not None:
                log_file.close()

        if self._out_dir is not None:
            self.save(self._out_dir / FINAL_CHECKPOINT)
        if self._plots_data is not None:
            self.write_plots_data(self._plots_data)
        if self._log_level:
            print("  - elapsed time =", time.time() - t1, "(s)")
        return self._model

    def write_plots_data(self, filename: Union[str, Path]) -> None:
        """Write loss and validation metrics per evaluated step as CSV."""
        losses = {r["step"]: r["loss"] for r in self._history}
        with open(filename, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(PLOTS_COLUMNS)
            if self._evaluations:
                for step, report in self._evaluations:
                    writer.writerow(
                        [
                            step,
                            losses.get(step, ""),
                            report.det_ap50,
                            report.det_map,
                            report.seg_ap50,
                            report.kpt_pck,
                            report.caption_bleu4,
                        ]
                    )
            else:
                for step, loss in losses.items():
                    writer.writerow([step, loss, "", "", "", "", ""])
