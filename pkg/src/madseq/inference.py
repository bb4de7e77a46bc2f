"""Multi-task prediction with masked or autoregressive decoding, and evaluation."""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from madseq.codec import (
    CodecConfig,
    DetectedBox,
    decode_caption,
    decode_detection,
    decode_keypoint,
    decode_segmentation,
    instance_prompt,
)
from madseq.dataset import DatasetRecord
from madseq.masking import RefinementSchedule, ensemble_refine
from madseq.metrics import (
    EvalReport,
    KeypointPrediction,
    MaskPrediction,
    corpus_bleu4,
    eval_detection,
    eval_keypoints,
    eval_segmentation,
    summarize_diagnostics,
)
from madseq.model import (
    MaskedAutoDecoder,
    ar_generate,
    image_tensor,
    restricted_log_softmax,
)
from madseq.vocab import Special, TaskKind, Vocab, task_vocab_filter

DECODING_MODES = ("mad", "ar")


@dataclass(frozen=True)
class InferenceConfig:
    """Refinement schedules and prompting rules.

    Ratios are comma separated strings; an empty string means no refinement.
    Keypoints are only decoded for detections of ``keypoint_class``.

    """

    detection_ratios: str = ""
    segmentation_ratios: str = ""
    keypoint_ratios: str = "0.7"
    caption_ratios: str = "0.8,0.6,0.4"
    combiner: str = "mean"
    keypoint_class: int = 4
    min_score: float = 0.0
    refine_seed: int = 0

    def __post_init__(self):
        """Validate schedules."""
        for task in TaskKind:
            self.schedule(task)
        if self.combiner not in ("mean", "overwrite"):
            raise ValueError(f"Unknown combiner '{self.combiner}'.")

    def schedule(self, task: TaskKind) -> RefinementSchedule:
        """Return refinement schedule of a task."""
        text = {
            TaskKind.DETECTION: self.detection_ratios,
            TaskKind.SEGMENTATION: self.segmentation_ratios,
            TaskKind.KEYPOINT: self.keypoint_ratios,
            TaskKind.CAPTIONING: self.caption_ratios,
        }[TaskKind(task)]
        return RefinementSchedule.parse(str(text))

    def to_dict(self) -> dict:
        """Return plain dict."""
        return asdict(self)


@dataclass
class MultiTaskPrediction:
    """Outputs of all tasks for one image."""

    detections: list[DetectedBox] = field(default_factory=list)
    masks: list[MaskPrediction] = field(default_factory=list)
    keypoints: list[KeypointPrediction] = field(default_factory=list)
    caption: str = ""
    decoder_passes: int = 0
    diagnostics: Counter = field(default_factory=Counter)


class Predictor:
    """Decode all tasks of an image with one shared image memory.

    Detection is decoded first; every kept box prompts a segmentation decode
    and, for the person class, a keypoint decode. In ``mad`` mode each
    sequence takes 1 + K decoder passes for a schedule of K stages; in ``ar``
    mode it takes one pass per body token.

    """

    def __init__(
        self,
        model: MaskedAutoDecoder,
        vocab: Vocab,
        codec_cfg: CodecConfig,
        cfg: Optional[InferenceConfig] = None,
        mode: str = "mad",
        tasks: Optional[Sequence[TaskKind]] = None,
        log_level: int = 0,
    ):
        """Init method.

        Parameters
        ----------
        model : MaskedAutoDecoder
            Trained model. It is switched to eval mode.
        vocab : Vocab
            Vocabulary the model was trained with.
        codec_cfg : CodecConfig
            Sequence format.
        cfg : InferenceConfig, optional
            Schedules and prompting rules.
        mode : str, optional
            "mad" or "ar". Default is "mad".
        tasks : sequence of TaskKind, optional
            Tasks to decode. Default is all.
        log_level : int, optional
            Log level. Default is 0.

        """
        if mode not in DECODING_MODES:
            raise ValueError(f"Unknown decoding mode '{mode}'.")
        if mode == "ar" and not vocab.has_sequence_tokens:
            raise ValueError("Autoregressive decoding needs <start>/<end> tokens.")
        self._model = model.eval()
        self._vocab = vocab
        self._codec_cfg = codec_cfg
        self._cfg = cfg or InferenceConfig()
        self._mode = mode
        self._tasks = tuple(TaskKind(t) for t in (tasks or tuple(TaskKind)))
        self._log_level = log_level
        self._device = next(model.parameters()).device
        self._allowed = {
            t: torch.as_tensor(task_vocab_filter(t, vocab), device=self._device)
            for t in TaskKind
        }

    @property
    def mode(self) -> str:
        """Return decoding mode."""
        return self._mode

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> torch.Tensor:
        """Return (1, S, D) memory of one (H, W, 3) image."""
        return self._model.encode(image_tensor([image], device=self._device))

    def _mad_probs(
        self, task: TaskKind, inputs: np.ndarray, prompt_len: int, memory
    ) -> np.ndarray:
        tokens = torch.as_tensor(inputs, dtype=torch.long, device=self._device)
        logits = self._model.decode(tokens[None], memory)[-1, 0, prompt_len:]
        probs = restricted_log_softmax(logits, self._allowed[task]).exp()
        return probs.double().cpu().numpy()

    def _cut_at_end(self, task: TaskKind, tokens: np.ndarray) -> np.ndarray:
        """Neutralize positions generated after the first <end>."""
        ends = np.flatnonzero(tokens == self._vocab.end_id)
        if len(ends) == 0:
            return tokens
        first = int(ends[0])
        tokens = tokens.copy()
        if task is TaskKind.CAPTIONING:
            tokens[first:] = self._vocab.pad_id
        elif task is TaskKind.SEGMENTATION:
            tokens[first:] = self._vocab.special_id(Special.BACKGROUND)
        elif task is TaskKind.DETECTION:
            class_pos = np.arange(4, len(tokens), 5)
            tokens[class_pos[class_pos >= first]] = self._vocab.noise_id
        return tokens

    @torch.no_grad()
    def decode_task(
        self,
        task: TaskKind,
        prompt: Sequence[int],
        memory: torch.Tensor,
        rng: np.random.Generator,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return (body tokens, body probabilities) of one sequence."""
        task = TaskKind(task)
        prompt = np.asarray(prompt, dtype=np.int64)
        body_len = self._codec_cfg.body_length(task)
        if self._mode == "mad":
            result = ensemble_refine(
                lambda inputs: self._mad_probs(task, inputs, len(prompt), memory),
                prompt,
                body_len,
                self._cfg.schedule(task),
                self._vocab.mask_id,
                rng,
                combiner=self._cfg.combiner,
                log_level=self._log_level,
            )
            return result.tokens, result.probs
        seq = np.concatenate([prompt, [self._vocab.start_id]])
        tokens, probs = ar_generate(
            self._model,
            seq,
            memory,
            len(seq) + body_len,
            allowed=task_vocab_filter(task, self._vocab),
        )
        tokens = tokens.cpu().numpy()
        return self._cut_at_end(task, tokens), probs.double().cpu().numpy()

    def predict(
        self, image: np.ndarray, rng: Optional[np.random.Generator] = None
    ) -> MultiTaskPrediction:
        """Return predictions of all configured tasks for one image."""
        if rng is None:
            rng = np.random.default_rng(self._cfg.refine_seed)
        vocab = self._vocab
        calls = self._model.decoder_calls
        memory = self.encode(image)
        out = MultiTaskPrediction()

        if TaskKind.DETECTION in self._tasks:
            prompt = [vocab.prompt_id(TaskKind.DETECTION)]
            tokens, probs = self.decode_task(TaskKind.DETECTION, prompt, memory, rng)
            out.detections = [
                d
                for d in decode_detection(tokens, probs, vocab, out.diagnostics)
                if d.score >= self._cfg.min_score
            ]
        for det in out.detections:
            if TaskKind.SEGMENTATION in self._tasks:
                prompt = instance_prompt(
                    TaskKind.SEGMENTATION, det.box, det.class_id, vocab
                )
                _, probs = self.decode_task(
                    TaskKind.SEGMENTATION, prompt, memory, rng
                )
                _, binary = decode_segmentation(probs, vocab, self._codec_cfg.mask_side)
                out.masks.append(
                    MaskPrediction(det.box, det.class_id, det.score, binary)
                )
            if (
                TaskKind.KEYPOINT in self._tasks
                and det.class_id == self._cfg.keypoint_class
            ):
                prompt = instance_prompt(
                    TaskKind.KEYPOINT, det.box, det.class_id, vocab
                )
                tokens, probs = self.decode_task(
                    TaskKind.KEYPOINT, prompt, memory, rng
                )
                kps = decode_keypoint(tokens, probs, vocab, out.diagnostics)
                out.keypoints.append(KeypointPrediction(det.box, kps, det.score))
        if TaskKind.CAPTIONING in self._tasks:
            prompt = [vocab.prompt_id(TaskKind.CAPTIONING)]
            tokens, _ = self.decode_task(TaskKind.CAPTIONING, prompt, memory, rng)
            out.caption = decode_caption(tokens, vocab, out.diagnostics)
        out.decoder_passes = self._model.decoder_calls - calls
        return out


def run_inference(
    model: MaskedAutoDecoder,
    vocab: Vocab,
    image: np.ndarray,
    codec_cfg: CodecConfig,
    cfg: Optional[InferenceConfig] = None,
    mode: str = "mad",
    seed: int = 0,
) -> MultiTaskPrediction:
    """Return all-task predictions of one image."""
    predictor = Predictor(model, vocab, codec_cfg, cfg=cfg, mode=mode)
    return predictor.predict(image, np.random.default_rng(seed))


def evaluate(
    model: MaskedAutoDecoder,
    vocab: Vocab,
    records: Sequence[DatasetRecord],
    codec_cfg: CodecConfig,
    cfg: Optional[InferenceConfig] = None,
    mode: str = "mad",
    tasks: Optional[Sequence[TaskKind]] = None,
    log_level: int = 0,
) -> EvalReport:
    """Predict every record and score the predictions.

    The refinement generator of record i is seeded with (refine_seed,
    record_id), so reports do not depend on record order.

    """
    cfg = cfg or InferenceConfig()
    predictor = Predictor(
        model, vocab, codec_cfg, cfg=cfg, mode=mode, tasks=tasks, log_level=log_level
    )
    if log_level:
        t1 = time.time()
        print(f" evaluating {len(records)} images ({mode}) ...")
    preds = []
    times = []
    for rec in records:
        rng = np.random.default_rng([cfg.refine_seed, rec.record_id])
        t0 = time.perf_counter()
        preds.append(predictor.predict(rec.image, rng))
        times.append(1000.0 * (time.perf_counter() - t0))

    gts = [rec.annotation.instances for rec in records]
    report = EvalReport(mode=mode, num_images=len(records))
    if records:
        det = eval_detection([p.detections for p in preds], gts)
        report.det_ap50 = det.ap50
        report.det_map = det.mean_ap
        report.seg_ap50 = eval_segmentation(
            [p.masks for p in preds],
            gts,
            [rec.image.shape[:2] for rec in records],
        )
        report.kpt_pck = eval_keypoints([p.keypoints for p in preds], gts)
        captioned = [(p, r) for p, r in zip(preds, records) if r.annotation.captions]
        report.caption_bleu4 = corpus_bleu4(
            [p.caption for p, _ in captioned],
            [r.annotation.captions for _, r in captioned],
        )
        report.decoder_passes = int(sum(p.decoder_passes for p in preds))
        report.mean_ms = float(np.mean(times))
        report.median_ms = float(np.median(times))
        report.diagnostics = summarize_diagnostics([p.diagnostics for p in preds])
    if log_level:
        print(
            f"  - det AP50 = {report.det_ap50:.4f}, seg AP50 = {report.seg_ap50:.4f},"
            f" PCK = {report.kpt_pck:.4f}, BLEU4 = {report.caption_bleu4:.4f}"
        )
        print("  - elapsed time =", time.time() - t1, "(s)")
    return report
