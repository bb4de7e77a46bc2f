"""Masked reconstruction loss, task-mixed batches and the optimization step."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from madseq.codec import (
    CodecConfig,
    TaskSequence,
    encode_caption,
    encode_detection,
    encode_keypoint,
    encode_segmentation,
)
from madseq.dataset import DatasetRecord
from madseq.masking import (
    MASK_STRATEGIES,
    MaskedView,
    mask_fully,
    mask_partial,
    retarget,
    train_mask_ratios,
)
from madseq.matching import (
    caption_target,
    detection_targets,
    placement_targets,
    slot_predictions,
)
from madseq.model import MaskedAutoDecoder, image_tensor, restricted_log_softmax
from madseq.vocab import TaskKind, Vocab, task_vocab_filter

TASK_NAMES = tuple(t.name.lower() for t in TaskKind)


class NonFiniteLossError(RuntimeError):
    """Training step produced a NaN or infinite loss."""


def task_kind(name: Union[str, TaskKind]) -> TaskKind:
    """Return TaskKind of a lower case task name."""
    if isinstance(name, TaskKind):
        return name
    try:
        return TaskKind[str(name).upper()]
    except KeyError as exc:
        raise ValueError(f"Unknown task '{name}', use one of {TASK_NAMES}.") from exc


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Parameters
    ----------
    task_weights : tuple[float, float, float, float]
        Loss weight of detection, segmentation, keypoint and captioning.
    train_mask_ratio : float
        Ratio of the partly masked view for the "single" strategy.
    mask_strategy : str
        "single", "random" or "multiple".
    masked_training : bool
        Add partly masked views. Without them only fully masked views are
        trained (plain parallel decoding).
    lr, stem_lr, weight_decay : float
        AdamW settings; the stem uses stem_lr.
    lr_drop_fraction, lr_drop_factor : float
        The learning rate is multiplied by lr_drop_factor once
        lr_drop_fraction of total_steps have been taken.
    clip_norm : float
        Global gradient norm clip, 0 disables clipping.
    max_instances : int
        Segmentation and keypoint instances sampled per image.
    cost_class, cost_box : float
        Matching cost weights.
    detection_targets : str
        "hungarian" matches slot predictions to ground truth, "placement"
        supervises the slots the ground truth was injected into.
    decoding : str
        "mad" or "ar".
    tasks : tuple[str, ...]
        Tasks to train.

    """

    task_weights: tuple[float, ...] = (1.5, 2.7, 0.5, 0.3)
    train_mask_ratio: float = 0.7
    mask_strategy: str = "single"
    masked_training: bool = True
    lr: float = 1e-4
    stem_lr: float = 1e-5
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 0.1
    batch_size: int = 8
    total_steps: int = 2000
    seed: int = 0
    clip_norm: float = 0.1
    max_instances: int = 10
    cost_class: float = 2.0
    cost_box: float = 5.0
    detection_targets: str = "hungarian"
    decoding: str = "mad"
    tasks: tuple[str, ...] = TASK_NAMES
    augment: bool = False
    log_interval: int = 10
    checkpoint_interval: int = 0
    eval_interval: int = 0
    eval_images: int = 50

    def __post_init__(self):
        """Validate settings."""
        object.__setattr__(
            self, "task_weights", tuple(float(w) for w in self.task_weights)
        )
        object.__setattr__(self, "tasks", tuple(str(t) for t in self.tasks))
        if len(self.task_weights) != len(TaskKind):
            raise ValueError(f"task_weights needs {len(TaskKind)} entries.")
        if any(w < 0 for w in self.task_weights):
            raise ValueError("task_weights must be non-negative.")
        if not 0 < self.train_mask_ratio < 1:
            raise ValueError("train_mask_ratio must be in (0, 1).")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {MASK_STRATEGIES}.")
        if self.detection_targets not in ("hungarian", "placement"):
            raise ValueError("detection_targets must be 'hungarian' or 'placement'.")
        if self.decoding not in ("mad", "ar"):
            raise ValueError("decoding must be 'mad' or 'ar'.")
        if not self.tasks:
            raise ValueError("No task selected.")
        for t in self.tasks:
            task_kind(t)
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0.")
        if not 0 <= self.lr_drop_fraction <= 1:
            raise ValueError("lr_drop_fraction must be in [0, 1].")

    @property
    def task_kinds(self) -> tuple[TaskKind, ...]:
        """Return selected tasks in TaskKind order."""
        selected = {task_kind(t) for t in self.tasks}
        return tuple(t for t in TaskKind if t in selected)

    def weight(self, task: TaskKind) -> float:
        """Return W_t."""
        return self.task_weights[int(task)]

    def to_dict(self) -> dict:
        """Return plain dict."""
        return asdict(self)


@dataclass
class TaskSample:
    """Sequences of one task instance with its training views.

    ``candidates`` holds one sequence, or one per reference caption. ``full``
    is the fully masked view and ``partial[c]`` the partly masked views of
    candidate c (empty in autoregressive mode).

    """

    task: TaskKind
    image_index: int
    candidates: list[TaskSequence]
    full: Optional[MaskedView] = None
    partial: list[list[MaskedView]] = field(default_factory=list)
    gt_boxes: Optional[np.ndarray] = None
    gt_classes: Optional[np.ndarray] = None


@dataclass
class TrainBatch:
    """Images and the task samples drawn from their annotations."""

    images: torch.Tensor
    samples: list[TaskSample]

    def of_task(self, task: TaskKind) -> list[TaskSample]:
        """Return samples of a task."""
        return [s for s in self.samples if s.task == task]

    @property
    def num_views(self) -> int:
        """Return number of decoder input sequences."""
        n = 0
        for s in self.samples:
            n += 1 if s.full is None else 1 + sum(len(p) for p in s.partial)
        return n


@dataclass
class TaskOutput:
    """All-layer body logits of the views of one task and their targets.

    ``logits`` is (layers, views, L, V); ``inputs``, ``targets`` and
    ``loss_mask`` are (views, L), ``inputs`` being the decoder input tokens
    aligned with the logits.

    """

    task: TaskKind
    logits: torch.Tensor
    targets: np.ndarray
    loss_mask: np.ndarray
    inputs: Optional[np.ndarray] = None


@dataclass
class LossBreakdown:
    """Weighted losses of one step.

    ``per_task`` holds W_t times the layer-averaged loss of every task and
    ``per_layer`` the weighted loss of every decoder layer summed over tasks.
    The total equals the sum of ``per_task`` and the mean of ``per_layer``.

    """

    total: torch.Tensor
    per_task: dict[TaskKind, torch.Tensor] = field(default_factory=dict)
    per_layer: Optional[torch.Tensor] = None
    n_masked: dict[TaskKind, int] = field(default_factory=dict)

    def to_record(self) -> dict:
        """Return JSON-ready floats."""
        return {
            "loss": float(self.total.detach()),
            "per_task": {
                t.name.lower(): float(v.detach()) for t, v in self.per_task.items()
            },
            "per_layer": (
                []
                if self.per_layer is None
                else [float(v) for v in self.per_layer.detach().cpu()]
            ),
            "n_masked": {t.name.lower(): n for t, n in self.n_masked.items()},
        }


def masked_ce(
    logits: torch.Tensor,
    targets,
    loss_mask,
    allowed,
    weight: float = 1.0,
) -> torch.Tensor:
    """Return W_t times the per-view mean cross entropy at masked positions.

    Parameters
    ----------
    logits : torch.Tensor
        (L, V) or (views, L, V) body logits.
    targets : array_like
        (L,) or (views, L) target ids.
    loss_mask : array_like
        Positions entering the loss (masked and supervised).
    allowed : array_like
        Task vocabulary filter; the softmax is normalized over it only.
    weight : float, optional
        W_t. Default is 1.

    Views without loss positions contribute zero. Gradients at excluded
    positions and at ids outside the filter are exactly zero.

    """
    device = logits.device
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long, device=device)
    loss_mask = torch.as_tensor(np.asarray(loss_mask), dtype=torch.bool, device=device)
    if logits.dim() == 2:
        logits, targets, loss_mask = logits[None], targets[None], loss_mask[None]
    allowed = torch.as_tensor(np.asarray(allowed), dtype=torch.long, device=device)
    in_filter = torch.zeros(logits.shape[-1], dtype=torch.bool, device=device)
    in_filter[allowed] = True
    if bool((loss_mask & ~in_filter[targets]).any()):
        bad = targets[loss_mask & ~in_filter[targets]].unique().tolist()
        raise ValueError(f"Targets {bad} are outside the task vocabulary filter.")
    logp = restricted_log_softmax(logits, allowed)
    safe = torch.where(loss_mask, targets, allowed[0])
    nll = -logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    nll = torch.where(loss_mask, nll, torch.zeros_like(nll))
    n = loss_mask.sum(dim=-1).clamp(min=1)
    return weight * (nll.sum(dim=-1) / n).sum()


def total_loss(
    outputs: Sequence[TaskOutput], vocab: Vocab, cfg: TrainConfig
) -> LossBreakdown:
    """Return weighted losses averaged over decoder layers."""
    per_task: dict[TaskKind, torch.Tensor] = {}
    n_masked: dict[TaskKind, int] = {}
    per_layer = None
    for out in outputs:
        allowed = task_vocab_filter(out.task, vocab)
        w = cfg.weight(out.task)
        layer_losses = torch.stack(
            [
                masked_ce(layer_logits, out.targets, out.loss_mask, allowed, w)
                for layer_logits in out.logits
            ]
        )
        loss = layer_losses.mean()
        per_task[out.task] = per_task[out.task] + loss if out.task in per_task else loss
        per_layer = layer_losses if per_layer is None else per_layer + layer_losses
        n_masked[out.task] = n_masked.get(out.task, 0) + int(
            np.count_nonzero(out.loss_mask)
        )
    if per_task:
        total = torch.stack(list(per_task.values())).sum()
    else:
        total = torch.zeros(())
    return LossBreakdown(
        total=total, per_task=per_task, per_layer=per_layer, n_masked=n_masked
    )


def _sample_instances(instances, limit: int, rng: np.random.Generator) -> list:
    if len(instances) <= limit:
        return list(instances)
    picks = np.sort(rng.choice(len(instances), limit, replace=False))
    return [instances[i] for i in picks]


def _task_candidates(
    task: TaskKind,
    record: DatasetRecord,
    vocab: Vocab,
    codec_cfg: CodecConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[tuple[list[TaskSequence], dict]]:
    ann = record.annotation
    if task is TaskKind.DETECTION:
        gt_first = cfg.decoding == "ar"
        seq = encode_detection(ann, vocab, codec_cfg, rng, gt_first=gt_first)
        injected = seq.slot_source[seq.slot_is_gt]
        gt = {
            "gt_boxes": np.array(
                [ann.instances[i].box for i in injected], dtype="double"
            ).reshape(-1, 4),
            "gt_classes": np.array(
                [ann.instances[i].class_id for i in injected], dtype=np.int64
            ),
        }
        return [([seq], gt)]
    if task is TaskKind.SEGMENTATION:
        chosen = _sample_instances(ann.instances, cfg.max_instances, rng)
        return [([encode_segmentation(inst, vocab, codec_cfg)], {}) for inst in chosen]
    if task is TaskKind.KEYPOINT:
        persons = [inst for inst in ann.instances if inst.keypoints is not None]
        chosen = _sample_instances(persons, cfg.max_instances, rng)
        return [
            ([encode_keypoint(inst, vocab, codec_cfg, rng)], {}) for inst in chosen
        ]
    if not ann.captions:
        return []
    cands = [encode_caption(c, vocab, codec_cfg, rng) for c in ann.captions]
    if cfg.decoding == "ar":
        cands = [cands[int(rng.integers(len(cands)))]]
    return [(cands, {})]


def build_batch(
    records: Sequence[DatasetRecord],
    vocab: Vocab,
    codec_cfg: CodecConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainBatch:
    """Return sequences and training views of every task present in the images.

    In masked mode every sample gets one fully masked view and, with masked
    training, partly masked views whose ratios follow the mask strategy.
    Images lacking a task's annotations contribute no sample of that task.

    """
    if cfg.decoding == "ar" and not vocab.has_sequence_tokens:
        raise ValueError("Autoregressive training needs <start>/<end> tokens.")
    samples = []
    for i, record in enumerate(records):
        for task in cfg.task_kinds:
            for cands, gt in _task_candidates(task, record, vocab, codec_cfg, cfg, rng):
                sample = TaskSample(task=task, image_index=i, candidates=cands, **gt)
                if cfg.decoding == "mad":
                    sample.full = mask_fully(cands[0], vocab.mask_id)
                    if cfg.masked_training:
                        ratios = train_mask_ratios(
                            cfg.mask_strategy, cfg.train_mask_ratio, rng
                        )
                        sample.partial = [
                            [mask_partial(c, r, vocab.mask_id, rng) for r in ratios]
                            for c in cands
                        ]
                samples.append(sample)
    return TrainBatch(images=image_tensor([r.image for r in records]), samples=samples)


def _mad_targets(
    sample: TaskSample, probs: np.ndarray, vocab: Vocab, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray, int]:
    """Return (targets, supervise, chosen candidate) from full-view predictions."""
    seq = sample.candidates[0]
    if sample.task is TaskKind.DETECTION:
        if cfg.detection_targets == "placement":
            t = placement_targets(seq, vocab)
        else:
            t = detection_targets(
                slot_predictions(probs, vocab),
                sample.gt_boxes,
                sample.gt_classes,
                seq,
                vocab,
                cfg.cost_class,
                cfg.cost_box,
            )
        return t.tokens, t.supervise, 0
    if sample.task is TaskKind.CAPTIONING and len(sample.candidates) > 1:
        k = caption_target(probs, [c.body for c in sample.candidates])
        chosen = sample.candidates[k]
        return chosen.body, chosen.supervise, k
    return seq.body, seq.supervise, 0


def _decode_views(
    model: MaskedAutoDecoder,
    memory: torch.Tensor,
    views: Sequence[MaskedView],
    image_index: Sequence[int],
) -> torch.Tensor:
    """Return (layers, views, L, V) body logits of equally long views."""
    device = memory.device
    tokens = torch.as_tensor(
        np.stack([v.input_tokens for v in views]), dtype=torch.long, device=device
    )
    index = torch.as_tensor(image_index, dtype=torch.long, device=device)
    logits = model.decode(tokens, memory[index])
    return logits[:, :, views[0].prompt_len :]


def mad_task_output(
    model: MaskedAutoDecoder,
    memory: torch.Tensor,
    samples: Sequence[TaskSample],
    vocab: Vocab,
    cfg: TrainConfig,
) -> TaskOutput:
    """Decode all views of one task and attach targets.

    Targets come from the detached last-layer predictions on the fully masked
    views. Detection targets are only known after matching, so the partly
    masked detection views are rebuilt over the matched target body (same
    masked positions) and decoded in a second call; every other task decodes
    all its views in one call. Partly masked views of caption references that
    were not chosen get no loss positions.

    """
    task = samples[0].task
    full_views = [s.full for s in samples]
    full_images = [s.image_index for s in samples]
    rows = []
    for s_idx, s in enumerate(samples):
        for c_idx, views in enumerate(s.partial):
            rows.extend((s_idx, c_idx, view) for view in views)
    rematch = task is TaskKind.DETECTION and bool(rows)

    if rematch:
        full_logits = _decode_views(model, memory, full_views, full_images)
    else:
        full_logits = _decode_views(
            model,
            memory,
            full_views + [view for _, _, view in rows],
            full_images + [samples[s_idx].image_index for s_idx, _, _ in rows],
        )
    with torch.no_grad():
        probs = (
            full_logits[-1, : len(samples)].softmax(dim=-1).double().cpu().numpy()
        )
    picked = [_mad_targets(s, p, vocab, cfg) for s, p in zip(samples, probs)]

    if rematch:
        rows = [
            (s_idx, c_idx, retarget(view, *picked[s_idx][:2], vocab.mask_id))
            for s_idx, c_idx, view in rows
        ]
        partial_logits = _decode_views(
            model,
            memory,
            [view for _, _, view in rows],
            [samples[s_idx].image_index for s_idx, _, _ in rows],
        )
        body_logits = torch.cat([full_logits, partial_logits], dim=1)
    else:
        body_logits = full_logits

    views = full_views + [view for _, _, view in rows]
    inputs = np.stack([v.input_tokens[v.prompt_len :] for v in views])
    n_rows = len(samples) + len(rows)
    targets = np.empty((n_rows, body_logits.shape[2]), dtype=np.int64)
    loss_mask = np.zeros(targets.shape, dtype=bool)
    for s_idx in range(len(samples)):
        tgt, sup, _ = picked[s_idx]
        targets[s_idx] = tgt
        loss_mask[s_idx] = sup
    for r, (s_idx, c_idx, view) in enumerate(rows, start=len(samples)):
        tgt, sup, chosen = picked[s_idx]
        targets[r] = tgt
        if c_idx == chosen:
            loss_mask[r] = view.mask & sup
    return TaskOutput(task, body_logits, targets, loss_mask, inputs)


def ar_view(
    seq: TaskSequence, vocab: Vocab
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (input, target, supervise) of next-token training.

    Input is prompt + <start> + body; targets are body + <end>, aligned with
    the input positions from <start> on. Detection noise slots are trained to
    predict NOISE at their class position only.

    """
    if seq.task is TaskKind.DETECTION:
        t = placement_targets(seq, vocab)
        body_targets, supervise = t.tokens, t.supervise
    else:
        body_targets, supervise = seq.body, seq.supervise
    inputs = np.concatenate([seq.prompt, [vocab.start_id], seq.body]).astype(np.int64)
    targets = np.concatenate([body_targets, [vocab.end_id]]).astype(np.int64)
    supervise = np.concatenate([supervise, [True]])
    return inputs, targets, supervise


def ar_task_output(
    model: MaskedAutoDecoder,
    memory: torch.Tensor,
    samples: Sequence[TaskSample],
    vocab: Vocab,
) -> TaskOutput:
    """Decode the shifted target sequences of one task with the causal mask."""
    views = [ar_view(s.candidates[0], vocab) for s in samples]
    prompt_len = len(samples[0].candidates[0].prompt)
    device = memory.device
    tokens = torch.as_tensor(
        np.stack([v[0] for v in views]), dtype=torch.long, device=device
    )
    index = torch.as_tensor(
        [s.image_index for s in samples], dtype=torch.long, device=device
    )
    logits = model.decode(tokens, memory[index], causal=True)
    return TaskOutput(
        task=samples[0].task,
        logits=logits[:, :, prompt_len:],
        targets=np.stack([v[1] for v in views]),
        loss_mask=np.stack([v[2] for v in views]),
        inputs=np.stack([v[0][prompt_len:] for v in views]),
    )


def build_optimizer(
    model: MaskedAutoDecoder, cfg: TrainConfig
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.MultiStepLR]:
    """Return AdamW with a separate stem parameter group and its step schedule."""
    stem_ids = {id(p) for p in model.stem_parameters()}
    rest = [p for p in model.parameters() if id(p) not in stem_ids]
    optimizer = torch.optim.AdamW(
        [
            {"params": rest, "lr": cfg.lr},
            {"params": model.stem_parameters(), "lr": cfg.stem_lr},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    milestone = max(int(round(cfg.lr_drop_fraction * cfg.total_steps)), 1)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=[milestone], gamma=cfg.lr_drop_factor
    )
    return optimizer, scheduler


def _dump_diagnostics(
    breakdown: LossBreakdown, path: Optional[Path], log_level: int
) -> dict:
    record = breakdown.to_record()
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=1, sort_keys=True)
    if log_level:
        print(" non-finite loss:", json.dumps(record, sort_keys=True))
    return record


def train_step(
    model: MaskedAutoDecoder,
    optimizer: torch.optim.Optimizer,
    batch: TrainBatch,
    vocab: Vocab,
    cfg: TrainConfig,
    scheduler=None,
    diagnostics_path: Optional[Union[str, Path]] = None,
    log_level: int = 0,
) -> LossBreakdown:
    """Run one forward/backward pass and one optimizer update.

    The images are encoded once; each task then decodes its views on the
    shared memory, detection with a second call for its partly masked views.
    A non-finite loss dumps diagnostics and raises NonFiniteLossError before
    any parameter is changed.

    """
    model.train()
    memory = model.encode(batch.images.to(next(model.parameters()).device))
    outputs = []
    for task in cfg.task_kinds:
        samples = batch.of_task(task)
        if not samples:
            continue
        if cfg.decoding == "ar":
            outputs.append(ar_task_output(model, memory, samples, vocab))
        else:
            outputs.append(mad_task_output(model, memory, samples, vocab, cfg))
    if not outputs:
        raise ValueError("Batch has no sample of the selected tasks.")
    breakdown = total_loss(outputs, vocab, cfg)
    if not torch.isfinite(breakdown.total):
        record = _dump_diagnostics(
            breakdown,
            None if diagnostics_path is None else Path(diagnostics_path),
            log_level,
        )
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteLossError(f"Non-finite loss: {record}")

    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    if cfg.clip_norm > 0:
        nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    if log_level > 1:
        for i, v in enumerate(breakdown.to_record()["per_layer"]):
            print(f"  - layer {i + 1}: loss = {v:.6f}")
    return breakdown
