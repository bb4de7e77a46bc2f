"""Assignment of predictions to ground truth for unambiguous targets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from madseq.codec import TaskSequence, box_tokens
from madseq.vocab import TokenKind, Vocab, dequantize_coords


@dataclass
class Assignment:
    """One-to-one (row, col) pairs and their summed cost."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def rows(self) -> np.ndarray:
        """Return matched rows."""
        return np.array([r for r, _ in self.pairs], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        """Return matched cols."""
        return np.array([c for _, c in self.pairs], dtype=np.int64)


@dataclass
class SlotPredictions:
    """Per-slot class distribution over CLASS ids (NOISE last) and boxes."""

    class_probs: np.ndarray
    boxes: np.ndarray


@dataclass
class DetectionTargets:
    """Reconstruction targets of a detection body."""

    tokens: np.ndarray
    supervise: np.ndarray
    assignment: Assignment


def hungarian(cost) -> Assignment:
    """Return minimum total cost one-to-one assignment of min(rows, cols) pairs.

    Rectangular matrices are handled directly by the solver; this is the same
    optimum as zero-padding to square and discarding pad pairs.

    """
    cost = np.asarray(cost, dtype="double")
    if cost.size == 0:
        return Assignment()
    if cost.ndim != 2:
        raise ValueError(f"Cost matrix must be 2D, got shape {cost.shape}.")
    if not np.all(np.isfinite(cost)):
        raise ValueError("Cost matrix has non-finite entries.")
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return Assignment(pairs=pairs, total_cost=float(cost[rows, cols].sum()))


def detection_cost(
    class_probs: np.ndarray,
    box: Sequence[float],
    gt_box: Sequence[float],
    gt_class: int,
    cost_class: float = 2.0,
    cost_box: float = 5.0,
) -> float:
    """Return cost_class * (1 - p(gt class)) + cost_box * mean |box - gt box|."""
    p = float(np.asarray(class_probs)[gt_class])
    diff = np.asarray(box, "double") - np.asarray(gt_box, "double")
    l1 = float(np.mean(np.abs(diff)))
    return cost_class * (1.0 - p) + cost_box * l1


def detection_cost_matrix(
    slots: SlotPredictions,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    cost_class: float = 2.0,
    cost_box: float = 5.0,
) -> np.ndarray:
    """Return (num_slots, num_gt) matrix of detection_cost entries."""
    gt_boxes = np.asarray(gt_boxes, dtype="double").reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if len(gt_boxes) == 0:
        return np.zeros((len(slots.boxes), 0))
    c_cls = 1.0 - slots.class_probs[:, gt_classes]
    c_box = cdist(slots.boxes, gt_boxes, metric="cityblock") / 4.0
    return cost_class * c_cls + cost_box * c_box


def slot_predictions(body_probs: np.ndarray, vocab: Vocab) -> SlotPredictions:
    """Return slot predictions from detection body probabilities.

    Class distribution is renormalized over the CLASS range at every class
    position; boxes are the dequantized most probable bins.

    """
    body_probs = np.asarray(body_probs, dtype="double")
    class0, n_class = vocab.range_of(TokenKind.CLASS)
    coord0, nb = vocab.range_of(TokenKind.COORD)
    per_slot = body_probs.reshape(-1, 5, body_probs.shape[-1])
    cp = per_slot[:, 4, class0 : class0 + n_class]
    cp = cp / np.maximum(cp.sum(axis=1, keepdims=True), 1e-12)
    bins = np.argmax(per_slot[:, :4, coord0 : coord0 + nb], axis=2)
    return SlotPredictions(class_probs=cp, boxes=dequantize_coords(bins, nb))


def _gt_tokens(gt_boxes, gt_classes, vocab: Vocab) -> np.ndarray:
    rows = [
        box_tokens(b, vocab) + [vocab.class_id(int(c))]
        for b, c in zip(gt_boxes, gt_classes)
    ]
    return np.array(rows, dtype=np.int64).reshape(-1, 5)


def detection_targets(
    slots: SlotPredictions,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    seq: TaskSequence,
    vocab: Vocab,
    cost_class: float = 2.0,
    cost_box: float = 5.0,
) -> DetectionTargets:
    """Return targets from Hungarian matching of slot predictions to ground truth.

    A matched slot is supervised at all 5 positions with the quantized ground
    truth box and class. An unmatched slot is supervised only at its class
    position, with NOISE as target; its coordinates keep the sequence tokens as
    placeholders and are not supervised.

    """
    n_slots = len(seq.body) // 5
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    cost = detection_cost_matrix(slots, gt_boxes, gt_classes, cost_class, cost_box)
    assignment = hungarian(cost)
    tokens = seq.body.reshape(n_slots, 5).copy()
    supervise = np.zeros((n_slots, 5), dtype=bool)
    tokens[:, 4] = vocab.noise_id
    supervise[:, 4] = True
    if assignment.pairs:
        cols = assignment.cols
        tokens[assignment.rows] = _gt_tokens(
            np.asarray(gt_boxes)[cols], gt_classes[cols], vocab
        )
        supervise[assignment.rows] = True
    return DetectionTargets(tokens.reshape(-1), supervise.reshape(-1), assignment)


def placement_targets(seq: TaskSequence, vocab: Vocab) -> DetectionTargets:
    """Return targets that follow where ground truth was injected.

    Slots holding ground truth keep their tokens and are fully supervised;
    noise slots get NOISE at the class position and unsupervised coordinates.

    """
    n_slots = len(seq.body) // 5
    tokens = seq.body.reshape(n_slots, 5).copy()
    supervise = np.zeros((n_slots, 5), dtype=bool)
    is_gt = np.asarray(seq.slot_is_gt, dtype=bool)
    tokens[~is_gt, 4] = vocab.noise_id
    supervise[:, 4] = True
    supervise[is_gt] = True
    gt_slots = np.flatnonzero(is_gt)
    pairs = [(int(s), int(seq.slot_source[s])) for s in gt_slots]
    return DetectionTargets(
        tokens.reshape(-1), supervise.reshape(-1), Assignment(pairs=pairs)
    )


def caption_target(probs: np.ndarray, references: Sequence[np.ndarray]) -> int:
    """Return index of the reference with least negative log-likelihood.

    Ties are broken by the lowest index.

    """
    if len(references) == 0:
        raise ValueError("No caption references.")
    probs = np.asarray(probs, dtype="double")
    logp = np.log(np.clip(probs, 1e-12, None))
    positions = np.arange(probs.shape[0])
    nll = [-float(logp[positions, np.asarray(ref)].sum()) for ref in references]
    return int(np.argmin(nll))
