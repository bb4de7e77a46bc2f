"""Conversion between annotations and task sequences."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from madseq.vocab import (
    Special,
    TaskKind,
    TokenKind,
    Vocab,
    dequantize_coords,
    quantize_coords,
)


@dataclass
class Instance:
    """Ground truth of one object.

    Parameters
    ----------
    box : tuple[float, float, float, float]
        (x_min, y_min, x_max, y_max) normalized to [0, 1].
    class_id : int
        Category index.
    bitmask : np.ndarray
        Binary grid covering the box region, shape=(rows, cols), dtype=bool.
    keypoints : np.ndarray, optional
        (x, y, visible) rows with normalized x, y. shape=(K, 3)

    """

    box: tuple[float, float, float, float]
    class_id: int
    bitmask: np.ndarray
    keypoints: Optional[np.ndarray] = None


@dataclass
class SceneAnnotation:
    """Ground truth of one image; ``image_size`` is (width, height) in pixels."""

    image_size: tuple[int, int]
    instances: list[Instance] = field(default_factory=list)
    captions: list[list[str]] = field(default_factory=list)

    def validate(self, num_classes: int) -> None:
        """Raise ValueError when an instance breaks the annotation invariants."""
        for i, inst in enumerate(self.instances):
            check_box(inst.box, f"instance {i}")
            if not 0 <= inst.class_id < num_classes:
                raise ValueError(
                    f"instance {i}: class_id {inst.class_id} not in [0, {num_classes})."
                )
            if inst.keypoints is not None:
                kps = np.asarray(inst.keypoints, dtype="double")
                visible = kps[:, 2] > 0
                if np.any((kps[visible, :2] < 0) | (kps[visible, :2] > 1)):
                    raise ValueError(f"instance {i}: visible keypoint outside image.")


@dataclass(frozen=True)
class CodecConfig:
    """Sequence format settings.

    Parameters
    ----------
    num_slots : int
        Detection slots N.
    mask_side : int
        Side M of the segmentation bit mask.
    num_keypoints : int
        Keypoints per person instance.
    caption_len : int
        Caption body length.
    caption_augment : bool
        Replace one input word by a random word.

    """

    num_slots: int = 100
    mask_side: int = 16
    num_keypoints: int = 5
    caption_len: int = 20
    caption_augment: bool = False

    def __post_init__(self):
        """Validate sizes."""
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1.")
        if self.mask_side < 2:
            raise ValueError("mask_side must be >= 2.")
        if self.num_keypoints < 1:
            raise ValueError("num_keypoints must be >= 1.")
        if self.caption_len < 2:
            raise ValueError("caption_len must be >= 2.")

    def body_length(self, task: TaskKind) -> int:
        """Return body length of a task."""
        task = TaskKind(task)
        if task is TaskKind.DETECTION:
            return 5 * self.num_slots
        if task is TaskKind.SEGMENTATION:
            return self.mask_side**2
        if task is TaskKind.KEYPOINT:
            return 3 * self.num_keypoints
        return self.caption_len

    def prompt_length(self, task: TaskKind) -> int:
        """Return prompt length of a task."""
        if TaskKind(task) in (TaskKind.SEGMENTATION, TaskKind.KEYPOINT):
            return 6
        return 1

    def max_sequence_length(self) -> int:
        """Return the longest prompt + body over tasks."""
        return max(self.prompt_length(t) + self.body_length(t) for t in TaskKind)


@dataclass
class TaskSequence:
    """Prompt and body tokens of one task instance.

    ``input_body`` differs from ``body`` only for an augmented caption, at
    ``augmented_position``. ``slot_source`` gives for every detection slot the
    index of the injected instance, or -1 for a noise object.

    """

    task: TaskKind
    prompt: np.ndarray
    body: np.ndarray
    supervise: np.ndarray
    slot_is_gt: Optional[np.ndarray] = None
    slot_source: Optional[np.ndarray] = None
    input_body: Optional[np.ndarray] = None
    augmented_position: Optional[int] = None

    @property
    def visible_body(self) -> np.ndarray:
        """Return body as fed to the decoder at unmasked positions."""
        return self.body if self.input_body is None else self.input_body


@dataclass
class DetectedBox:
    """Decoded detection."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float
    slot: int = -1


def check_box(box: Sequence[float], where: str = "box") -> None:
    """Raise ValueError unless 0 <= x_min < x_max <= 1 and same for y."""
    if len(box) != 4 or not np.all(np.isfinite(box)):
        raise ValueError(f"{where}: box must be 4 finite numbers, got {box}.")
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
        raise ValueError(f"{where}: invalid box {tuple(box)}.")


def box_tokens(box: Sequence[float], vocab: Vocab) -> list[int]:
    """Return coordinate tokens of a box."""
    bins = quantize_coords(box, vocab.num_bins)
    return [vocab.coord_id(b) for b in bins]


def instance_prompt(
    task: TaskKind, box: Sequence[float], class_id: int, vocab: Vocab
) -> np.ndarray:
    """Return [<task>, qx_min, qy_min, qx_max, qy_max, class] prompt."""
    return np.array(
        [vocab.prompt_id(task)] + box_tokens(box, vocab) + [vocab.class_id(class_id)],
        dtype=np.int64,
    )


def encode_detection(
    ann: SceneAnnotation,
    vocab: Vocab,
    cfg: CodecConfig,
    rng: np.random.Generator,
    gt_first: bool = False,
) -> TaskSequence:
    """Return detection sequence with ground truth injected among noise objects.

    N noise objects with uniform random valid boxes and uniform random real
    classes are drawn first. Every ground-truth instance then replaces a
    distinct uniformly chosen slot, or, with ``gt_first``, the leading slots in
    random order. Instances beyond N are dropped by uniform subsampling.

    """
    for i, inst in enumerate(ann.instances):
        check_box(inst.box, f"instance {i}")
    n = cfg.num_slots
    nb = vocab.num_bins
    coord0 = vocab.range_of(TokenKind.COORD)[0]

    xs = np.sort(
        np.array([rng.choice(nb, 2, replace=False) for _ in range(n)]), axis=1
    )
    ys = np.sort(
        np.array([rng.choice(nb, 2, replace=False) for _ in range(n)]), axis=1
    )
    classes = rng.integers(0, vocab.num_classes, size=n)
    slots = np.empty((n, 5), dtype=np.int64)
    slots[:, 0] = coord0 + xs[:, 0]
    slots[:, 1] = coord0 + ys[:, 0]
    slots[:, 2] = coord0 + xs[:, 1]
    slots[:, 3] = coord0 + ys[:, 1]
    slots[:, 4] = [vocab.class_id(c) for c in classes]

    indices = np.arange(len(ann.instances))
    if len(indices) > n:
        indices = np.sort(rng.choice(len(indices), n, replace=False))
    if gt_first:
        targets = np.arange(len(indices))
        indices = rng.permutation(indices)
    else:
        targets = rng.choice(n, len(indices), replace=False)

    slot_source = np.full(n, -1, dtype=np.int64)
    for slot, idx in zip(targets, indices):
        inst = ann.instances[idx]
        slots[slot, :4] = box_tokens(inst.box, vocab)
        slots[slot, 4] = vocab.class_id(inst.class_id)
        slot_source[slot] = idx

    body = slots.reshape(-1)
    return TaskSequence(
        task=TaskKind.DETECTION,
        prompt=np.array([vocab.prompt_id(TaskKind.DETECTION)], dtype=np.int64),
        body=body,
        supervise=np.ones(len(body), dtype=bool),
        slot_is_gt=slot_source >= 0,
        slot_source=slot_source,
    )


def resample_nearest(grid: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Resample a 2D array to (rows, cols) by nearest neighbor (cell centers)."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] == 0:
        raise ValueError(f"Cannot resample grid of shape {grid.shape}.")
    ri = np.floor((np.arange(rows) + 0.5) * grid.shape[0] / rows).astype(int)
    ci = np.floor((np.arange(cols) + 0.5) * grid.shape[1] / cols).astype(int)
    ri = np.minimum(ri, grid.shape[0] - 1)
    ci = np.minimum(ci, grid.shape[1] - 1)
    return grid[np.ix_(ri, ci)]


def encode_segmentation(
    instance: Instance, vocab: Vocab, cfg: CodecConfig
) -> TaskSequence:
    """Return row-major foreground/background sequence of an instance mask."""
    check_box(instance.box, "segmentation instance")
    m = cfg.mask_side
    grid = resample_nearest(np.asarray(instance.bitmask, dtype=bool), m, m)
    fg = vocab.special_id(Special.FOREGROUND)
    bg = vocab.special_id(Special.BACKGROUND)
    body = np.where(grid.reshape(-1), fg, bg).astype(np.int64)
    return TaskSequence(
        task=TaskKind.SEGMENTATION,
        prompt=instance_prompt(
            TaskKind.SEGMENTATION, instance.box, instance.class_id, vocab
        ),
        body=body,
        supervise=np.ones(len(body), dtype=bool),
    )


def encode_keypoint(
    instance: Instance, vocab: Vocab, cfg: CodecConfig, rng: np.random.Generator
) -> TaskSequence:
    """Return [x, y, visibility] triplets of an instance.

    Invisible keypoints get coordinates drawn uniformly from the bins inside
    the box. Missing keypoints are treated as invisible.

    """
    check_box(instance.box, "keypoint instance")
    k = cfg.num_keypoints
    if instance.keypoints is None:
        kps = np.zeros((k, 3), dtype="double")
    else:
        kps = np.asarray(instance.keypoints, dtype="double")
        if kps.shape != (k, 3):
            raise ValueError(
                f"Expected {k} keypoints, got array of shape {kps.shape}."
            )
    nb = vocab.num_bins
    qbox = quantize_coords(instance.box, nb)
    visible = kps[:, 2] > 0
    qx = quantize_coords(kps[:, 0], nb)
    qy = quantize_coords(kps[:, 1], nb)
    n_invisible = int(np.count_nonzero(~visible))
    qx[~visible] = rng.integers(qbox[0], qbox[2] + 1, size=n_invisible)
    qy[~visible] = rng.integers(qbox[1], qbox[3] + 1, size=n_invisible)
    vis_id = vocab.special_id(Special.VISIBLE)
    invis_id = vocab.special_id(Special.INVISIBLE)
    coord0 = vocab.range_of(TokenKind.COORD)[0]
    body = np.empty((k, 3), dtype=np.int64)
    body[:, 0] = coord0 + qx
    body[:, 1] = coord0 + qy
    body[:, 2] = np.where(visible, vis_id, invis_id)
    body = body.reshape(-1)
    return TaskSequence(
        task=TaskKind.KEYPOINT,
        prompt=instance_prompt(
            TaskKind.KEYPOINT, instance.box, instance.class_id, vocab
        ),
        body=body,
        supervise=np.ones(len(body), dtype=bool),
    )


def encode_caption(
    caption: Sequence[str],
    vocab: Vocab,
    cfg: CodecConfig,
    rng: Optional[np.random.Generator] = None,
) -> TaskSequence:
    """Return caption sequence truncated or PAD-padded to caption_len.

    With ``cfg.caption_augment`` one non-pad input position is replaced by a
    different uniformly drawn word; the target keeps the original.

    """
    ids = [vocab.word_id(w) for w in caption][: cfg.caption_len]
    n_words = len(ids)
    body = np.full(cfg.caption_len, vocab.pad_id, dtype=np.int64)
    body[:n_words] = ids
    seq = TaskSequence(
        task=TaskKind.CAPTIONING,
        prompt=np.array([vocab.prompt_id(TaskKind.CAPTIONING)], dtype=np.int64),
        body=body,
        supervise=np.ones(len(body), dtype=bool),
    )
    n_vocab_words = len(vocab.words)
    if cfg.caption_augment and n_words > 0 and n_vocab_words > 1:
        if rng is None:
            raise ValueError("Caption augmentation needs a random generator.")
        pos = int(rng.integers(n_words))
        word0 = vocab.range_of(TokenKind.WORD)[0]
        original = int(body[pos]) - word0
        replacement = int(rng.integers(n_vocab_words - 1))
        if replacement >= original:
            replacement += 1
        seq.input_body = body.copy()
        seq.input_body[pos] = word0 + replacement
        seq.augmented_position = pos
    return seq


def one_hot_probs(tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    """Return (len(tokens), vocab_size) one-hot probabilities."""
    tokens = np.asarray(tokens, dtype=np.int64)
    probs = np.zeros((len(tokens), vocab_size), dtype="double")
    probs[np.arange(len(tokens)), tokens] = 1.0
    return probs


def decode_detection(
    body: Sequence[int],
    probs: np.ndarray,
    vocab: Vocab,
    diagnostics: Optional[Counter] = None,
) -> list[DetectedBox]:
    """Return scored boxes of non-NOISE slots.

    The score is the probability of the chosen class token at the class
    position. Slots whose class or coordinate tokens are of the wrong kind are
    dropped and counted in ``diagnostics``.

    """
    body = np.asarray(body, dtype=np.int64)
    if len(body) % 5:
        raise ValueError(f"Detection body length {len(body)} is not a multiple of 5.")
    if diagnostics is None:
        diagnostics = Counter()
    class0 = vocab.range_of(TokenKind.CLASS)[0]
    coord0 = vocab.range_of(TokenKind.COORD)[0]
    out = []
    for slot, tokens in enumerate(body.reshape(-1, 5)):
        cls = int(tokens[4])
        if cls == vocab.noise_id:
            continue
        if not vocab.is_kind(cls, TokenKind.CLASS):
            diagnostics["detection_bad_class"] += 1
            continue
        if not np.all(vocab.is_kind(tokens[:4], TokenKind.COORD)):
            diagnostics["detection_bad_coord"] += 1
            continue
        x0, y0, x1, y1 = dequantize_coords(tokens[:4] - coord0, vocab.num_bins)
        box = (min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
        out.append(
            DetectedBox(
                box=tuple(float(v) for v in box),
                class_id=cls - class0,
                score=float(probs[5 * slot + 4, cls]),
                slot=slot,
            )
        )
    return out


def decode_segmentation(
    probs: np.ndarray, vocab: Vocab, mask_side: int
) -> tuple[np.ndarray, np.ndarray]:
    """Return (soft mask, binary mask) of shape (M, M).

    soft = p(fg) / (p(fg) + p(bg)); binary = soft > 0.5, ties to background.

    """
    probs = np.asarray(probs, dtype="double")
    pf = probs[:, vocab.special_id(Special.FOREGROUND)]
    pb = probs[:, vocab.special_id(Special.BACKGROUND)]
    denom = pf + pb
    soft = np.divide(pf, denom, out=np.full_like(pf, 0.5), where=denom > 0)
    soft = soft.reshape(mask_side, mask_side)
    return soft, soft > 0.5


def decode_keypoint(
    body: Sequence[int],
    probs: np.ndarray,
    vocab: Vocab,
    diagnostics: Optional[Counter] = None,
) -> np.ndarray:
    """Return (K, 3) rows of (x, y, visibility score).

    A coordinate position holding a non-coordinate token falls back to the
    most probable coordinate bin at that position and is counted.

    """
    body = np.asarray(body, dtype=np.int64)
    probs = np.asarray(probs, dtype="double")
    if diagnostics is None:
        diagnostics = Counter()
    coord0, nb = vocab.range_of(TokenKind.COORD)
    pv = probs[2::3, vocab.special_id(Special.VISIBLE)]
    pi = probs[2::3, vocab.special_id(Special.INVISIBLE)]
    denom = pv + pi
    vis = np.divide(pv, denom, out=np.full_like(pv, 0.5), where=denom > 0)
    out = np.empty((len(body) // 3, 3), dtype="double")
    for axis in (0, 1):
        tokens = body[axis::3].copy()
        bad = ~vocab.is_kind(tokens, TokenKind.COORD)
        if np.any(bad):
            diagnostics["keypoint_bad_coord"] += int(np.count_nonzero(bad))
            rows = np.nonzero(bad)[0] * 3 + axis
            tokens[bad] = coord0 + np.argmax(probs[rows, coord0 : coord0 + nb], axis=1)
        out[:, axis] = dequantize_coords(tokens - coord0, nb)
    out[:, 2] = vis
    return out


def decode_caption(
    body: Sequence[int], vocab: Vocab, diagnostics: Optional[Counter] = None
) -> str:
    """Return words up to the first PAD; other non-word tokens are skipped."""
    if diagnostics is None:
        diagnostics = Counter()
    words = []
    for token in body:
        token = int(token)
        if token == vocab.pad_id:
            break
        if vocab.is_kind(token, TokenKind.WORD):
            words.append(vocab.word_of(token))
        else:
            diagnostics["caption_non_word"] += 1
    return " ".join(words)


@dataclass
class RoundTripReport:
    """Encode/decode consistency of one annotation."""

    checked: Counter = field(default_factory=Counter)
    violations: list[str] = field(default_factory=list)

    @property
    def num_violations(self) -> int:
        """Return number of violations."""
        return len(self.violations)


def check_roundtrip(
    ann: SceneAnnotation,
    vocab: Vocab,
    cfg: CodecConfig,
    rng: np.random.Generator,
) -> RoundTripReport:
    """Encode every task of an annotation, decode it back and compare.

    Injected boxes must come back within half a bin, masks and keypoint
    visibility exactly, captions word for word up to ``caption_len``.

    """
    report = RoundTripReport()
    tol = 0.5 / vocab.num_bins + 1e-9

    seq = encode_detection(ann, vocab, cfg, rng)
    probs = one_hot_probs(seq.body, vocab.total_size)
    decoded = {d.slot: d for d in decode_detection(seq.body, probs, vocab)}
    for slot in np.flatnonzero(seq.slot_is_gt):
        inst = ann.instances[seq.slot_source[slot]]
        det = decoded.get(int(slot))
        report.checked["detection"] += 1
        if det is None or det.class_id != inst.class_id:
            report.violations.append(f"detection slot {slot}: class lost")
        elif np.max(np.abs(np.subtract(det.box, inst.box))) > tol:
            report.violations.append(f"detection slot {slot}: box {det.box}")

    for i, inst in enumerate(ann.instances):
        seq = encode_segmentation(inst, vocab, cfg)
        _, binary = decode_segmentation(
            one_hot_probs(seq.body, vocab.total_size), vocab, cfg.mask_side
        )
        grid = resample_nearest(np.asarray(inst.bitmask, dtype=bool), *binary.shape)
        report.checked["segmentation"] += 1
        if not np.array_equal(binary, grid):
            report.violations.append(f"segmentation instance {i}: mask differs")
        if inst.keypoints is None:
            continue
        seq = encode_keypoint(inst, vocab, cfg, rng)
        kps = decode_keypoint(
            seq.body, one_hot_probs(seq.body, vocab.total_size), vocab
        )
        gt = np.asarray(inst.keypoints, dtype="double")
        visible = gt[:, 2] > 0
        report.checked["keypoint"] += 1
        if not np.array_equal(kps[:, 2] > 0.5, visible):
            report.violations.append(f"keypoint instance {i}: visibility differs")
        elif np.any(np.abs(kps[visible, :2] - gt[visible, :2]) > tol):
            report.violations.append(f"keypoint instance {i}: location differs")

    for j, caption in enumerate(ann.captions):
        seq = encode_caption(caption, vocab, cfg, rng)
        report.checked["captioning"] += 1
        if decode_caption(seq.body, vocab) != " ".join(caption[: cfg.caption_len]):
            report.violations.append(f"caption {j}: text differs")
    return report
