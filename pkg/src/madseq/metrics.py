"""Detection AP, mask AP, keypoint PCK and BLEU@4."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from madseq.codec import DetectedBox, Instance, resample_nearest

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)


@dataclass
class MaskPrediction:
    """Decoded instance mask with the detection that prompted it."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float
    mask: np.ndarray


@dataclass
class KeypointPrediction:
    """Decoded keypoints of a detected person. ``keypoints`` is (K, 3)."""

    box: tuple[float, float, float, float]
    keypoints: np.ndarray
    score: float = 1.0


@dataclass
class DetectionResult:
    """AP per IoU threshold, averaged over classes with ground truth."""

    thresholds: np.ndarray
    ap: np.ndarray

    @property
    def ap50(self) -> float:
        """Return AP at IoU 0.5."""
        return float(self.ap[np.argmin(np.abs(self.thresholds - 0.5))])

    @property
    def mean_ap(self) -> float:
        """Return AP averaged over thresholds."""
        return float(np.mean(self.ap)) if len(self.ap) else 0.0


@dataclass
class EvalReport:
    """Metrics of one evaluation run. All metrics lie in [0, 1]."""

    mode: str = "mad"
    num_images: int = 0
    det_ap50: float = 0.0
    det_map: float = 0.0
    seg_ap50: float = 0.0
    kpt_pck: float = 0.0
    caption_bleu4: float = 0.0
    decoder_passes: int = 0
    mean_ms: float = 0.0
    median_ms: float = 0.0
    diagnostics: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Return plain dict."""
        return asdict(self)


def box_iou(boxes_a, boxes_b) -> np.ndarray:
    """Return (len(a), len(b)) IoU matrix of (x_min, y_min, x_max, y_max) boxes."""
    a = np.asarray(boxes_a, dtype="double").reshape(-1, 4)
    b = np.asarray(boxes_b, dtype="double").reshape(-1, 4)
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def average_precision(tp: Sequence[float], num_gt: int) -> float:
    """Return all-point interpolated AP of score-sorted true-positive flags."""
    tp = np.asarray(tp, dtype="double")
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo("double").eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_ap(
    preds: Sequence[Sequence[tuple]],
    gts: Sequence[Sequence[tuple]],
    iou_fn: Callable[[list, list], np.ndarray],
    thresholds: Sequence[float],
) -> np.ndarray:
    """Return AP per threshold averaged over classes present in the ground truth.

    ``preds`` holds per image (class, score, item) tuples and ``gts`` per image
    (class, item) tuples. Predictions are visited in decreasing score order and
    each takes the unmatched ground truth of highest IoU if that IoU reaches
    the threshold.

    """
    thresholds = np.asarray(thresholds, dtype="double")
    classes = sorted({c for image in gts for c, _ in image})
    if not classes:
        return np.zeros(len(thresholds))
    ap = np.zeros((len(classes), len(thresholds)))
    for ci, cls in enumerate(classes):
        entries = []
        ious = []
        num_gt = 0
        for img, (p_img, g_img) in enumerate(zip(preds, gts)):
            pc = [x for x in p_img if x[0] == cls]
            gc = [x for x in g_img if x[0] == cls]
            num_gt += len(gc)
            if pc and gc:
                ious.append(iou_fn([x[2] for x in pc], [x[1] for x in gc]))
            else:
                ious.append(np.zeros((len(pc), len(gc))))
            entries += [(float(x[1]), img, k) for k, x in enumerate(pc)]
        scores = np.array([e[0] for e in entries], dtype="double")
        order = np.argsort(-scores, kind="stable")
        for ti, thr in enumerate(thresholds):
            used = [np.zeros(m.shape[1], dtype=bool) for m in ious]
            tp = np.zeros(len(entries))
            for rank, e in enumerate(order):
                _, img, k = entries[e]
                m = ious[img]
                if m.shape[1] == 0:
                    continue
                cand = np.where(used[img], -1.0, m[k])
                j = int(np.argmax(cand))
                if cand[j] >= thr:
                    used[img][j] = True
                    tp[rank] = 1.0
            ap[ci, ti] = average_precision(tp, num_gt)
    return ap.mean(axis=0)


def eval_detection(
    preds: Sequence[Sequence[DetectedBox]],
    gts: Sequence[Sequence[Instance]],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> DetectionResult:
    """Return box AP per IoU threshold over a set of images."""
    p = [[(d.class_id, d.score, d.box) for d in image] for image in preds]
    g = [[(inst.class_id, inst.box) for inst in image] for image in gts]
    ap = _class_ap(p, g, box_iou, iou_thresholds)
    return DetectionResult(np.asarray(iou_thresholds, dtype="double"), ap)


def paste_mask(
    mask: np.ndarray, box: Sequence[float], image_size: tuple[int, int]
) -> np.ndarray:
    """Return (height, width) mask with ``mask`` resized into the box pixels."""
    height, width = image_size
    x0 = min(max(int(math.floor(box[0] * width + 1e-9)), 0), width - 1)
    y0 = min(max(int(math.floor(box[1] * height + 1e-9)), 0), height - 1)
    x1 = min(max(int(math.ceil(box[2] * width - 1e-9)), x0 + 1), width)
    y1 = min(max(int(math.ceil(box[3] * height - 1e-9)), y0 + 1), height)
    out = np.zeros((height, width), dtype=bool)
    out[y0:y1, x0:x1] = resample_nearest(np.asarray(mask, dtype=bool), y1 - y0, x1 - x0)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Return IoU of two equally shaped boolean masks."""
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def eval_segmentation(
    preds: Sequence[Sequence[MaskPrediction]],
    gts: Sequence[Sequence[Instance]],
    image_sizes: Sequence[tuple[int, int]],
    iou_threshold: float = 0.5,
) -> float:
    """Return mask AP at one IoU threshold.

    Predicted and ground-truth masks are both pasted into their boxes at image
    resolution before comparison.

    """
    p_all, g_all = [], []
    for p_img, g_img, size in zip(preds, gts, image_sizes):
        p_all.append(
            [(m.class_id, m.score, paste_mask(m.mask, m.box, size)) for m in p_img]
        )
        g_all.append(
            [
                (inst.class_id, paste_mask(inst.bitmask, inst.box, size))
                for inst in g_img
            ]
        )

    def iou_fn(pm, gm):
        return np.array([[mask_iou(a, b) for b in gm] for a in pm], dtype="double")

    ap = _class_ap(p_all, g_all, iou_fn, [iou_threshold])
    return float(ap[0])


def _associate(ious: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Return greedy (row, col) pairs by decreasing IoU, each at least threshold."""
    pairs = []
    if ious.size == 0:
        return pairs
    used_r = np.zeros(ious.shape[0], dtype=bool)
    used_c = np.zeros(ious.shape[1], dtype=bool)
    for flat in np.argsort(-ious, axis=None, kind="stable"):
        r, c = np.unravel_index(flat, ious.shape)
        if ious[r, c] < threshold:
            break
        if used_r[r] or used_c[c]:
            continue
        used_r[r] = used_c[c] = True
        pairs.append((int(r), int(c)))
    return pairs


def eval_keypoints(
    preds: Sequence[Sequence[KeypointPrediction]],
    gts: Sequence[Sequence[Instance]],
    alpha: float = 0.1,
    iou_threshold: float = 0.5,
) -> float:
    """Return PCK over visible ground-truth keypoints.

    Each person instance is associated with at most one predicted person by
    box IoU >= iou_threshold. A visible keypoint is correct when the associated
    prediction lies within alpha * max(box width, box height) of it.
    Keypoints of unassociated instances count as wrong. Returns 0 when there
    is no visible keypoint.

    """
    correct = 0
    total = 0
    for p_img, g_img in zip(preds, gts):
        persons = [inst for inst in g_img if inst.keypoints is not None]
        for inst in persons:
            total += int(np.count_nonzero(np.asarray(inst.keypoints)[:, 2] > 0))
        if not persons or not p_img:
            continue
        ious = box_iou([inst.box for inst in persons], [p.box for p in p_img])
        for gi, pi in _associate(ious, iou_threshold):
            gt = np.asarray(persons[gi].keypoints, dtype="double")
            pred = np.asarray(p_img[pi].keypoints, dtype="double")
            x0, y0, x1, y1 = persons[gi].box
            radius = alpha * max(x1 - x0, y1 - y0)
            dist = np.linalg.norm(pred[:, :2] - gt[:, :2], axis=1)
            correct += int(np.count_nonzero((gt[:, 2] > 0) & (dist <= radius)))
    return correct / total if total else 0.0


def _words(text: Union[str, Sequence[str]]) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def corpus_bleu4(
    hypotheses: Sequence[Union[str, Sequence[str]]],
    references: Sequence[Sequence[Union[str, Sequence[str]]]],
) -> float:
    """Return corpus BLEU@4 without smoothing.

    Clipped n-gram matches and hypothesis n-gram totals are summed over the
    corpus. The reference length of a hypothesis is the closest reference
    length, ties going to the shorter one. Brevity penalty exp(1 - r / c)
    applies when c < r.

    """
    matches = np.zeros(4)
    totals = np.zeros(4)
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp = _words(hyp)
        refs = [_words(r) for r in refs]
        hyp_len += len(hyp)
        if refs:
            ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or np.any(totals == 0) or np.any(matches == 0):
        return 0.0
    log_p = np.mean(np.log(matches / totals))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return float(bp * math.exp(log_p))


def bleu4(
    hypothesis: Union[str, Sequence[str]],
    references: Sequence[Union[str, Sequence[str]]],
) -> float:
    """Return BLEU@4 of one hypothesis."""
    return corpus_bleu4([hypothesis], [references])


def summarize_diagnostics(counters: Sequence[Counter]) -> dict[str, int]:
    """Return summed decode diagnostics."""
    total: Counter = Counter()
    for c in counters:
        total.update(c)
    return dict(sorted(total.items()))

