"""Tests of detection, segmentation, keypoint and caption metrics."""
from collections import Counter

import numpy as np
import pytest

from madseq.codec import DetectedBox, Instance
from madseq.metrics import (
    IOU_THRESHOLDS,
    EvalReport,
    KeypointPrediction,
    MaskPrediction,
    average_precision,
    bleu4,
    box_iou,
    corpus_bleu4,
    eval_detection,
    eval_keypoints,
    eval_segmentation,
    mask_iou,
    paste_mask,
    summarize_diagnostics,
)


def _inst(box=(0.1, 0.1, 0.5, 0.5), class_id=0, bitmask=None, keypoints=None):
    if bitmask is None:
        bitmask = np.ones((4, 4), dtype=bool)
    return Instance(box, class_id, bitmask, keypoints)


def test_box_iou():
    """Test IoU of identical, disjoint and half-overlapping boxes."""
    ious = box_iou(
        [(0, 0, 1, 1)], [(0, 0, 1, 1), (2, 2, 3, 3), (0.5, 0, 1.5, 1)]
    )
    np.testing.assert_allclose(ious, [[1.0, 0.0, 1 / 3]])
    assert box_iou([], [(0, 0, 1, 1)]).shape == (0, 1)


def test_average_precision():
    """Test AP of simple ranked lists."""
    assert average_precision([1, 1], 2) == pytest.approx(1.0)
    assert average_precision([0, 1], 1) == pytest.approx(0.5)
    assert average_precision([1, 0], 2) == pytest.approx(0.5)
    assert average_precision([], 3) == 0.0
    assert average_precision([1], 0) == 0.0


def test_detection_perfect_and_wrong_class():
    """Test exact boxes give AP 1 and a wrong class gives AP 0."""
    gt = [[_inst()]]
    good = [[DetectedBox((0.1, 0.1, 0.5, 0.5), 0, 0.9)]]
    result = eval_detection(good, gt)
    assert len(result.ap) == len(IOU_THRESHOLDS)
    assert result.ap50 == pytest.approx(1.0)
    assert result.mean_ap == pytest.approx(1.0)
    wrong = [[DetectedBox((0.1, 0.1, 0.5, 0.5), 1, 0.9)]]
    assert eval_detection(wrong, gt).mean_ap == 0.0
    assert eval_detection([[]], gt).mean_ap == 0.0


def test_detection_false_positive_order():
    """Test a low-scored false positive does not lower AP."""
    gt = [[_inst()]]
    tp = DetectedBox((0.1, 0.1, 0.5, 0.5), 0, 0.9)
    fp = DetectedBox((0.6, 0.6, 0.9, 0.9), 0, 0.3)
    assert eval_detection([[tp, fp]], gt).ap50 == pytest.approx(1.0)
    early_fp = DetectedBox((0.6, 0.6, 0.9, 0.9), 0, 0.95)
    assert eval_detection([[tp, early_fp]], gt).ap50 == pytest.approx(0.5)


def test_detection_iou_thresholds():
    """Test a shifted box counts only at low thresholds."""
    gt = [[_inst((0.0, 0.0, 0.4, 0.4))]]
    shifted = [[DetectedBox((0.0, 0.05, 0.4, 0.45), 0, 1.0)]]
    result = eval_detection(shifted, gt)
    iou = 0.35 / 0.45
    np.testing.assert_array_equal(result.ap, (IOU_THRESHOLDS <= iou).astype(float))


def test_detection_without_ground_truth():
    """Test images without ground truth give AP 0."""
    preds = [[DetectedBox((0.1, 0.1, 0.5, 0.5), 0, 0.9)]]
    assert eval_detection(preds, [[]]).mean_ap == 0.0


def test_detection_multiple_classes():
    """Test AP is averaged over classes present in the ground truth."""
    gt = [[_inst(class_id=0), _inst((0.6, 0.6, 0.9, 0.9), class_id=2)]]
    preds = [[DetectedBox((0.1, 0.1, 0.5, 0.5), 0, 0.9)]]
    assert eval_detection(preds, gt).ap50 == pytest.approx(0.5)


def test_paste_mask():
    """Test pasting covers the box pixels and repeats identically."""
    grid = np.zeros((2, 2), dtype=bool)
    grid[0, 0] = True
    out = paste_mask(grid, (0.25, 0.5, 0.75, 1.0), (8, 8))
    assert out.shape == (8, 8)
    assert np.count_nonzero(out) == 4
    assert out[4:6, 2:4].all()
    mask = np.ones((3, 5), dtype=bool)
    again = paste_mask(mask, (0.1, 0.2, 0.6, 0.5), (10, 10))
    np.testing.assert_array_equal(
        again, paste_mask(again[2:5, 1:6], (0.1, 0.2, 0.6, 0.5), (10, 10))
    )
    assert np.count_nonzero(again) == 15


def test_mask_iou():
    """Test IoU of boolean masks."""
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    assert mask_iou(a, b) == 0.0
    a[:2] = True
    b[1:3] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)


def test_eval_segmentation():
    """Test exact masks give AP 1 and disjoint masks AP 0."""
    bitmask = np.eye(4, dtype=bool)
    gt = [[_inst(bitmask=bitmask)]]
    pred = [[MaskPrediction((0.1, 0.1, 0.5, 0.5), 0, 0.8, bitmask)]]
    assert eval_segmentation(pred, gt, [(20, 20)]) == pytest.approx(1.0)
    wrong = [[MaskPrediction((0.1, 0.1, 0.5, 0.5), 0, 0.8, ~bitmask)]]
    assert eval_segmentation(wrong, gt, [(20, 20)]) == 0.0


def _person(box=(0.1, 0.1, 0.5, 0.5)):
    kps = np.array(
        [[0.2, 0.2, 1], [0.3, 0.3, 1], [0.4, 0.4, 0], [0.2, 0.4, 1], [0.4, 0.2, 1]],
        dtype=float,
    )
    return _inst(box, 4, keypoints=kps)


def test_eval_keypoints():
    """Test PCK of perfect, half-correct and unassociated predictions."""
    person = _person()
    gt = [[person]]
    perfect = KeypointPrediction(person.box, person.keypoints.copy())
    assert eval_keypoints([[perfect]], gt) == pytest.approx(1.0)

    half = person.keypoints.copy()
    half[[0, 1], :2] += 0.1
    assert eval_keypoints(
        [[KeypointPrediction(person.box, half)]], gt
    ) == pytest.approx(0.5)

    far = KeypointPrediction((0.6, 0.6, 0.9, 0.9), person.keypoints.copy())
    assert eval_keypoints([[far]], gt) == 0.0
    assert eval_keypoints([[]], gt) == 0.0

    hidden = _person()
    hidden.keypoints[:, 2] = 0
    assert eval_keypoints([[perfect]], [[hidden]]) == 0.0


def test_bleu4_examples():
    """Test BLEU@4 of identical, shifted and unrelated captions."""
    ref = "a red circle left of a blue square"
    assert bleu4(ref, [ref]) == pytest.approx(1.0)
    assert bleu4("a b c d e", ["a b c d f"]) == pytest.approx(0.2**0.25, abs=1e-6)
    assert bleu4("x y z w", [ref]) == 0.0
    assert bleu4("", [ref]) == 0.0


def test_bleu4_brevity_penalty():
    """Test short hypotheses are penalized."""
    ref = "a b c d e f g h"
    score = bleu4("a b c d", [ref])
    assert score == pytest.approx(np.exp(1 - 8 / 4))


def test_bleu4_multiple_references():
    """Test clipping against the best reference and closest reference length."""
    refs = ["a red circle left of a blue square", "a blue square right of a red circle"]
    assert bleu4(refs[1], refs) == pytest.approx(1.0)
    assert bleu4("a a a a", ["a a"]) == 0.0
    corpus = corpus_bleu4([refs[0], refs[1]], [refs, refs])
    assert corpus == pytest.approx(1.0)


def test_report_and_diagnostics():
    """Test report serialization and diagnostics summation."""
    merged = summarize_diagnostics([Counter(a=1), Counter(a=2, b=1)])
    assert merged == {"a": 3, "b": 1}
    report = EvalReport(num_images=3, diagnostics=merged)
    assert report.to_dict()["diagnostics"] == {"a": 3, "b": 1}
