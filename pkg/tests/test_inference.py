"""Tests of multi-task prediction and evaluation."""
import numpy as np
import pytest
import torch
from conftest import tiny_model_config

from madseq.inference import InferenceConfig, Predictor, evaluate, run_inference
from madseq.model import MaskedAutoDecoder
from madseq.shapes_world import generate_dataset
from madseq.vocab import Special, TaskKind


def _image(seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)


def test_inference_config():
    """Test defaults and validation of schedules."""
    cfg = InferenceConfig()
    assert cfg.schedule(TaskKind.DETECTION).num_stages == 0
    assert cfg.schedule(TaskKind.KEYPOINT).ratios == (0.7,)
    assert cfg.schedule(TaskKind.CAPTIONING).ratios == (0.8, 0.6, 0.4)
    with pytest.raises(ValueError):
        InferenceConfig(caption_ratios="0.8,0")
    with pytest.raises(ValueError):
        InferenceConfig(combiner="max")


def test_mad_pass_count(tiny_model, vocab_ar, small_codec_cfg):
    """Test each sequence costs 1 + K decoder passes."""
    predictor = Predictor(tiny_model, vocab_ar, small_codec_cfg)
    pred = predictor.predict(_image(), np.random.default_rng(0))
    n_person = sum(d.class_id == 4 for d in pred.detections)
    assert len(pred.masks) == len(pred.detections)
    assert len(pred.keypoints) == n_person
    expected = 1 + len(pred.detections) + 2 * n_person + 4
    assert pred.decoder_passes == expected
    assert tiny_model.images_encoded == 1


def test_no_detections_skip_instance_tasks(tiny_model, vocab_ar, small_codec_cfg):
    """Test segmentation and keypoints are not decoded without boxes."""
    cfg = InferenceConfig(min_score=1.1)
    predictor = Predictor(tiny_model, vocab_ar, small_codec_cfg, cfg=cfg)
    pred = predictor.predict(_image(), np.random.default_rng(0))
    assert pred.detections == []
    assert pred.masks == [] and pred.keypoints == []
    assert pred.decoder_passes == 1 + 4


def test_ar_pass_count(tiny_model, vocab_ar, small_codec_cfg):
    """Test autoregressive decoding takes one pass per body token."""
    predictor = Predictor(
        tiny_model,
        vocab_ar,
        small_codec_cfg,
        mode="ar",
        tasks=[TaskKind.DETECTION, TaskKind.CAPTIONING],
    )
    assert predictor.mode == "ar"
    pred = predictor.predict(_image(), np.random.default_rng(0))
    assert pred.decoder_passes == 20 + 10
    assert pred.masks == []


def test_ar_needs_sequence_tokens(vocab, small_codec_cfg):
    """Test autoregressive mode is refused without <start>/<end>."""
    torch.manual_seed(0)
    model = MaskedAutoDecoder(tiny_model_config(vocab, small_codec_cfg))
    with pytest.raises(ValueError):
        Predictor(model, vocab, small_codec_cfg, mode="ar")
    with pytest.raises(ValueError):
        Predictor(model, vocab, small_codec_cfg, mode="beam")


def test_decode_task_shapes(tiny_model, vocab_ar, small_codec_cfg):
    """Test body tokens stay inside the task vocabulary."""
    predictor = Predictor(tiny_model, vocab_ar, small_codec_cfg)
    memory = predictor.encode(_image())
    prompt = [vocab_ar.prompt_id(TaskKind.CAPTIONING)]
    tokens, probs = predictor.decode_task(
        TaskKind.CAPTIONING, prompt, memory, np.random.default_rng(0)
    )
    assert tokens.shape == (10,)
    assert probs.shape == (10, vocab_ar.total_size)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(tokens != vocab_ar.mask_id)


def test_cut_at_end(tiny_model, vocab_ar, small_codec_cfg):
    """Test tokens after the first <end> are neutralized."""
    predictor = Predictor(tiny_model, vocab_ar, small_codec_cfg, mode="ar")
    word = vocab_ar.word_id("red")
    tokens = np.array([word, vocab_ar.end_id, word, word])
    cut = predictor._cut_at_end(TaskKind.CAPTIONING, tokens)
    np.testing.assert_array_equal(cut[1:], [vocab_ar.pad_id] * 3)
    assert cut[0] == word
    fg = vocab_ar.special_id(Special.FOREGROUND)
    cut = predictor._cut_at_end(
        TaskKind.SEGMENTATION, np.array([fg, vocab_ar.end_id, fg])
    )
    assert np.all(cut[1:] == vocab_ar.special_id(Special.BACKGROUND))


def test_run_inference_deterministic(tiny_model, vocab_ar, small_codec_cfg):
    """Test the same seed gives the same predictions."""
    image = _image(1)
    a = run_inference(tiny_model, vocab_ar, image, small_codec_cfg, seed=3)
    b = run_inference(tiny_model, vocab_ar, image, small_codec_cfg, seed=3)
    assert a.caption == b.caption
    assert [d.box for d in a.detections] == [d.box for d in b.detections]


def test_evaluate(tiny_model, vocab_ar, small_codec_cfg, world_cfg):
    """Test metrics lie in [0, 1] and do not depend on record order."""
    records = generate_dataset(world_cfg)[:3]
    report = evaluate(tiny_model, vocab_ar, records, small_codec_cfg)
    assert report.num_images == 3
    for value in (
        report.det_ap50,
        report.det_map,
        report.seg_ap50,
        report.kpt_pck,
        report.caption_bleu4,
    ):
        assert 0.0 <= value <= 1.0
    assert report.decoder_passes >= 3 * (1 + 4)
    reverse = evaluate(tiny_model, vocab_ar, records[::-1], small_codec_cfg)
    assert reverse.det_map == pytest.approx(report.det_map)
    assert reverse.caption_bleu4 == pytest.approx(report.caption_bleu4)
    assert reverse.decoder_passes == report.decoder_passes
    empty = evaluate(tiny_model, vocab_ar, [], small_codec_cfg)
    assert empty.num_images == 0 and empty.det_map == 0.0
