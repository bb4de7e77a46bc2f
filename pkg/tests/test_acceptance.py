"""Long-running property checks. Run with --runbig."""
import dataclasses
import itertools

import numpy as np
import pytest
import torch
from conftest import tiny_model_config

from madseq.benchmark import benchmark_decode
from madseq.codec import CodecConfig, DetectedBox, check_roundtrip
from madseq.config import load_config
from madseq.dataset import records_of_split
from madseq.inference import evaluate
from madseq.masking import RefinementSchedule
from madseq.matching import hungarian
from madseq.metrics import (
    KeypointPrediction,
    MaskPrediction,
    corpus_bleu4,
    eval_detection,
    eval_keypoints,
    eval_segmentation,
)
from madseq.model import MaskedAutoDecoder
from madseq.shapes_world import (
    ShapesWorldConfig,
    generate_dataset,
    generate_scene,
    scene_rng,
)
from madseq.trainer import Trainer
from madseq.training import (
    TrainConfig,
    build_batch,
    build_optimizer,
    masked_ce,
    train_step,
)
from madseq.vocab import TaskKind


def _brute_force(cost):
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        return _brute_force(cost.T)
    return min(
        sum(cost[r, c] for r, c in enumerate(perm))
        for perm in itertools.permutations(range(n_cols), n_rows)
    )


@pytest.mark.big
def test_hungarian_oracle():
    """Test optimal cost on 1000 random matrices up to 6x6."""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 7, size=2))
        cost = rng.integers(0, 20, size=shape).astype("double")
        assert hungarian(cost).total_cost == _brute_force(cost)


@pytest.mark.big
def test_masked_loss_gradient_support():
    """Test zero gradients at unsupervised positions on random batches."""
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    for _ in range(100):
        n, vocab_size = int(rng.integers(2, 30)), int(rng.integers(5, 40))
        size = int(rng.integers(1, 5))
        allowed = np.sort(rng.choice(vocab_size, size=size, replace=False))
        targets = rng.choice(allowed, size=n)
        mask = rng.random(n) < 0.5
        mask[0] = True
        logits = torch.randn(n, vocab_size, requires_grad=True)
        masked_ce(logits, targets, mask, allowed).backward()
        assert torch.all(logits.grad[~torch.as_tensor(mask)] == 0)


@pytest.mark.big
def test_causal_and_bidirectional_witnesses(vocab_ar, small_codec_cfg):
    """Test causal logits ignore later tokens and bidirectional logits do not."""
    torch.manual_seed(0)
    model = MaskedAutoDecoder(tiny_model_config(vocab_ar, small_codec_cfg)).eval()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        memory = model.encode(torch.rand(1, 3, 64, 64, generator=g))
        for _ in range(100):
            length = int(torch.randint(3, model.cfg.max_seq_len + 1, (1,), generator=g))
            tokens = torch.randint(0, model.cfg.vocab_size, (1, length), generator=g)
            j = int(torch.randint(1, length, (1,), generator=g))
            changed = tokens.clone()
            changed[0, j] = (changed[0, j] + 1) % model.cfg.vocab_size
            a = model.decode(tokens, memory, causal=True)
            b = model.decode(changed, memory, causal=True)
            torch.testing.assert_close(a[:, :, :j], b[:, :, :j])

            changed = tokens.clone()
            changed[0, -1] = (changed[0, -1] + 1) % model.cfg.vocab_size
            a = model.decode(tokens, memory)
            b = model.decode(changed, memory)
            assert not torch.equal(a[:, :, 0], b[:, :, 0])


@pytest.mark.big
def test_codec_roundtrips(vocab):
    """Test round trips of every task on thousands of generated instances."""
    world = ShapesWorldConfig()
    cfg = CodecConfig()
    checked = 0
    i = 0
    while checked < 10000:
        record = generate_scene(world, scene_rng(7, i), i)
        report = check_roundtrip(
            record.annotation, vocab, cfg, np.random.default_rng([7, i])
        )
        assert report.violations == []
        checked += report.checked["segmentation"]
        i += 1


@pytest.mark.big
def test_self_evaluation():
    """Test ground truth scored against itself gives 1.0 everywhere."""
    world = ShapesWorldConfig(num_train=100, num_val=0)
    records = generate_dataset(world)
    gts = [r.annotation.instances for r in records]
    detections = [
        [DetectedBox(inst.box, inst.class_id, 1.0, i) for i, inst in enumerate(g)]
        for g in gts
    ]
    masks = [
        [MaskPrediction(inst.box, inst.class_id, 1.0, inst.bitmask) for inst in g]
        for g in gts
    ]
    keypoints = [
        [
            KeypointPrediction(inst.box, np.asarray(inst.keypoints))
            for inst in g
            if inst.keypoints is not None
        ]
        for g in gts
    ]
    sizes = [r.image.shape[:2] for r in records]
    assert eval_detection(detections, gts).mean_ap == pytest.approx(1.0)
    assert eval_segmentation(masks, gts, sizes) == pytest.approx(1.0)
    assert eval_keypoints(keypoints, gts) == pytest.approx(1.0)
    captioned = [r.annotation.captions for r in records if r.annotation.captions]
    hyps = [refs[0] for refs in captioned]
    assert corpus_bleu4(hyps, captioned) == pytest.approx(1.0)


@pytest.mark.big
def test_overfit_one_batch(vocab_ar, small_codec_cfg, world_cfg):
    """Test repeated steps on one batch reduce its loss."""
    torch.manual_seed(0)
    model = MaskedAutoDecoder(tiny_model_config(vocab_ar, small_codec_cfg))
    cfg = TrainConfig(lr=1e-3, stem_lr=1e-3, total_steps=100, clip_norm=1.0)
    record = generate_scene(world_cfg, np.random.default_rng(0), num_shapes=2)
    optimizer, _ = build_optimizer(model, cfg)
    batch = build_batch(
        [record], vocab_ar, small_codec_cfg, cfg, np.random.default_rng(0)
    )
    losses = [
        float(train_step(model, optimizer, batch, vocab_ar, cfg).total)
        for _ in range(50)
    ]
    assert losses[-1] < losses[0]


@pytest.mark.big
def test_masked_decoding_speedup():
    """Test one masked pass is at least 20 times faster than generation."""
    cfg = load_config(overrides=["sequence_tokens=true"])
    vocab = cfg.vocab()
    torch.manual_seed(0)
    model = MaskedAutoDecoder(cfg.model_config(vocab))
    rows = {
        mode: benchmark_decode(
            model,
            vocab,
            cfg.codec,
            task=TaskKind.DETECTION,
            mode=mode,
            schedule=RefinementSchedule(()),
            trials=3,
        )
        for mode in ("mad", "ar")
    }
    assert rows["mad"].passes == 1
    assert rows["ar"].passes == 500
    assert rows["ar"].median_ms / rows["mad"].median_ms >= 20


@pytest.mark.big
def test_train_and_eval_determinism():
    """Test two runs with one seed give the same metric report."""
    cfg = load_config(
        overrides=[
            "embed_dim=16",
            "num_heads=2",
            "ffn_dim=32",
            "enc_layers=1",
            "dec_layers=2",
            "stem_channels=4,8,16",
            "num_slots=4",
            "mask_side=4",
            "caption_len=10",
            "image_size=64",
            "max_shapes=3",
            "num_train=8",
            "num_val=4",
            "batch_size=4",
            "total_steps=5",
            "seed=3",
        ]
    )
    reports = []
    for _ in range(2):
        records = generate_dataset(cfg.world)
        val = records_of_split(records, "val")
        trainer = Trainer(cfg, records_of_split(records, "train"))
        model = trainer.run()
        report = evaluate(model, trainer.vocab, val, cfg.codec, cfg.inference)
        values = report.to_dict()
        for key in ("mean_ms", "median_ms"):
            values.pop(key)
        reports.append(values)
    assert reports[0] == reports[1]


SMOKE = [
    "embed_dim=64",
    "num_heads=4",
    "ffn_dim=128",
    "enc_layers=2",
    "dec_layers=2",
    "stem_channels=16,32,64",
    "num_slots=10",
    "mask_side=8",
    "caption_len=10",
    "image_size=128",
    "max_shapes=4",
    "num_train=400",
    "num_val=40",
    "batch_size=16",
    "total_steps=600",
    "lr=0.0005",
    "stem_lr=0.0005",
    "clip_norm=1.0",
]


def _train_smoke(*overrides):
    cfg = load_config(overrides=SMOKE + list(overrides))
    records = generate_dataset(cfg.world)
    trainer = Trainer(cfg, records_of_split(records, "train"))
    return cfg, records_of_split(records, "val"), trainer.vocab, trainer.run()


@pytest.fixture(scope="module")
def smoke_run():
    """Return configuration, validation records and a short-trained model."""
    return _train_smoke()


def _det_ap50(run, mode="mad"):
    cfg, val, vocab, model = run
    tasks = [TaskKind.DETECTION]
    report = evaluate(
        model, vocab, val, cfg.codec, cfg.inference, mode=mode, tasks=tasks
    )
    return report.det_ap50


@pytest.mark.big
def test_training_beats_untrained(smoke_run):
    """Test detection AP@0.5 improves over the untrained checkpoint."""
    cfg, val, vocab, _ = smoke_run
    torch.manual_seed(cfg.train.seed)
    untrained = MaskedAutoDecoder(cfg.model_config(vocab))
    assert _det_ap50(smoke_run) > _det_ap50((cfg, val, vocab, untrained))


@pytest.mark.big
def test_refinement_keeps_caption_quality(smoke_run):
    """Test refined captions score no worse than one-pass captions."""
    cfg, val, vocab, model = smoke_run
    tasks = [TaskKind.CAPTIONING]
    plain = dataclasses.replace(cfg.inference, caption_ratios="")
    refined = dataclasses.replace(cfg.inference, caption_ratios="0.8,0.6,0.4")
    a = evaluate(model, vocab, val, cfg.codec, plain, tasks=tasks)
    b = evaluate(model, vocab, val, cfg.codec, refined, tasks=tasks)
    assert a.decoder_passes == len(val)
    assert b.decoder_passes == 4 * len(val)
    assert b.caption_bleu4 >= a.caption_bleu4 - 0.01


@pytest.mark.big
def test_masked_training_beats_autoregressive(smoke_run):
    """Test MAD detection AP@0.5 exceeds AR trained for as many steps."""
    ar_run = _train_smoke("decoding=ar")
    assert ar_run[2].has_sequence_tokens
    assert _det_ap50(smoke_run) > _det_ap50(ar_run, mode="ar")


@pytest.mark.big
def test_mask_ratio_direction(smoke_run):
    """Test train mask ratio 0.7 scores no worse than 0.4 minus 0.02 AP@0.5."""
    assert smoke_run[0].train.train_mask_ratio == 0.7
    low = _train_smoke("train_mask_ratio=0.4")
    assert _det_ap50(smoke_run) >= _det_ap50(low) - 0.02
