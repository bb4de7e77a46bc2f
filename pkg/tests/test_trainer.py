"""Tests of the training loop."""
import csv
import json

import pytest
import torch

from madseq.checkpoint import load_checkpoint
from madseq.config import load_config
from madseq.dataset import records_of_split
from madseq.shapes_world import generate_dataset
from madseq.trainer import FINAL_CHECKPOINT, TRAIN_LOG, Trainer

TINY = [
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
    "num_train=4",
    "num_val=2",
    "batch_size=2",
    "total_steps=2",
]


def _setup(*overrides):
    cfg = load_config(overrides=TINY + list(overrides))
    records = generate_dataset(cfg.world)
    train = records_of_split(records, "train")
    val = records_of_split(records, "val")
    return cfg, train, val


def test_run_writes_log_and_checkpoint(tmp_path):
    """Test one log line per step, validation lines and the final checkpoint."""
    cfg, train, val = _setup("eval_interval=2", "eval_images=1")
    plots = tmp_path / "plots.csv"
    trainer = Trainer(cfg, train, val_records=val, out_dir=tmp_path, plots_data=plots)
    trainer.run()
    assert trainer.step == 2

    with open(tmp_path / TRAIN_LOG) as f:
        lines = [json.loads(line) for line in f]
    steps = [line for line in lines if "loss" in line]
    evals = [line for line in lines if "eval" in line]
    assert [line["step"] for line in steps] == [1, 2]
    assert len(evals) == 1 and evals[0]["eval"]["num_images"] == 1
    assert len(trainer.evaluations) == 1

    ckpt = load_checkpoint(tmp_path / FINAL_CHECKPOINT)
    assert ckpt.step == 2
    assert ckpt.vocab.fingerprint() == trainer.vocab.fingerprint()

    with open(plots, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "step"
    assert rows[1][0] == "2"


def test_same_seed_same_parameters():
    """Test two runs with the same configuration agree."""
    cfg, train, _ = _setup("total_steps=1")
    models = [Trainer(cfg, train).run() for _ in range(2)]
    for p, q in zip(models[0].parameters(), models[1].parameters()):
        torch.testing.assert_close(p, q)


def test_checkpoint_interval(tmp_path):
    """Test periodic checkpoints are written."""
    cfg, train, _ = _setup("checkpoint_interval=1", "augment=true")
    Trainer(cfg, train, out_dir=tmp_path).run()
    assert (tmp_path / "step000001.ckpt").exists()
    assert (tmp_path / "step000002.ckpt").exists()


def test_no_records():
    """Test training without records is refused."""
    cfg, _, _ = _setup()
    with pytest.raises(ValueError):
        Trainer(cfg, [])
