"""Tests of the flat YAML experiment configuration."""
import pytest

from madseq.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_overrides,
    write_config,
)
from madseq.vocab import TaskKind


def test_defaults():
    """Test derived model sizes of the default configuration."""
    cfg = ExperimentConfig()
    vocab = cfg.vocab()
    assert not vocab.has_sequence_tokens
    model_cfg = cfg.model_config(vocab)
    assert model_cfg.vocab_size == vocab.total_size
    assert model_cfg.max_seq_len == 501
    assert cfg.train.task_kinds == tuple(TaskKind)


def test_ar_forces_sequence_tokens():
    """Test autoregressive training adds <start>/<end>."""
    cfg = load_config(overrides=["decoding=ar"])
    vocab = cfg.vocab()
    assert vocab.has_sequence_tokens
    assert cfg.model_config(vocab).max_seq_len == 502
    assert vocab.total_size == ExperimentConfig().vocab().total_size + 2


def test_overrides_are_coerced():
    """Test YAML scalars are converted to the setting types."""
    cfg = load_config(
        overrides=[
            "lr=0.001",
            "batch_size=2",
            "tasks=detection,captioning",
            "task_weights=[1, 2, 0, 1]",
            "caption_ratios=0.8",
            "augment=true",
            "stem_channels=4,8,16",
        ]
    )
    assert cfg.train.lr == pytest.approx(0.001)
    assert cfg.train.batch_size == 2
    assert cfg.train.tasks == ("detection", "captioning")
    assert cfg.train.task_weights == (1.0, 2.0, 0.0, 1.0)
    assert cfg.inference.caption_ratios == "0.8"
    assert cfg.train.augment is True
    assert cfg.model.stem_channels == (4, 8, 16)
    assert load_config(overrides=["lr=1"]).train.lr == 1.0


@pytest.mark.parametrize(
    "override",
    [
        "learning_rate=0.1",
        "vocab_size=100",
        "max_seq_len=10",
        "batch_size=2.5",
        "augment=1",
        "train_mask_ratio=1.5",
        "decoding=beam",
        "tasks=detection,depth",
        "num_slots=0",
    ],
)
def test_invalid_overrides(override):
    """Test unknown keys, derived keys and invalid values are refused."""
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_parse_overrides():
    """Test KEY=VALUE parsing."""
    assert parse_overrides(["a=1", "b=x=y", "c="]) == {"a": 1, "b": "x=y", "c": ""}
    with pytest.raises(ConfigError):
        parse_overrides(["lr"])


def test_write_and_load(tmp_path):
    """Test a written configuration loads back equal."""
    cfg = load_config(overrides=["num_slots=8", "caption_ratios=0.5,0.3", "seed=4"])
    filename = tmp_path / "config.yaml"
    write_config(cfg, filename)
    assert load_config(filename) == cfg
    assert load_config(filename, ["seed=5"]).train.seed == 5


def test_load_invalid_files(tmp_path):
    """Test empty files, non-mappings and unknown keys."""
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == ExperimentConfig()
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(listing)
    unknown = tmp_path / "unknown.yaml"
    unknown.write_text("num_bins: 100\nbogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(unknown)
