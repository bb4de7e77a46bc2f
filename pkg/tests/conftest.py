"""Pytest conftest.py."""
import numpy as np
import pytest
import torch

from madseq.codec import CodecConfig
from madseq.model import MaskedAutoDecoder, ModelConfig
from madseq.shapes_world import (
    SHAPE_CLASSES,
    ShapesWorldConfig,
    caption_words,
    generate_scene,
)
from madseq.vocab import Vocab, VocabSpec, build_vocab

scope = "function"


def pytest_addoption(parser):
    """Add command option to pytest."""
    parser.addoption(
        "--runbig", action="store_true", default=False, help="run big tests"
    )


def pytest_configure(config):
    """Set up marker big."""
    config.addinivalue_line("markers", "big: mark test as big to run")


def pytest_collection_modifyitems(config, items):
    """Add mechanism to run with --runbig."""
    if config.getoption("--runbig"):
        # --runbig given in cli: do not skip slow tests
        return
    skip_big = pytest.mark.skip(reason="need --runbig option to run")
    for item in items:
        if "big" in item.keywords:
            item.add_marker(skip_big)


@pytest.fixture(scope="session")
def vocab() -> Vocab:
    """Return default vocabulary of the shapes world."""
    return build_vocab(
        VocabSpec(
            num_bins=500, num_classes=len(SHAPE_CLASSES), words=caption_words()
        )
    )


@pytest.fixture(scope="session")
def vocab_ar() -> Vocab:
    """Return shapes-world vocabulary with <start>/<end>."""
    return build_vocab(
        VocabSpec(
            num_bins=500,
            num_classes=len(SHAPE_CLASSES),
            words=caption_words(),
            sequence_tokens=True,
        )
    )


@pytest.fixture(scope="session")
def codec_cfg() -> CodecConfig:
    """Return default sequence format."""
    return CodecConfig()


@pytest.fixture(scope="session")
def small_codec_cfg() -> CodecConfig:
    """Return short sequence format for model tests."""
    return CodecConfig(num_slots=4, mask_side=4, num_keypoints=5, caption_len=10)


@pytest.fixture(scope="session")
def world_cfg() -> ShapesWorldConfig:
    """Return small-image scene settings."""
    return ShapesWorldConfig(image_size=64, max_shapes=3, num_train=6, num_val=2)


def tiny_model_config(vocab: Vocab, codec_cfg: CodecConfig, **kwargs) -> ModelConfig:
    """Return a tiny architecture sized for a vocabulary and codec."""
    max_seq_len = codec_cfg.max_sequence_length()
    if vocab.has_sequence_tokens:
        max_seq_len += 1
    values = dict(
        vocab_size=vocab.total_size,
        max_seq_len=max_seq_len,
        embed_dim=16,
        num_heads=2,
        ffn_dim=32,
        enc_layers=1,
        dec_layers=2,
        stem_channels=(4, 8, 16),
    )
    values.update(kwargs)
    return ModelConfig(**values)


@pytest.fixture(scope=scope)
def tiny_model(vocab_ar, small_codec_cfg) -> MaskedAutoDecoder:
    """Return a seeded tiny model over the AR vocabulary."""
    torch.manual_seed(0)
    return MaskedAutoDecoder(tiny_model_config(vocab_ar, small_codec_cfg))


@pytest.fixture(scope=scope)
def scene(world_cfg):
    """Return a seeded two-shape scene."""
    return generate_scene(world_cfg, np.random.default_rng(3), num_shapes=2)
