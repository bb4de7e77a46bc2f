"""Experiment configuration as one flat YAML mapping."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import yaml

from madseq.codec import CodecConfig
from madseq.inference import InferenceConfig
from madseq.model import ModelConfig
from madseq.shapes_world import SHAPE_CLASSES, ShapesWorldConfig, caption_words
from madseq.training import TrainConfig
from madseq.vocab import Vocab, VocabSpec, build_vocab

GROUPS = {
    "codec": CodecConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "world": ShapesWorldConfig,
    "inference": InferenceConfig,
}
TOP_LEVEL = ("num_bins", "sequence_tokens")
DERIVED = ("vocab_size", "max_seq_len")


class ConfigError(ValueError):
    """Unknown key or invalid value in an experiment configuration."""


def _field_index() -> dict[str, str]:
    """Return group name of every flat key."""
    index: dict[str, str] = {key: "" for key in TOP_LEVEL}
    for group, cls in GROUPS.items():
        for f in dataclasses.fields(cls):
            if f.name in DERIVED:
                continue
            if f.name in index:
                raise RuntimeError(f"Config key '{f.name}' is not unique.")
            index[f.name] = group
    return index


FIELD_INDEX = _field_index()


@dataclass(frozen=True)
class ExperimentConfig:
    """All settings of an experiment.

    ``vocab_size`` and ``max_seq_len`` of the model are derived from the
    vocabulary and the codec, not set directly.

    """

    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: ShapesWorldConfig = field(default_factory=ShapesWorldConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    num_bins: int = 500
    sequence_tokens: bool = False

    def vocab_spec(self) -> VocabSpec:
        """Return vocabulary sizes.

        Sequence tokens are always present for autoregressive training.

        """
        return VocabSpec(
            num_bins=self.num_bins,
            num_classes=len(SHAPE_CLASSES),
            words=caption_words(),
            sequence_tokens=self.sequence_tokens or self.train.decoding == "ar",
        )

    def vocab(self) -> Vocab:
        """Return the vocabulary."""
        return build_vocab(self.vocab_spec())

    def model_config(self, vocab: Optional[Vocab] = None) -> ModelConfig:
        """Return model sizes with vocabulary size and sequence length filled in."""
        vocab = vocab or self.vocab()
        max_seq_len = self.codec.max_sequence_length()
        if vocab.has_sequence_tokens:
            max_seq_len += 1
        return dataclasses.replace(
            self.model, vocab_size=vocab.total_size, max_seq_len=max_seq_len
        )

    def to_dict(self) -> dict[str, Any]:
        """Return flat mapping of every key to a YAML-ready value."""
        out: dict[str, Any] = {}
        for key, group in FIELD_INDEX.items():
            value = getattr(getattr(self, group), key) if group else getattr(self, key)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> ExperimentConfig:
        """Return configuration from a flat mapping; missing keys keep defaults."""
        return cls().updated(values)

    def updated(self, values: dict[str, Any]) -> ExperimentConfig:
        """Return copy with flat keys replaced."""
        unknown = sorted(k for k in values if k not in FIELD_INDEX)
        if unknown:
            derived = [k for k in unknown if k in DERIVED]
            if derived:
                raise ConfigError(f"Keys {derived} are derived and cannot be set.")
            raise ConfigError(f"Unknown config keys {unknown}.")
        per_group: dict[str, dict[str, Any]] = {g: {} for g in GROUPS}
        top: dict[str, Any] = {}
        for key, value in values.items():
            group = FIELD_INDEX[key]
            target = per_group[group] if group else top
            current = (
                getattr(getattr(self, group), key) if group else getattr(self, key)
            )
            target[key] = _coerce(key, value, current)
        try:
            groups = {
                g: dataclasses.replace(getattr(self, g), **kv)
                for g, kv in per_group.items()
                if kv
            }
            return dataclasses.replace(self, **groups, **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(key: str, value: Any, current: Any) -> Any:
    """Return value converted to the type of the current setting."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}.")
        return value
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}.")
        if current and isinstance(current[0], (int, float)):
            try:
                return tuple(type(current[0])(v) for v in value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        return tuple(value)
    if isinstance(current, float):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError as exc:
                raise ConfigError(f"{key} must be a number, got {value!r}.") from exc
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}.")
        return float(value)
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}.")
        return value
    if isinstance(current, str):
        if value is None:
            return ""
        if not isinstance(value, (str, int, float)):
            raise ConfigError(f"{key} must be a string, got {value!r}.")
        return str(value)
    return value


def parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    """Return mapping of KEY=VALUE strings; values are read as YAML scalars."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not KEY=VALUE.")
        key, text = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(text) if text.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"Override '{item}': {exc}") from exc
    return out


def load_config(
    filename: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
) -> ExperimentConfig:
    """Return configuration of a YAML file (or defaults) with overrides applied."""
    values: dict[str, Any] = {}
    if filename is not None:
        with open(filename, encoding="utf-8") as f:
            try:
                doc = yaml.safe_load(f)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{filename}: {exc}") from exc
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{filename} must hold a mapping of keys to values.")
        values.update(doc)
    values.update(parse_overrides(overrides))
    return ExperimentConfig.from_dict(values)


def write_config(cfg: ExperimentConfig, filename: Union[str, Path]) -> None:
    """Write configuration as flat YAML."""
    with open(filename, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True, default_flow_style=None)
