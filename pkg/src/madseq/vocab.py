"""Unified token vocabulary shared by all tasks."""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

MANIFEST_VERSION = 1


class TaskKind(enum.IntEnum):
    """Task of a sequence. The value is the index of its prompt token."""

    DETECTION = 0
    SEGMENTATION = 1
    KEYPOINT = 2
    CAPTIONING = 3


class TokenKind(enum.Enum):
    """Named contiguous id ranges of the vocabulary, in layout order."""

    PAD = "PAD"
    MASK = "MASK"
    PROMPT = "PROMPT"
    COORD = "COORD"
    CLASS = "CLASS"
    SPECIAL = "SPECIAL"
    WORD = "WORD"
    SEQUENCE = "SEQUENCE"


class Special(enum.IntEnum):
    """Task-related special tokens, index within the SPECIAL range."""

    FOREGROUND = 0
    BACKGROUND = 1
    VISIBLE = 2
    INVISIBLE = 3


@dataclass(frozen=True)
class VocabSpec:
    """Sizes of the vocabulary parts.

    Parameters
    ----------
    num_bins : int
        Number of coordinate quantization bins.
    num_classes : int
        Number of real object categories. One NOISE class is appended.
    words : tuple[str, ...]
        Caption words in id order.
    sequence_tokens : bool, optional
        Append ``<start>`` and ``<end>`` for autoregressive decoding.
        Default is False.

    """

    num_bins: int = 500
    num_classes: int = 5
    words: tuple[str, ...] = field(default_factory=tuple)
    sequence_tokens: bool = False

    def __post_init__(self):
        """Validate sizes."""
        object.__setattr__(self, "words", tuple(self.words))
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}.")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}.")
        if not self.words:
            raise ValueError("Word list is empty.")
        if len(set(self.words)) != len(self.words):
            seen, dups = set(), []
            for w in self.words:
                if w in seen:
                    dups.append(w)
                seen.add(w)
            raise ValueError(f"Duplicate words in vocabulary: {sorted(set(dups))}.")


class Vocab:
    """Token id layout.

    Ranges are PAD(1), MASK(1), PROMPT(4), COORD(num_bins),
    CLASS(num_classes + 1, last id is NOISE), SPECIAL(4), WORD(len(words)) and,
    only when ``spec.sequence_tokens`` is set, SEQUENCE(2).

    """

    def __init__(self, spec: VocabSpec):
        """Init method.

        Parameters
        ----------
        spec : VocabSpec
            Sizes of the vocabulary parts.

        """
        self._spec = spec
        sizes = [
            (TokenKind.PAD, 1),
            (TokenKind.MASK, 1),
            (TokenKind.PROMPT, len(TaskKind)),
            (TokenKind.COORD, spec.num_bins),
            (TokenKind.CLASS, spec.num_classes + 1),
            (TokenKind.SPECIAL, len(Special)),
            (TokenKind.WORD, len(spec.words)),
        ]
        if spec.sequence_tokens:
            sizes.append((TokenKind.SEQUENCE, 2))
        self._ranges: dict[TokenKind, tuple[int, int]] = {}
        start = 0
        for kind, size in sizes:
            self._ranges[kind] = (start, size)
            start += size
        self._total_size = start
        self._word_ids = {w: i for i, w in enumerate(spec.words)}
        self._filters: dict[TaskKind, np.ndarray] = {}

    @property
    def spec(self) -> VocabSpec:
        """Return the spec the vocabulary was built from."""
        return self._spec

    @property
    def total_size(self) -> int:
        """Return number of token ids."""
        return self._total_size

    @property
    def num_bins(self) -> int:
        """Return number of coordinate bins."""
        return self._spec.num_bins

    @property
    def num_classes(self) -> int:
        """Return number of real classes (NOISE excluded)."""
        return self._spec.num_classes

    @property
    def words(self) -> tuple[str, ...]:
        """Return caption words."""
        return self._spec.words

    @property
    def layout(self) -> list[tuple[TokenKind, int, int]]:
        """Return (kind, start id, size) for every range in order."""
        return [(k, s, n) for k, (s, n) in self._ranges.items()]

    def range_of(self, kind: TokenKind) -> tuple[int, int]:
        """Return (start id, size) of a range."""
        if kind not in self._ranges:
            raise ValueError(f"Vocabulary has no {kind.value} range.")
        return self._ranges[kind]

    def ids_of(self, kind: TokenKind) -> np.ndarray:
        """Return all ids of a range."""
        start, size = self.range_of(kind)
        return np.arange(start, start + size, dtype=np.int64)

    def token(self, kind: TokenKind, index: int = 0) -> int:
        """Return the id of the index-th token of a range."""
        start, size = self.range_of(kind)
        if not 0 <= index < size:
            raise ValueError(f"Index {index} out of range for {kind.value}({size}).")
        return start + int(index)

    def classify(self, token_id: int) -> tuple[TokenKind, int]:
        """Return (kind, index within range) of a token id."""
        token_id = int(token_id)
        for kind, (start, size) in self._ranges.items():
            if start <= token_id < start + size:
                return kind, token_id - start
        raise ValueError(f"Token id {token_id} outside [0, {self._total_size}).")

    def is_kind(self, token_ids, kind: TokenKind) -> np.ndarray:
        """Return boolean array telling which ids belong to a range."""
        start, size = self._ranges.get(kind, (0, 0))
        ids = np.asarray(token_ids)
        return (ids >= start) & (ids < start + size)

    @property
    def pad_id(self) -> int:
        """Return PAD id."""
        return self.token(TokenKind.PAD)

    @property
    def mask_id(self) -> int:
        """Return MASK id."""
        return self.token(TokenKind.MASK)

    @property
    def noise_id(self) -> int:
        """Return the NOISE class id."""
        return self.token(TokenKind.CLASS, self.num_classes)

    @property
    def start_id(self) -> int:
        """Return ``<start>`` id."""
        return self.token(TokenKind.SEQUENCE, 0)

    @property
    def end_id(self) -> int:
        """Return ``<end>`` id."""
        return self.token(TokenKind.SEQUENCE, 1)

    @property
    def has_sequence_tokens(self) -> bool:
        """Return whether ``<start>`` / ``<end>`` exist."""
        return TokenKind.SEQUENCE in self._ranges

    def prompt_id(self, task: TaskKind) -> int:
        """Return the prompt token of a task."""
        return self.token(TokenKind.PROMPT, int(task))

    def coord_id(self, bin_index: int) -> int:
        """Return the token of a coordinate bin."""
        return self.token(TokenKind.COORD, bin_index)

    def class_id(self, class_index: int) -> int:
        """Return the token of a class (num_classes is NOISE)."""
        return self.token(TokenKind.CLASS, class_index)

    def special_id(self, special: Special) -> int:
        """Return the token of a task special."""
        return self.token(TokenKind.SPECIAL, int(special))

    def word_id(self, word: str) -> int:
        """Return the token of a caption word."""
        if word not in self._word_ids:
            raise ValueError(f"Word '{word}' is not in the vocabulary.")
        return self.token(TokenKind.WORD, self._word_ids[word])

    def word_of(self, token_id: int) -> str:
        """Return the caption word of a token."""
        kind, index = self.classify(token_id)
        if kind is not TokenKind.WORD:
            raise ValueError(f"Token id {token_id} is a {kind.value} token.")
        return self._spec.words[index]

    def task_filter(self, task: TaskKind) -> np.ndarray:
        """Return sorted, read-only token ids a task may emit.

        Detection: COORD and CLASS (NOISE included). Segmentation: foreground
        and background. Keypoint: COORD, visible and invisible. Captioning:
        WORD and PAD. ``<end>`` is added to every task when sequence tokens
        exist. Filters are built once per task.

        """
        task = TaskKind(task)
        if task in self._filters:
            return self._filters[task]
        if task is TaskKind.DETECTION:
            ids = [self.ids_of(TokenKind.COORD), self.ids_of(TokenKind.CLASS)]
        elif task is TaskKind.SEGMENTATION:
            ids = [
                np.array(
                    [
                        self.special_id(Special.FOREGROUND),
                        self.special_id(Special.BACKGROUND),
                    ]
                )
            ]
        elif task is TaskKind.KEYPOINT:
            ids = [
                self.ids_of(TokenKind.COORD),
                np.array(
                    [
                        self.special_id(Special.VISIBLE),
                        self.special_id(Special.INVISIBLE),
                    ]
                ),
            ]
        else:
            ids = [np.array([self.pad_id]), self.ids_of(TokenKind.WORD)]
        if self.has_sequence_tokens:
            ids.append(np.array([self.end_id]))
        allowed = np.unique(np.concatenate(ids).astype(np.int64))
        allowed.setflags(write=False)
        self._filters[task] = allowed
        return allowed

    def to_manifest(self) -> str:
        """Return versioned text manifest.

        One line per range (name, start id, size), then the words.

        """
        lines = [f"madseq-vocab {MANIFEST_VERSION}", f"bins {self.num_bins}"]
        lines += [f"{k.value} {s} {n}" for k, s, n in self.layout]
        lines.append("words")
        lines += list(self._spec.words)
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        """Return SHA-256 of the manifest."""
        return hashlib.sha256(self.to_manifest().encode("utf-8")).hexdigest()

    def write_manifest(self, filename) -> None:
        """Write manifest to a file."""
        with open(filename, "w", encoding="utf-8") as f:
            f.write(self.to_manifest())


def build_vocab(spec: VocabSpec) -> Vocab:
    """Return vocabulary of a spec."""
    return Vocab(spec)


def parse_manifest(text: str) -> Vocab:
    """Rebuild vocabulary from its manifest and check the layout."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("madseq-vocab "):
        raise ValueError("Not a vocabulary manifest.")
    version = int(lines[0].split()[1])
    if version != MANIFEST_VERSION:
        raise ValueError(f"Unsupported manifest version {version}.")
    num_bins = int(lines[1].split()[1])
    try:
        iw = lines.index("words")
    except ValueError as exc:
        raise ValueError("Manifest has no word list.") from exc
    ranges = {}
    for line in lines[2:iw]:
        name, start, size = line.split()
        ranges[TokenKind(name)] = (int(start), int(size))
    words = tuple(lines[iw + 1 :])
    spec = VocabSpec(
        num_bins=num_bins,
        num_classes=ranges[TokenKind.CLASS][1] - 1,
        words=words,
        sequence_tokens=TokenKind.SEQUENCE in ranges,
    )
    vocab = Vocab(spec)
    if {k: (s, n) for k, s, n in vocab.layout} != ranges:
        raise ValueError("Manifest ranges do not match the rebuilt layout.")
    return vocab


def read_manifest(filename) -> Vocab:
    """Read vocabulary manifest file."""
    with open(filename, encoding="utf-8") as f:
        return parse_manifest(f.read())


def quantize_coord(v: float, num_bins: int) -> int:
    """Return bin index of a normalized coordinate.

    Inputs outside [0, 1] are clamped, then floor(v * num_bins) is clamped
    to [0, num_bins - 1].

    """
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"Coordinate must be finite, got {v}.")
    v = min(max(v, 0.0), 1.0)
    return min(max(int(math.floor(v * num_bins)), 0), num_bins - 1)


def quantize_coords(values, num_bins: int) -> np.ndarray:
    """Vectorized quantize_coord."""
    values = np.asarray(values, dtype="double")
    if not np.all(np.isfinite(values)):
        raise ValueError("Coordinates must be finite.")
    bins = np.floor(np.clip(values, 0.0, 1.0) * num_bins).astype(np.int64)
    return np.clip(bins, 0, num_bins - 1)


def dequantize_coord(bin_index: int, num_bins: int) -> float:
    """Return bin-center coordinate (bin + 0.5) / num_bins."""
    if not 0 <= int(bin_index) < num_bins:
        raise ValueError(f"Bin {bin_index} outside [0, {num_bins}).")
    return (int(bin_index) + 0.5) / num_bins


def dequantize_coords(bins, num_bins: int) -> np.ndarray:
    """Vectorized dequantize_coord."""
    bins = np.asarray(bins, dtype=np.int64)
    if np.any((bins < 0) | (bins >= num_bins)):
        raise ValueError(f"Bins outside [0, {num_bins}).")
    return (bins + 0.5) / num_bins


def task_vocab_filter(task: TaskKind, vocab: Vocab) -> np.ndarray:
    """Return sorted token ids a task may emit (its supervision targets)."""
    return vocab.task_filter(task)
