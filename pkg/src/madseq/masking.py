"""Masked views for training and masked-inference refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from madseq.codec import TaskSequence
from madseq.vocab import TaskKind

MASK_STRATEGIES = ("single", "random", "multiple")


@dataclass
class MaskedView:
    """Decoder input and reconstruction target of one corrupted sequence.

    ``mask`` is true at masked body positions (the set M). ``supervise`` is
    true at body positions that enter the loss when masked.

    """

    task: TaskKind
    input_tokens: np.ndarray
    target_tokens: np.ndarray
    mask: np.ndarray
    supervise: np.ndarray
    prompt_len: int

    @property
    def mask_positions(self) -> np.ndarray:
        """Return sorted masked body positions."""
        return np.flatnonzero(self.mask)

    @property
    def n_masked(self) -> int:
        """Return |M|."""
        return int(np.count_nonzero(self.mask))

    @property
    def loss_mask(self) -> np.ndarray:
        """Return positions counted by the loss (masked and supervised)."""
        return self.mask & self.supervise


@dataclass(frozen=True)
class RefinementSchedule:
    """Masking ratio of every refinement stage after the initial decode."""

    ratios: tuple[float, ...] = ()

    def __post_init__(self):
        """Validate ratios."""
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        for r in self.ratios:
            if not 0 < r <= 1:
                raise ValueError(f"Refinement ratio {r} not in (0, 1].")

    @property
    def num_stages(self) -> int:
        """Return K."""
        return len(self.ratios)

    @classmethod
    def parse(cls, text: str) -> RefinementSchedule:
        """Parse comma separated ratios; an empty string means K = 0."""
        text = text.strip()
        if not text:
            return cls(())
        return cls(tuple(float(v) for v in text.split(",")))

    def __str__(self) -> str:
        """Return comma separated ratios."""
        return ",".join(f"{r:g}" for r in self.ratios)


def num_to_mask(length: int, ratio: float) -> int:
    """Return round-half-up(ratio * length) clamped to [1, length]."""
    if length <= 0:
        return 0
    n = int(math.floor(ratio * length + 0.5))
    return min(max(n, 1), length)


def _view(
    seq: TaskSequence, mask: np.ndarray, mask_id: int, body: np.ndarray
) -> MaskedView:
    input_body = np.where(mask, mask_id, body)
    return MaskedView(
        task=seq.task,
        input_tokens=np.concatenate([seq.prompt, input_body]).astype(np.int64),
        target_tokens=seq.body.copy(),
        mask=mask,
        supervise=seq.supervise.copy(),
        prompt_len=len(seq.prompt),
    )


def mask_fully(seq: TaskSequence, mask_id: int) -> MaskedView:
    """Return view with every body position masked."""
    mask = np.ones(len(seq.body), dtype=bool)
    return _view(seq, mask, mask_id, seq.body)


def mask_partial(
    seq: TaskSequence, ratio: float, mask_id: int, rng: np.random.Generator
) -> MaskedView:
    """Return view with round(ratio * L) body positions masked uniformly.

    An augmented caption position is always among the masked ones so the
    corrupted input token is never shown next to its own target.

    """
    length = len(seq.body)
    n = num_to_mask(length, ratio)
    mask = np.zeros(length, dtype=bool)
    if seq.augmented_position is not None:
        forced = int(seq.augmented_position)
        mask[forced] = True
        rest = np.delete(np.arange(length), forced)
        mask[rng.choice(rest, n - 1, replace=False)] = True
    else:
        mask[rng.choice(length, n, replace=False)] = True
    return _view(seq, mask, mask_id, seq.visible_body)


def retarget(
    view: MaskedView, body: np.ndarray, supervise: np.ndarray, mask_id: int
) -> MaskedView:
    """Return view with the same masked positions over another target body.

    Visible positions show the new body, so every unmasked input token equals
    its target.

    """
    body = np.asarray(body, dtype=np.int64)
    prompt = view.input_tokens[: view.prompt_len]
    input_body = np.where(view.mask, mask_id, body)
    return MaskedView(
        task=view.task,
        input_tokens=np.concatenate([prompt, input_body]).astype(np.int64),
        target_tokens=body.copy(),
        mask=view.mask.copy(),
        supervise=np.asarray(supervise, dtype=bool).copy(),
        prompt_len=view.prompt_len,
    )


def remask(tokens: Sequence[int], ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Return sorted positions of a predicted body chosen for re-masking."""
    length = len(tokens)
    n = num_to_mask(length, ratio)
    return np.sort(rng.choice(length, n, replace=False))


def train_mask_ratios(
    strategy: str, ratio: float, rng: np.random.Generator
) -> list[float]:
    """Return ratios of the partly masked views of one sequence.

    single: [ratio]; random: one ratio uniform in [0.6, 0.8];
    multiple: [0.6, 0.8].

    """
    if strategy == "single":
        return [ratio]
    if strategy == "random":
        return [float(rng.uniform(0.6, 0.8))]
    if strategy == "multiple":
        return [0.6, 0.8]
    raise ValueError(
        f"Unknown mask strategy '{strategy}', use one of {MASK_STRATEGIES}."
    )


@dataclass
class RefinementResult:
    """Outcome of ensemble_refine."""

    tokens: np.ndarray
    probs: np.ndarray
    num_passes: int
    stage_tokens: list[np.ndarray] = field(default_factory=list)
    stage_masks: list[np.ndarray] = field(default_factory=list)


def ensemble_refine(
    decode: Callable[[np.ndarray], np.ndarray],
    prompt: Sequence[int],
    body_len: int,
    schedule: RefinementSchedule,
    mask_id: int,
    rng: np.random.Generator,
    combiner: str = "mean",
    log_level: int = 0,
) -> RefinementResult:
    """Decode a fully masked sequence, then re-mask, decode and ensemble.

    Parameters
    ----------
    decode : callable
        Maps input tokens (prompt + body) to body probabilities of
        shape=(body_len, vocab_size) in one forward pass.
    prompt : array_like
        Prompt tokens, never masked.
    body_len : int
        Body length.
    schedule : RefinementSchedule
        Ratio of every refinement stage.
    mask_id : int
        MASK token.
    rng : np.random.Generator
        Source of re-mask positions.
    combiner : str, optional
        "mean" keeps, per position, the mean of all distributions observed
        while it was masked. "overwrite" keeps only the latest one.
    log_level : int, optional
        Log level. Default is 0.

    """
    if combiner not in ("mean", "overwrite"):
        raise ValueError(f"Unknown combiner '{combiner}'.")
    prompt = np.asarray(prompt, dtype=np.int64)
    inputs = np.concatenate([prompt, np.full(body_len, mask_id, dtype=np.int64)])
    probs = np.asarray(decode(inputs), dtype="double")
    acc = probs.copy()
    counts = np.ones(body_len, dtype="double")
    tokens = np.argmax(acc, axis=1)
    result = RefinementResult(tokens=tokens, probs=acc, num_passes=1)
    result.stage_tokens.append(tokens.copy())
    result.stage_masks.append(np.arange(body_len))

    for k, ratio in enumerate(schedule.ratios):
        positions = remask(tokens, ratio, rng)
        body = tokens.copy()
        body[positions] = mask_id
        probs = np.asarray(decode(np.concatenate([prompt, body])), dtype="double")
        result.num_passes += 1
        if combiner == "mean":
            acc[positions] += probs[positions]
            counts[positions] += 1
        else:
            acc[positions] = probs[positions]
        tokens = np.argmax(acc / counts[:, None], axis=1)
        if log_level > 1:
            changed = int(np.count_nonzero(tokens != result.stage_tokens[-1]))
            print(
                f"  - stage {k + 1}: ratio {ratio:g}, {len(positions)} re-masked,"
                f" {changed} tokens changed"
            )
        result.stage_tokens.append(tokens.copy())
        result.stage_masks.append(positions)

    result.tokens = tokens
    result.probs = acc / counts[:, None]
    return result
