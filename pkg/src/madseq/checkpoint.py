"""Binary checkpoint of model parameters with a JSON header."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from madseq.vocab import Vocab, parse_manifest

MAGIC = b"MADSEQ-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not fit the requested vocabulary."""


@dataclass
class Checkpoint:
    """Contents of a checkpoint file.

    Attributes
    ----------
    tensors : dict[str, np.ndarray]
        Parameters by name, float32.
    vocab : Vocab
        Vocabulary rebuilt from the embedded manifest.
    config : dict
        Flat experiment configuration.
    step : int
        Training step at which the checkpoint was written.

    """

    tensors: dict[str, np.ndarray]
    vocab: Vocab
    config: dict = field(default_factory=dict)
    step: int = 0

    def load_into(self, model: nn.Module) -> None:
        """Copy tensors into a model with the same parameter names and shapes."""
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"Checkpoint does not fit model: {exc}") from exc


def save_checkpoint(
    filename: Union[str, Path],
    model: nn.Module,
    vocab: Vocab,
    config: Optional[dict] = None,
    step: int = 0,
) -> None:
    """Write model parameters.

    Layout: magic line, header length as little-endian uint64, UTF-8 JSON
    header, then the raw little-endian float32 data of every tensor at the
    offsets listed in the header.

    """
    tensors = []
    blobs = []
    offset = 0
    for name, value in model.state_dict().items():
        arr = np.ascontiguousarray(value.detach().cpu().numpy(), dtype="<f4")
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": int(arr.nbytes),
            }
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "vocab_sha256": vocab.fingerprint(),
        "vocab_manifest": vocab.to_manifest(),
        "config": config or {},
        "step": int(step),
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(filename, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(
    filename: Union[str, Path], vocab: Optional[Vocab] = None
) -> Checkpoint:
    """Read a checkpoint.

    Parameters
    ----------
    filename : str or Path
        Checkpoint file.
    vocab : Vocab, optional
        When given, the embedded vocabulary fingerprint must match it.

    """
    data = Path(filename).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{filename} is not a madseq checkpoint.")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError("Truncated checkpoint header.")
    (n_header,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos : pos + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Unreadable checkpoint header: {exc}") from exc
    pos += n_header

    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}.")
    try:
        ckpt_vocab = parse_manifest(header["vocab_manifest"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"Bad vocabulary manifest: {exc}") from exc
    if ckpt_vocab.fingerprint() != header.get("vocab_sha256"):
        raise CheckpointError("Vocabulary manifest does not match its hash.")
    if vocab is not None and vocab.fingerprint() != header["vocab_sha256"]:
        raise CheckpointError("Checkpoint was written with a different vocabulary.")

    tensors = {}
    for entry in header.get("tensors", []):
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"Unsupported dtype {entry.get('dtype')}.")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = pos + int(entry["offset"])
        if count * 4 != entry["nbytes"] or start + entry["nbytes"] > len(data):
            raise CheckpointError(f"Tensor {entry['name']} exceeds checkpoint data.")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype("float32")
    return Checkpoint(
        tensors=tensors,
        vocab=ckpt_vocab,
        config=header.get("config", {}),
        step=int(header.get("step", 0)),
    )
