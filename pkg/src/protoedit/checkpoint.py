"""Checkpoint container.

Layout::

    8 bytes   magic b"PEDCKPT\\0"
    8 bytes   header length N, unsigned little-endian
    N bytes   UTF-8 JSON header
    ...       raw little-endian float32 arrays, in header order

The header holds ``format_version``, ``model_config``, ``seed``, ``vocab``
(id -> token list), ``arrays`` (``[{"name", "shape"}]``) and a free-form
``extra`` dict (training config, step count).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ProtoEditModel
from .text import Vocabulary

MAGIC = b"PEDCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path, model: ProtoEditModel, vocab: Vocabulary, seed: int, extra: dict | None = None
) -> None:
    arrays = [(name, p.detach().cpu().numpy().astype("<f4")) for name, p in model.named_parameters()]
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "seed": seed,
        "vocab": vocab.itos,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, 16 + n


def load_checkpoint(path: str | Path) -> tuple[ProtoEditModel, Vocabulary, dict]:
    header, offset = read_header(path)
    config = ModelConfig(**header["model_config"])
    vocab = Vocabulary(header["vocab"])
    if len(vocab) != config.vocab_size:
        raise CheckpointError(
            f"{path}: vocabulary has {len(vocab)} entries but config says {config.vocab_size}"
        )
    model = ProtoEditModel(config)
    params = dict(model.named_parameters())
    raw = Path(path).read_bytes()[offset:]
    pos = 0
    seen = set()
    with torch.no_grad():
        for entry in header["arrays"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in params:
                raise CheckpointError(f"{path}: unknown array {name!r}")
            if tuple(params[name].shape) != shape:
                raise CheckpointError(
                    f"{path}: array {name!r} has shape {shape}, model expects {tuple(params[name].shape)}"
                )
            count = int(np.prod(shape, dtype=np.int64))
            chunk = raw[pos : pos + 4 * count]
            if len(chunk) != 4 * count:
                raise CheckpointError(f"{path}: truncated data for array {name!r}")
            arr = np.frombuffer(chunk, dtype="<f4").reshape(shape)
            params[name].copy_(torch.from_numpy(arr.copy()))
            pos += 4 * count
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    model.eval()
    return model, vocab, header
