"""Beam-search generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .model import ProtoEditModel, encode_input
from .retrieval import PrototypeIndex, retrieve
from .text import BOS, EOS, PAD, Vocabulary, normalize_concepts
from .training import apply_hard_mask

NEG_INF = float("-inf")


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]  # starts with BOS
    logprob: float
    finished: bool = False


# next-token log-probabilities (rows) for a list of live prefixes
StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


def beam_search_core(
    step_fn: StepFn,
    beam_size: int = 5,
    max_len: int = 32,
    bos: int = BOS,
    eos: int = EOS,
    banned: Sequence[int] = (PAD, BOS),
) -> Hypothesis:
    """Length-unnormalised beam search.

    Each live hypothesis is expanded by its ``beam_size`` best tokens and the
    ``beam_size`` best of all candidates (finished ones carried over) survive.
    Ties are broken by token ids. Returns the best finished hypothesis of the
    final beam, or the best unfinished one if none finished within ``max_len``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    beam = [Hypothesis((bos,), 0.0)]
    for _ in range(max_len):
        live = [h for h in beam if not h.finished]
        if not live:
            break
        logp = np.asarray(step_fn([h.ids for h in live]), dtype=np.float64).copy()
        logp[:, list(banned)] = NEG_INF
        candidates = [h for h in beam if h.finished]
        for h, row in zip(live, logp):
            # stable sort on -logp keeps lower token ids first among ties
            for tok in np.argsort(-row, kind="stable")[:beam_size]:
                if row[tok] == NEG_INF:
                    break
                tok = int(tok)
                candidates.append(Hypothesis(h.ids + (tok,), h.logprob + float(row[tok]), tok == eos))
        candidates.sort(key=lambda h: (-h.logprob, h.ids))
        beam = candidates[:beam_size]
    finished = [h for h in beam if h.finished]
    return (finished or beam)[0]


def model_step_fn(model: ProtoEditModel, enc, hard_mask: str | None = None) -> StepFn:
    """Wrap a model and one encoded input as a ``StepFn``."""
    c = model.config
    dev = next(model.parameters()).device
    with torch.no_grad():
        enc_out = model.encode(
            torch.tensor([enc.ids], device=dev),
            torch.tensor([enc.groups], device=dev),
            torch.tensor([enc.distances], device=dev),
        )
        enc_out = apply_hard_mask(enc_out, enc, hard_mask)

    def step(prefixes: list[tuple[int, ...]]) -> np.ndarray:
        n = len(prefixes)
        if len(prefixes[0]) > c.max_len:
            raise ValueError("prefix exceeds max_len")
        prefix = torch.tensor(prefixes, device=dev)
        expanded = type(enc_out)(
            enc_out.hidden.expand(n, -1, -1),
            None,
            enc_out.key_mask.expand(n, -1),
            enc_out.distances.expand(n, -1),
        )
        with torch.no_grad():
            logits = model.decoder_forward(prefix, expanded)[:, -1]
            return torch.log_softmax(logits.double(), -1).cpu().numpy()

    return step


def beam_search(
    model: ProtoEditModel,
    vocab: Vocabulary,
    concepts: Sequence[str],
    prototype: Sequence[str] = (),
    beam_size: int = 5,
    max_len: int = 32,
    hard_mask: str | None = None,
) -> list[str]:
    """Generate a token list (no BOS/EOS) for a concept set and prototype."""
    if not concepts:
        raise ValueError("concept set is empty")
    if max_len + 1 > model.config.max_len:
        raise ValueError(f"max_len={max_len} leaves no room for BOS within {model.config.max_len}")
    model.eval()
    enc = encode_input(list(concepts), list(prototype), vocab, model.config)
    best = beam_search_core(model_step_fn(model, enc, hard_mask), beam_size, max_len)
    ids = [i for i in best.ids[1:] if i != EOS]
    return vocab.decode(ids)


def generate(
    model: ProtoEditModel,
    vocab: Vocabulary,
    concepts: Sequence[str],
    index: PrototypeIndex | None = None,
    prototype: Sequence[str] | None = None,
    beam_size: int = 5,
    max_len: int = 32,
    hard_mask: str | None = None,
    exclude: Sequence[str] | None = None,
) -> tuple[list[str], list[str]]:
    """Retrieve a prototype (unless given) and decode; returns (output, prototype)."""
    concepts = normalize_concepts(concepts)
    if prototype is None:
        hits = retrieve(index, concepts, k=1, exclude=exclude) if index is not None else []
        prototype = hits[0].tokens if hits else []
    out = beam_search(model, vocab, concepts, prototype, beam_size, max_len, hard_mask)
    return out, list(prototype)
