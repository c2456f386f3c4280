"""Tokenization, stem matching, vocabulary and dataset loading."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_SUFFIXES = ("ing", "ed", "es", "s")
_MIN_STEM = 3


class DatasetError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase word-level tokens; every punctuation character is its own token."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def stem(token: str) -> str:
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= _MIN_STEM:
            return token[: -len(suffix)]
    return token


def concept_match(token: str, concept: str) -> bool:
    return stem(token) == stem(concept)


def matches_any(token: str, concepts: Iterable[str]) -> bool:
    s = stem(token)
    return any(s == stem(c) for c in concepts)


def normalize_concepts(concepts: Iterable[str]) -> list[str]:
    """Validate a concept set: single non-empty tokens, distinct after stemming."""
    out: list[str] = []
    seen: set[str] = set()
    for raw in concepts:
        toks = tokenize(raw)
        if len(toks) != 1:
            raise ValueError(f"concept {raw!r} must be exactly one token")
        c = toks[0]
        if stem(c) in seen:
            raise ValueError(f"duplicate concept after stemming: {raw!r}")
        seen.add(stem(c))
        out.append(c)
    if not out:
        raise ValueError("concept set is empty")
    return out


@dataclass(frozen=True)
class TrainingInstance:
    concepts: list[str]
    target: list[str]
    prototype: list[str] = field(default_factory=list)


@dataclass
class Vocabulary:
    itos: list[str]
    min_freq: int = 1
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= 4

    def lookup(self, token: str) -> int:
        i = self.stoi.get(token, UNK)
        return i if i >= 4 else UNK

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Ids by descending frequency, then lexicographically, after the 4 reserved ids."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(tok for sent in corpus for tok in sent)
    kept = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, min_freq=min_freq)


def load_dataset(path: str | Path) -> list[TrainingInstance]:
    instances = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            for name in ("concepts", "target"):
                if name not in obj:
                    raise DatasetError(f"{path}:{lineno}: missing required field {name!r}")
            concepts = obj["concepts"]
            if not isinstance(concepts, list) or not all(isinstance(c, str) for c in concepts):
                raise DatasetError(f"{path}:{lineno}: field 'concepts' must be a string array")
            try:
                concepts = normalize_concepts(concepts)
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            target = tokenize(str(obj["target"]))
            if not target:
                raise DatasetError(f"{path}:{lineno}: field 'target' is empty")
            instances.append(
                TrainingInstance(concepts, target, tokenize(str(obj.get("prototype") or "")))
            )
    return instances


def load_corpus(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]
