"""Inverted-index prototype retrieval by concept overlap.

Index file format (JSON, UTF-8)::

    {
      "format": "protoedit-index",
      "version": 1,
      "label": "in-domain",
      "sentences": [["a", "dog", "runs"], ...],
      "postings": {"dog": [0, 7, ...], ...}
    }

Postings are keyed by token stem and hold strictly ascending sentence ids.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .text import concept_match, stem, tokenize

INDEX_FORMAT = "protoedit-index"
INDEX_VERSION = 1
HISTOGRAM_BUCKETS = 5


@dataclass(frozen=True)
class PrototypeIndex:
    postings: dict[str, list[int]]
    sentences: list[list[str]]
    label: str = "in-domain"

    def __len__(self) -> int:
        return len(self.sentences)

    def save(self, path: str | Path) -> None:
        payload = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "label": self.label,
            "sentences": self.sentences,
            "postings": self.postings,
        }
        Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != INDEX_FORMAT:
            raise ValueError(f"{path}: not a prototype index file")
        if payload.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {payload.get('version')}")
        index = cls(payload["postings"], payload["sentences"], payload.get("label", ""))
        index.validate()
        return index

    def validate(self) -> None:
        n = len(self.sentences)
        for key, ids in self.postings.items():
            if not ids:
                raise ValueError(f"empty posting list for {key!r}")
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise ValueError(f"posting list for {key!r} is not strictly ascending")
            if ids[0] < 0 or ids[-1] >= n:
                raise ValueError(f"posting list for {key!r} references a missing sentence")


@dataclass(frozen=True)
class RetrievalResult:
    sentence_id: int
    tokens: list[str]
    matched_concepts: tuple[str, ...]

    @property
    def score(self) -> int:
        return len(self.matched_concepts)


def build_index(corpus: Sequence[str | Sequence[str]], label: str = "in-domain") -> PrototypeIndex:
    """Index each sentence under the stem of each of its tokens."""
    if not corpus:
        raise ValueError("empty corpus")
    sentences = [tokenize(s) if isinstance(s, str) else list(s) for s in corpus]
    postings: dict[str, list[int]] = defaultdict(list)
    for sid, toks in enumerate(sentences):
        for key in sorted({stem(t) for t in toks}):
            postings[key].append(sid)
    return PrototypeIndex(dict(postings), sentences, label)


def retrieve(
    index: PrototypeIndex,
    concepts: Sequence[str],
    k: int = 1,
    exclude: str | Sequence[str] | None = None,
) -> list[RetrievalResult]:
    """Top-k sentences by distinct matched concepts, then shorter, then lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(exclude, str):
        exclude = tokenize(exclude)
    excluded = list(exclude) if exclude is not None else None

    matched: dict[int, set[str]] = defaultdict(set)
    for c in concepts:
        for sid in index.postings.get(stem(c), ()):
            matched[sid].add(c)

    ranked = sorted(matched, key=lambda sid: (-len(matched[sid]), len(index.sentences[sid]), sid))
    results = []
    for sid in ranked:
        toks = index.sentences[sid]
        if excluded is not None and toks == excluded:
            continue
        results.append(RetrievalResult(sid, list(toks), tuple(sorted(matched[sid]))))
        if len(results) == k:
            break
    return results


def cooccurrence_histogram(
    pairs: Iterable[tuple[RetrievalResult, Sequence[str]]],
) -> dict[int, int]:
    """Count retrieved prototypes by how many of their matched concepts also occur in the target.

    Bucket 0 holds prototypes sharing no concept with the target; counts above
    five land in bucket 5.
    """
    hist = dict.fromkeys(range(HISTOGRAM_BUCKETS + 1), 0)
    for result, target in pairs:
        if not target:
            raise ValueError("target must be non-empty")
        n = sum(
            1
            for c in result.matched_concepts
            if any(concept_match(t, c) for t in result.tokens)
            and any(concept_match(t, c) for t in target)
        )
        hist[min(n, HISTOGRAM_BUCKETS)] += 1
    return hist
