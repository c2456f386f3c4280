"""Corpus BLEU, ROUGE-2/L, missing-concept counts and checkpoint evaluation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .text import concept_match

ZERO_COUNT_EPS = 1e-9


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]], n: int = 4
) -> float:
    """Corpus BLEU-n with clipped counts and the closest-reference brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    matches = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("empty reference list")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            matches[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        if t == 0:
            return 0.0
        log_p += math.log((m if m > 0 else ZERO_COUNT_EPS) / t)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return min(1.0, bp * math.exp(log_p / n))


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 2) -> float:
    c, r = ngrams(candidate, n), ngrams(reference, n)
    return _f1(sum((c & r).values()), sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """LCS F1 (beta = 1)."""
    return _f1(lcs_length(candidate, reference), len(candidate), len(reference))


def missing_concepts(generated: Sequence[str], concepts: Sequence[str]) -> int:
    if not concepts:
        raise ValueError("concept set is empty")
    return sum(1 for c in concepts if not any(concept_match(t, c) for t in generated))


@dataclass
class EvalReport:
    bleu3: float
    bleu4: float
    rouge2: float
    rouge_l: float
    missing_histogram: dict[int, int]
    instances: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["missing_histogram"] = {str(k): v for k, v in sorted(self.missing_histogram.items())}
        return d


def score_outputs(
    outputs: Sequence[Sequence[str]],
    references: Sequence[Sequence[Sequence[str]]],
    concept_sets: Sequence[Sequence[str]],
) -> EvalReport:
    """Metrics for generated outputs; ROUGE takes the best reference per instance."""
    hist: Counter = Counter(missing_concepts(o, c) for o, c in zip(outputs, concept_sets))
    n = len(outputs)
    return EvalReport(
        bleu3=bleu(outputs, references, 3),
        bleu4=bleu(outputs, references, 4),
        rouge2=sum(max(rouge_n(o, r, 2) for r in refs) for o, refs in zip(outputs, references)) / n,
        rouge_l=sum(max(rouge_l(o, r) for r in refs) for o, refs in zip(outputs, references)) / n,
        missing_histogram={k: hist[k] for k in range(max(hist) + 1)},
        instances=n,
    )


def group_references(instances) -> list[tuple[list[str], list[list[str]], list[str]]]:
    """Group instances by concept set (order-insensitive), first occurrence first.

    Returns (concepts, references, prototype-of-first-instance) triples.
    """
    groups: dict[tuple[str, ...], tuple[list[str], list[list[str]], list[str]]] = {}
    for inst in instances:
        key = tuple(sorted(inst.concepts))
        if key not in groups:
            groups[key] = (list(inst.concepts), [], list(inst.prototype))
        groups[key][1].append(list(inst.target))
    return list(groups.values())


def evaluate(
    instances,
    model,
    vocab,
    index=None,
    beam_size: int = 5,
    max_len: int = 32,
    hard_mask: str | None = None,
    exclude_target: bool = False,
) -> tuple[EvalReport, list[list[str]]]:
    """Generate for every concept set and score against all its references."""
    from .decoding import generate

    if not instances:
        raise ValueError("empty dataset")
    outputs, refs, concept_sets = [], [], []
    for concepts, references, prototype in group_references(instances):
        out, _ = generate(
            model,
            vocab,
            concepts,
            index=index,
            prototype=prototype or None,
            beam_size=beam_size,
            max_len=max_len,
            hard_mask=hard_mask,
            exclude=references[0] if exclude_target else None,
        )
        outputs.append(out)
        refs.append(references)
        concept_sets.append(concepts)
    return score_outputs(outputs, refs, concept_sets), outputs
