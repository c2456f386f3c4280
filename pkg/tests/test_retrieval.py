import random

import pytest
from hypothesis import given, settings, strategies as st

from protoedit.retrieval import PrototypeIndex, RetrievalResult, build_index, cooccurrence_histogram, retrieve
from protoedit.text import concept_match, tokenize

CORPUS = ["a dog runs in the park", "a cat sleeps", "dogs run fast"]


def brute_force(sentences, concepts, k, exclude=None):
    """Score every sentence directly with concept_match; no index involved."""
    scored = []
    for sid, s in enumerate(sentences):
        toks = tokenize(s)
        if exclude is not None and toks == tokenize(exclude):
            continue
        hit = sorted(c for c in concepts if any(concept_match(t, c) for t in toks))
        if hit:
            scored.append((-len(hit), len(toks), sid, hit))
    scored.sort()
    return [(sid, hit) for _, _, sid, hit in scored[:k]]


def test_build_index_postings():
    idx = build_index(["a dog runs"])
    assert idx.postings["a"] == [0] and idx.postings["dog"] == [0] and idx.postings["run"] == [0]
    idx2 = build_index(["a dog", "a cat"])
    assert idx2.postings["a"] == [0, 1]


def test_build_index_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_index([])


def test_retrieve_examples():
    idx = build_index(CORPUS)
    (best,) = retrieve(idx, ["dog", "run"], k=1)
    assert best.tokens == ["dogs", "run", "fast"]
    assert best.score == 2 and best.matched_concepts == ("dog", "run")

    cats = retrieve(idx, ["cat"], k=2)
    assert [r.tokens for r in cats] == [["a", "cat", "sleeps"]]

    assert retrieve(idx, ["zebra"], k=3) == []


def test_retrieve_exclude_skips_exact_sentence():
    idx = build_index(CORPUS)
    res = retrieve(idx, ["dog", "run"], k=5, exclude="Dogs run fast")
    assert [r.sentence_id for r in res] == [0]


def test_retrieve_rejects_bad_k():
    with pytest.raises(ValueError):
        retrieve(build_index(CORPUS), ["dog"], k=0)


def test_index_save_load_round_trip(tmp_path):
    idx = build_index(CORPUS, label="out-of-domain")
    idx.save(tmp_path / "i.json")
    loaded = PrototypeIndex.load(tmp_path / "i.json")
    assert loaded == idx


def test_index_load_rejects_unsorted_postings(tmp_path):
    import json

    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"format": "protoedit-index", "version": 1, "label": "x",
                             "sentences": [["a"], ["a"]], "postings": {"a": [1, 0]}}))
    with pytest.raises(ValueError, match="ascending"):
        PrototypeIndex.load(p)


VOCAB = ["dog", "dogs", "run", "runs", "cat", "park", "sits", "sit", "the", "a", "guitar", "man", "plays"]


@st.composite
def corpus_and_query(draw):
    sents = draw(st.lists(st.lists(st.sampled_from(VOCAB), min_size=1, max_size=7), min_size=1, max_size=12))
    concepts = draw(st.lists(st.sampled_from(["dog", "run", "cat", "park", "sit", "guitar", "zebra"]),
                             min_size=1, max_size=4, unique=True))
    return [" ".join(s) for s in sents], concepts


@settings(max_examples=150, deadline=None)
@given(corpus_and_query(), st.integers(1, 4), st.randoms(use_true_random=False))
def test_retrieve_matches_brute_force_and_is_permutation_invariant(cq, k, rnd):
    corpus, concepts = cq
    idx = build_index(corpus)
    got = retrieve(idx, concepts, k)
    assert [(r.sentence_id, list(r.matched_concepts)) for r in got] == brute_force(corpus, concepts, k)
    shuffled = list(concepts)
    rnd.shuffle(shuffled)
    assert retrieve(idx, shuffled, k) == got
    assert all(r.score >= 1 and r.score == len(r.matched_concepts) <= len(concepts) for r in got)


@settings(max_examples=100, deadline=None)
@given(corpus_and_query(), st.data())
def test_exclusion_soundness(cq, data):
    corpus, concepts = cq
    victim = data.draw(st.sampled_from(corpus))
    idx = build_index(corpus)
    res = retrieve(idx, concepts, k=len(corpus), exclude=victim)
    assert all(r.tokens != tokenize(victim) for r in res)


@settings(max_examples=100, deadline=None)
@given(corpus_and_query(), st.lists(st.sampled_from(VOCAB), min_size=1, max_size=7))
def test_monotonicity_adding_weaker_sentence(cq, extra):
    corpus, concepts = cq
    before = retrieve(build_index(corpus), concepts, k=len(corpus) + 1)
    after = retrieve(build_index(corpus + [" ".join(extra)]), concepts, k=len(corpus) + 1)
    new_score = sum(1 for c in concepts if any(concept_match(t, c) for t in extra))
    pos_after = {r.sentence_id: i for i, r in enumerate(after)}
    for i, r in enumerate(before):
        if r.score > new_score:
            assert pos_after[r.sentence_id] <= i


def test_cooccurrence_histogram_single_pair():
    r = RetrievalResult(0, ["a", "man", "sits", "with", "a", "guitar"], ("guitar", "sit"))
    assert cooccurrence_histogram([(r, tokenize("a guitar player sits down"))]) == {0: 0, 1: 0, 2: 1, 3: 0, 4: 0, 5: 0}
    assert cooccurrence_histogram([(r, tokenize("a guitar"))])[1] == 1
    assert cooccurrence_histogram([(r, tokenize("nothing here"))])[0] == 1


def test_cooccurrence_histogram_empty_and_clamped():
    assert cooccurrence_histogram([]) == dict.fromkeys(range(6), 0)
    concepts = ("a1", "b1", "c1", "d1", "e1", "f1")
    r = RetrievalResult(0, list(concepts), concepts)
    assert cooccurrence_histogram([(r, list(concepts))])[5] == 1


def test_cooccurrence_histogram_rejects_empty_target():
    r = RetrievalResult(0, ["a"], ("a",))
    with pytest.raises(ValueError):
        cooccurrence_histogram([(r, [])])


def test_random_queries_against_brute_force_on_toy_corpus():
    from protoedit.toydata import PERSONS, PLACES, OBJECTS, bundled_corpus

    corpus = bundled_corpus()
    idx = build_index(corpus)
    rng = random.Random(3)
    pool = PERSONS + PLACES + OBJECTS + ["play", "wash", "zebra"]
    for _ in range(50):
        concepts = rng.sample(pool, rng.randint(1, 5))
        k = rng.randint(1, 5)
        got = [(r.sentence_id, list(r.matched_concepts)) for r in retrieve(idx, concepts, k)]
        assert got == brute_force(corpus, concepts, k)
