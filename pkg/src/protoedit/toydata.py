"""Synthetic scene sentences for desk-scale experiments.

Every scene is written twice with different phrasing. Both variants contain
the scene's person, verb, object and place, so retrieving with the scene's
concepts (excluding the target itself) returns the twin sentence as the
prototype. The twin carries the non-concept words the target needs (adjective,
preposition) plus some noise (a trailing phrase or different determiners).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .text import TrainingInstance, load_dataset, tokenize

PERSONS = ["man", "woman", "boy", "girl", "child", "chef", "farmer", "singer", "student", "player"]
VERBS = {
    "play": ("plays", "playing"),
    "cook": ("cooks", "cooking"),
    "paint": ("paints", "painting"),
    "wash": ("washes", "washing"),
    "kick": ("kicks", "kicking"),
    "push": ("pushes", "pushing"),
    "pull": ("pulls", "pulling"),
    "clean": ("cleans", "cleaning"),
    "hold": ("holds", "holding"),
    "watch": ("watches", "watching"),
    "fix": ("fixes", "fixing"),
    "catch": ("catches", "catching"),
    "throw": ("throws", "throwing"),
    "open": ("opens", "opening"),
    "read": ("reads", "reading"),
}
OBJECTS = ["guitar", "ball", "car", "door", "book", "window", "box", "bike",
           "plate", "kite", "table", "chair", "shirt", "boat", "cake"]
PLACES = ["park", "kitchen", "garden", "street", "beach", "house", "yard", "stage", "river", "school"]
PREPS = ["in", "near", "behind", "outside", "beside"]
ADJS = ["old", "young", "tall", "small", "happy", "tired", "red", "new", "quiet", "busy"]
TAILS = ["at night", "in the morning", "with a friend", "after lunch", "on sunday", "for fun"]


@dataclass(frozen=True)
class Scene:
    person: str
    verb: str
    obj: str
    place: str
    prep: str
    adj: str
    tail: str

    @property
    def concepts(self) -> list[str]:
        return [self.person, self.verb, self.obj, self.place]

    def sentences(self) -> tuple[str, str]:
        third, ing = VERBS[self.verb]
        a = f"the {self.adj} {self.person} {third} a {self.obj} {self.prep} the {self.place} ."
        b = f"a {self.person} is {ing} the {self.adj} {self.obj} {self.prep} the {self.place} {self.tail} ."
        return a, b


def make_scenes(n: int, seed: int = 0) -> list[Scene]:
    """``n`` scenes with pairwise distinct (person, verb, object, place) keys."""
    rng = random.Random(seed)
    scenes, keys = [], set()
    while len(scenes) < n:
        s = Scene(
            rng.choice(PERSONS), rng.choice(sorted(VERBS)), rng.choice(OBJECTS), rng.choice(PLACES),
            rng.choice(PREPS), rng.choice(ADJS), rng.choice(TAILS),
        )
        if (s.person, s.verb, s.obj, s.place) in keys:
            continue
        keys.add((s.person, s.verb, s.obj, s.place))
        scenes.append(s)
    return scenes


def make_corpus_and_instances(n_scenes: int = 100, seed: int = 0) -> tuple[list[str], list[dict]]:
    """Corpus lines plus JSON-lines records (concept order shuffled per record)."""
    rng = random.Random(seed + 1)
    corpus, records = [], []
    for scene in make_scenes(n_scenes, seed):
        for sent in scene.sentences():
            concepts = scene.concepts
            rng.shuffle(concepts)
            corpus.append(sent)
            records.append({"concepts": concepts, "target": sent})
    return corpus, records


def overfit_instances(n: int = 32, seed: int = 7) -> list[TrainingInstance]:
    """``n`` instances with the twin sentence supplied as the prototype."""
    out = []
    for scene in make_scenes((n + 1) // 2, seed):
        a, b = scene.sentences()
        out.append(TrainingInstance(scene.concepts, tokenize(a), tokenize(b)))
        out.append(TrainingInstance(scene.concepts[::-1], tokenize(b), tokenize(a)))
    return out[:n]


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("protoedit") / "data" / name))


def bundled_corpus() -> list[str]:
    return bundled_path("toy_corpus.txt").read_text(encoding="utf-8").splitlines()


def bundled_dataset() -> list[TrainingInstance]:
    return load_dataset(bundled_path("toy_train.jsonl"))


def write_bundled(directory: str | Path, n_scenes: int = 100, seed: int = 0) -> None:
    directory = Path(directory)
    corpus, records = make_corpus_and_instances(n_scenes, seed)
    (directory / "toy_corpus.txt").write_text("\n".join(corpus) + "\n", encoding="utf-8")
    with open(directory / "toy_train.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
