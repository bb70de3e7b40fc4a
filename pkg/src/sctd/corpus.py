"""Seeded toy-English generator for desk-scale corpora and probing tasks.

Sentences follow ``subject verb object [prepositional phrase] [time adverb] .``
with subject/verb number agreement and tense-consistent time adverbs, so a
masked language model has real structure to learn and the generator can emit
gold labels for tense and subject-number probes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

_NOUNS = [
    ("cat", "cats"), ("dog", "dogs"), ("teacher", "teachers"), ("student", "students"),
    ("farmer", "farmers"), ("child", "children"), ("doctor", "doctors"), ("bird", "birds"),
    ("king", "kings"), ("queen", "queens"), ("pilot", "pilots"), ("artist", "artists"),
    ("baker", "bakers"), ("writer", "writers"), ("sailor", "sailors"), ("horse", "horses"),
    ("man", "men"), ("woman", "women"), ("friend", "friends"), ("neighbor", "neighbors"),
]
_OBJECTS = [
    "apple", "book", "letter", "song", "house", "river", "bread", "garden", "picture", "car",
    "ball", "window", "story", "map", "boat", "cake", "door", "road", "bridge", "lamp",
]
# (base, third person singular, past)
_VERBS = [
    ("see", "sees", "saw"), ("find", "finds", "found"), ("paint", "paints", "painted"),
    ("carry", "carries", "carried"), ("build", "builds", "built"), ("read", "reads", "read"),
    ("write", "writes", "wrote"), ("watch", "watches", "watched"), ("clean", "cleans", "cleaned"),
    ("open", "opens", "opened"), ("bring", "brings", "brought"), ("like", "likes", "liked"),
    ("draw", "draws", "drew"), ("sell", "sells", "sold"), ("take", "takes", "took"),
]
_ADJECTIVES = ["old", "young", "small", "big", "happy", "quiet", "red", "green", "clever", "tired"]
_SING_DET = ["the", "a", "this", "that", "my", "your", "every"]
_PLUR_DET = ["the", "these", "those", "my", "your", "some", "many"]
_OBJ_DET = ["the", "a", "her", "his", "their", "our"]
_PREPS = ["in", "near", "behind", "across", "under"]
_PLACES = ["park", "city", "forest", "village", "market", "school", "kitchen", "station"]
_PAST_TIME = ["yesterday", "last week", "long ago", "last night"]
_PRESENT_TIME = ["every day", "now", "often", "today"]


@dataclass(frozen=True)
class Sentence:
    text: str
    tense: str  # "past" | "present"
    number: str  # "singular" | "plural"


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def generate(n: int, seed: int = 0) -> List[Sentence]:
    """``n`` labelled sentences, a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        plural = bool(rng.random() < 0.5)
        past = bool(rng.random() < 0.5)
        sing, plur = _pick(rng, _NOUNS)
        words = [_pick(rng, _PLUR_DET if plural else _SING_DET)]
        if rng.random() < 0.4:
            words.append(_pick(rng, _ADJECTIVES))
        words.append(plur if plural else sing)
        base, third, pst = _pick(rng, _VERBS)
        words.append(pst if past else (base if plural else third))
        words.append(_pick(rng, _OBJ_DET))
        if rng.random() < 0.3:
            words.append(_pick(rng, _ADJECTIVES))
        words.append(_pick(rng, _OBJECTS))
        if rng.random() < 0.5:
            words += [_pick(rng, _PREPS), "the", _pick(rng, _PLACES)]
        if rng.random() < 0.6:
            words.append(_pick(rng, _PAST_TIME if past else _PRESENT_TIME))
        out.append(Sentence(" ".join(words) + " .", "past" if past else "present",
                            "plural" if plural else "singular"))
    return out


def write_corpus(path, n: int, seed: int = 0) -> Path:
    """One sentence per line, UTF-8."""
    path = Path(path)
    path.write_text("".join(s.text + "\n" for s in generate(n, seed)), encoding="utf-8")
    return path


def write_probe_task(path, n: int, task: str, seed: int = 0) -> Path:
    """``label<TAB>sentence`` lines for the ``tense`` or ``number`` probe."""
    if task not in ("tense", "number"):
        raise ValueError(f"task must be 'tense' or 'number', got {task!r}")
    path = Path(path)
    rows = [f"{getattr(s, task)}\t{s.text}\n" for s in generate(n, seed)]
    path.write_text("".join(rows), encoding="utf-8")
    return path


def read_probe_task(path):
    """Parse ``label<TAB>sentence`` lines into (sentences, labels)."""
    sentences, labels = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        label, _, text = line.partition("\t")
        labels.append(label)
        sentences.append(text)
    return sentences, labels
