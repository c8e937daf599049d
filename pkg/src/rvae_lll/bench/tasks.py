"""Synthetic stand-ins for a sentiment task, a span-extraction task and a slot-filling task.

Every sample is a pure function of (seed, index): train uses indices
[0, n_train) and test [n_train, n_train + n_test), so the splits never share
an index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..taskfmt import Sample, Vocab

FILLER = tuple(
    "movie film plot actor story scene music cast ending script director camera screen role hero "
    "villain dialogue theater audience ticket sequel drama comedy studio crew stage voice picture "
    "show series episode writer novel book song dance city river garden market".split()
)
POSITIVE = ("good", "great", "fine", "nice", "happy", "superb", "lovely", "fun")
NEGATIVE = ("bad", "awful", "poor", "sad", "boring", "dull", "ugly", "weak")
MARKER = "MARK"
GREETINGS = ("hello", "hi", "okay", "well")

SLOT_VALUES = {
    "food": ("italian", "chinese", "indian", "french", "thai", "greek", "korean", "spanish"),
    "price": ("cheap", "expensive", "moderate"),
    "area": ("north", "south", "east", "west", "centre"),
}
SLOT_TEMPLATES = {
    "food": (("i", "want", "{}", "food"), ("find", "me", "some", "{}", "food"), ("any", "{}", "restaurant", "please")),
    "price": (("i", "want", "a", "{}", "restaurant"), ("something", "{}", "please"), ("find", "a", "{}", "place")),
    "area": (("a", "restaurant", "in", "the", "{}"), ("somewhere", "in", "the", "{}", "please"), ("find", "a", "place", "in", "the", "{}")),
}

QUESTIONS = {
    "cls": ("is", "this", "positive", "or", "negative"),
    "span": ("what", "follows", "the", "marker"),
    "slot": ("what", "is", "the", "change", "in", "state"),
}
METRICS = {"cls": "em", "span": "nf1", "slot": "em"}
TASK_NAMES = ("cls", "span", "slot")


def _rng(seed: int, name: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, TASK_NAMES.index(name), index])


def _cls_sample(task_id: int, seed: int, index: int) -> Sample:
    rng = _rng(seed, "cls", index)
    positive = index % 2 == 0
    length = int(rng.integers(4, 7))
    words = [FILLER[i] for i in rng.integers(0, len(FILLER), size=length - 1)]
    pool = POSITIVE if positive else NEGATIVE
    words.insert(int(rng.integers(0, length)), pool[int(rng.integers(len(pool)))])
    return Sample(task_id, words, QUESTIONS["cls"], ["positive" if positive else "negative"])


def _span_sample(task_id: int, seed: int, index: int) -> Sample:
    rng = _rng(seed, "span", index)
    length = int(rng.integers(5, 8))
    words = [FILLER[i] for i in rng.integers(0, len(FILLER), size=length)]
    pos = int(rng.integers(0, length - 2))
    words[pos] = MARKER
    return Sample(task_id, words, QUESTIONS["span"], words[pos + 1 : pos + 3])


def _slot_sample(task_id: int, seed: int, index: int) -> Sample:
    rng = _rng(seed, "slot", index)
    slots = sorted(SLOT_VALUES)
    slot = slots[int(rng.integers(len(slots)))]
    value = SLOT_VALUES[slot][int(rng.integers(len(SLOT_VALUES[slot])))]
    template = SLOT_TEMPLATES[slot][int(rng.integers(len(SLOT_TEMPLATES[slot])))]
    words = [value if w == "{}" else w for w in template]
    if rng.random() < 0.5:
        words.insert(0, GREETINGS[int(rng.integers(len(GREETINGS)))])
    return Sample(task_id, words, QUESTIONS["slot"], [slot, ":", value])


_GENERATORS = {"cls": _cls_sample, "span": _span_sample, "slot": _slot_sample}


def _generate(name: str, seed: int, n: int, task_id: int, start: int = 0) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = _GENERATORS[name]
    return [gen(task_id, seed, i) for i in range(start, start + n)]


def gen_task_cls(seed: int, n: int, task_id: int = 0, start: int = 0) -> list[Sample]:
    return _generate("cls", seed, n, task_id, start)


def gen_task_span(seed: int, n: int, task_id: int = 1, start: int = 0) -> list[Sample]:
    return _generate("span", seed, n, task_id, start)


def gen_task_slot(seed: int, n: int, task_id: int = 2, start: int = 0) -> list[Sample]:
    return _generate("slot", seed, n, task_id, start)


@dataclass(frozen=True)
class ToyTask:
    id: int
    name: str
    seed: int
    question: tuple[str, ...]
    metric: str

    def split(self, n_train: int, n_test: int) -> tuple[list[Sample], list[Sample]]:
        train = _generate(self.name, self.seed, n_train, self.id)
        test = _generate(self.name, self.seed, n_test, self.id, start=n_train)
        return train, test


def toy_tasks(seed: int = 0) -> list[ToyTask]:
    """The three toy tasks with fixed ids cls=0, span=1, slot=2."""
    return [ToyTask(i, name, seed, QUESTIONS[name], METRICS[name]) for i, name in enumerate(TASK_NAMES)]


def all_words() -> set[str]:
    words = set(FILLER) | set(POSITIVE) | set(NEGATIVE) | {MARKER, "positive", "negative", ":"}
    words |= set(GREETINGS)
    for slot, values in SLOT_VALUES.items():
        words |= set(values) | {slot}
    for templates in SLOT_TEMPLATES.values():
        for t in templates:
            words |= {w for w in t if w != "{}"}
    return words


def toy_vocab() -> Vocab:
    return Vocab.build(len(TASK_NAMES), all_words(), {i: QUESTIONS[n] for i, n in enumerate(TASK_NAMES)})
