"""Samples, the closed word-level vocabulary, and the QA / LM / ID encodings.

Full sequences (before the one-step shift into inputs/targets):

    QA   C + TQ + [ANS] + A + [EOS]
    LM   [TASK_k] + C + TQ + [ANS] + A + [EOS]          ([GEN] instead of [TASK_k] if asked)
    ID   C + IDQ + [ANS2] + [TASK_k] + [EOS]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, GEN, ANS, ANS2, EOS = "[PAD]", "[GEN]", "[ANS]", "[ANS2]", "[EOS]"
SPECIALS = (PAD, GEN, ANS, ANS2, EOS)
ID_QUESTION = ("which", "task", "is", "this")


def task_token(k: int) -> str:
    return f"[TASK_{k}]"


@dataclass(frozen=True)
class Sample:
    task_id: int
    context: tuple[str, ...]
    question: tuple[str, ...]
    answer: tuple[str, ...]

    def __post_init__(self):
        for part in ("context", "question", "answer"):
            value = tuple(getattr(self, part))
            if not value:
                raise ValueError(f"Sample.{part} must be non-empty")
            object.__setattr__(self, part, value)

    def to_record(self) -> dict:
        return {
            "task": self.task_id,
            "context": " ".join(self.context),
            "question": " ".join(self.question),
            "answer": " ".join(self.answer),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        return cls(int(rec["task"]), rec["context"].split(), rec["question"].split(), rec["answer"].split())


@dataclass
class EncodedExample:
    input_ids: list[int]
    target_ids: list[int]
    loss_mask: list[bool]
    kind: str
    task_id: int

    def __post_init__(self):
        if not len(self.input_ids) == len(self.target_ids) == len(self.loss_mask):
            raise ValueError("EncodedExample fields must have equal length")


@dataclass
class Vocab:
    """Closed vocabulary; specials first, then one [TASK_k] per task, then content words."""

    tokens: list[str]
    questions: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special token {s}")
        self.questions = {int(k): tuple(v) for k, v in self.questions.items()}
        self.task_ids = sorted(int(t[6:-1]) for t in self.tokens if t.startswith("[TASK_"))
        self.task_of_id = {self.index[task_token(k)]: k for k in self.task_ids}
        self.special_ids = {self.index[t] for t in self.tokens if t.startswith("[")}

    @classmethod
    def build(cls, n_tasks: int, words: Iterable[str], questions: dict[int, Iterable[str]]) -> "Vocab":
        specials = list(SPECIALS) + [task_token(k) for k in range(n_tasks)]
        content = set(words) | set(ID_QUESTION)
        for q in questions.values():
            content |= set(q)
        bad = [w for w in content if w.startswith("[")]
        if bad:
            raise ValueError(f"content words may not look like special tokens: {bad}")
        return cls(specials + sorted(content), {k: tuple(q) for k, q in questions.items()})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise KeyError(f"token {tok!r} not in vocabulary") from None

    def ids(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def words(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path, questions: dict[int, Iterable[str]]) -> "Vocab":
        toks = [line for line in Path(path).read_text().splitlines() if line]
        return cls(toks, {k: tuple(q) for k, q in questions.items()})


def _finish(seq: list[int], n_prompt: int, kind: str, task_id: int, max_len: int | None) -> EncodedExample:
    """Shift ``seq`` into inputs/targets; targets at index >= n_prompt - 1 are scored."""
    if max_len is not None and len(seq) - 1 > max_len:
        raise ValueError(f"{kind} encoding of length {len(seq) - 1} exceeds max_seq_len {max_len}")
    inputs, targets = seq[:-1], seq[1:]
    mask = [i >= n_prompt - 1 for i in range(len(targets))]
    return EncodedExample(inputs, targets, mask, kind, task_id)


def encode_qa(sample: Sample, vocab: Vocab, max_len: int | None = None) -> EncodedExample:
    prompt = vocab.ids(sample.context) + vocab.ids(sample.question) + [vocab.id(ANS)]
    seq = prompt + vocab.ids(sample.answer) + [vocab.eos]
    return _finish(seq, len(prompt), "QA", sample.task_id, max_len)


def encode_lm(sample: Sample, vocab: Vocab, use_task_token: bool = True, max_len: int | None = None) -> EncodedExample:
    lead = vocab.id(task_token(sample.task_id) if use_task_token else GEN)
    seq = [lead] + vocab.ids(sample.context) + vocab.ids(sample.question) + [vocab.id(ANS)]
    seq += vocab.ids(sample.answer) + [vocab.eos]
    return _finish(seq, 1, "LM", sample.task_id, max_len)


def encode_id(sample: Sample, vocab: Vocab, max_len: int | None = None) -> EncodedExample:
    prompt = vocab.ids(sample.context) + vocab.ids(ID_QUESTION) + [vocab.id(ANS2)]
    seq = prompt + [vocab.id(task_token(sample.task_id)), vocab.eos]
    return _finish(seq, len(prompt), "ID", sample.task_id, max_len)


def qa_prompt(sample: Sample, vocab: Vocab) -> list[int]:
    """The C + TQ + [ANS] prefix the model answers from at evaluation time."""
    return vocab.ids(sample.context) + vocab.ids(sample.question) + [vocab.id(ANS)]


def parse_pseudo(tokens: Iterable[int], vocab: Vocab) -> tuple[Sample, bool] | None:
    """Split a generated ``[TASK_k] C TQ [ANS] A [EOS]`` sequence back into a sample.

    Returns ``None`` for malformed sequences. The flag says whether the
    question is task k's own question, i.e. whether the content corresponds
    to the task token that seeded it.
    """
    toks = list(tokens)
    if not toks or toks[0] not in vocab.task_of_id:
        return None
    k = vocab.task_of_id[toks[0]]
    body = toks[1:]
    if vocab.eos in body:
        body = body[: body.index(vocab.eos)]
    ans = vocab.id(ANS)
    if body.count(ans) != 1:
        return None
    cut = body.index(ans)
    before, answer = body[:cut], body[cut + 1 :]
    if not answer or any(t in vocab.special_ids for t in before + answer):
        return None
    words = vocab.words(before)
    match = None
    for task, q in sorted(vocab.questions.items(), key=lambda kv: -len(kv[1])):
        if len(words) > len(q) and tuple(words[-len(q) :]) == q:
            match = task
            break
    if match is None:
        return None
    q = vocab.questions[match]
    sample = Sample(k, words[: -len(q)], q, vocab.words(answer))
    return sample, match == k


def read_dataset(path: str | Path) -> list[Sample]:
    with open(path) as fh:
        return [Sample.from_record(json.loads(line)) for line in fh if line.strip()]


def write_dataset(path: str | Path, samples: Iterable[Sample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def pad_batch(examples: list[EncodedExample], pad_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to a common length: (inputs, targets, loss_mask, valid)."""
    width = max(len(e.input_ids) for e in examples)
    n = len(examples)
    inputs = np.full((n, width), pad_id, dtype=np.int64)
    targets = np.full((n, width), pad_id, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    valid = np.zeros((n, width), dtype=bool)
    for i, e in enumerate(examples):
        m = len(e.input_ids)
        inputs[i, :m] = e.input_ids
        targets[i, :m] = e.target_ids
        mask[i, :m] = e.loss_mask
        valid[i, :m] = True
    return inputs, targets, mask, valid
