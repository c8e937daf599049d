"""Exact match and normalized token F1 over word tokens."""

from __future__ import annotations

import string
from collections import Counter
from typing import Iterable

ARTICLES = frozenset({"a", "an", "the"})
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_text(tokens: Iterable[str] | str) -> list[str]:
    """Lowercase, strip punctuation, drop articles."""
    if isinstance(tokens, str):
        tokens = tokens.split()
    out = []
    for tok in tokens:
        tok = tok.lower().translate(_PUNCT)
        if tok and tok not in ARTICLES:
            out.append(tok)
    return out


def score_em(pred, gold) -> int:
    return int(normalize_text(pred) == normalize_text(gold))


def score_nf1(pred, gold) -> float:
    p, g = normalize_text(pred), normalize_text(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


SCORERS = {"em": score_em, "nf1": score_nf1}
