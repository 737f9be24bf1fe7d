"""Lexical baselines: CTS-style overlap with a position prior, and BM25."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .text import split_words


def cts_score(query: str, sentences: Sequence[str]) -> np.ndarray:
    """CTS-style score: unique query-word overlap plus the prior ``1 / (1 + i)``."""
    q = set(split_words(query))
    return np.array([len(q & set(split_words(s))) + 1.0 / (1 + i) for i, s in enumerate(sentences)])


@dataclass
class BM25Stats:
    n: int
    avgdl: float
    df: dict

    @classmethod
    def from_sentences(cls, sentences: Sequence[str]) -> "BM25Stats":
        toks = [split_words(s) for s in sentences]
        df = Counter()
        for t in toks:
            df.update(set(t))
        n = len(toks)
        return cls(n, sum(len(t) for t in toks) / n if n else 0.0, dict(df))

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n - df + 0.5) / (df + 0.5))


def bm25_score(query: str, sentences: Sequence[str], stats: BM25Stats | None = None,
               k1: float = 1.2, b: float = 0.75) -> np.ndarray:
    """Okapi BM25 of each sentence against the query's distinct terms.

    Collection statistics default to the document's own sentences.
    """
    stats = stats or BM25Stats.from_sentences(sentences)
    terms = list(dict.fromkeys(split_words(query)))
    out = np.zeros(len(sentences))
    for i, s in enumerate(sentences):
        toks = split_words(s)
        tf = Counter(toks)
        norm = k1 * (1.0 - b + b * len(toks) / stats.avgdl) if stats.avgdl > 0 else k1
        for term in terms:
            f = tf.get(term, 0)
            if f:
                out[i] += stats.idf(term) * f * (k1 + 1.0) / (f + norm)
    return out


def baseline_scorer(name: str):
    """``ExtractionExample -> scores`` for ``"cts"`` or ``"bm25"``."""
    if name == "cts":
        return lambda ex: cts_score(ex.query, ex.sentences)
    if name == "bm25":
        return lambda ex: bm25_score(ex.query, ex.sentences)
    raise ValueError(f"unknown baseline {name!r}")
