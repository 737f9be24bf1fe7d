"""Ranking metrics and the pairwise-preference evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .text import CorpusError, ExtractionExample


@dataclass
class EvalReport:
    p_at_1: float
    p_at_3: float
    p_at_5: float
    n_examples: int
    pairwise_accuracy: float | None = None
    n_pairs: int | None = None
    breakdown: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_at_1 <= self.p_at_3 <= self.p_at_5 <= 1.0:
            raise ValueError(f"precision values out of order: {self.p_at_1}, {self.p_at_3}, {self.p_at_5}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def ranking_from_scores(scores) -> list:
    """Indices sorted by descending score, ties toward the lower index."""
    return [int(i) for i in np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")]


def precision_at_k(predicted_rankings: Sequence[Sequence[int]], golds: Sequence[int], k: int) -> float:
    """Fraction of examples whose gold index appears in the first ``k`` predictions."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(predicted_rankings) != len(golds):
        raise ValueError("rankings and golds differ in length")
    if not golds:
        return 0.0
    hits = sum(int(g in list(r)[:k]) for r, g in zip(predicted_rankings, golds))
    return hits / len(golds)


def evaluate_rankings(rankings, golds) -> EvalReport:
    return EvalReport(precision_at_k(rankings, golds, 1), precision_at_k(rankings, golds, 3),
                      precision_at_k(rankings, golds, 5), len(golds))


@dataclass
class PairRecord:
    query: str
    title: str
    sentences: list
    cand_a: int
    cand_b: int
    label: int

    def as_example(self, doc_id: str = "pair") -> ExtractionExample:
        return ExtractionExample(doc_id, self.query, self.title, list(self.sentences))


def load_pairs(path) -> list:
    """Read pairwise-label JSONL: ``{query, title, sentences, cand_a, cand_b, label}``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(PairRecord(rec["query"], rec["title"], list(rec["sentences"]),
                                      int(rec["cand_a"]), int(rec["cand_b"]), int(rec["label"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"line {lineno}: bad pair record ({e})") from e
    return out


def pairwise_accuracy(score_fn: Callable[[ExtractionExample], np.ndarray], pairs: Iterable[PairRecord]):
    """Accuracy of preferring the higher-scored candidate; returns ``(accuracy, n_used, n_skipped)``.

    ``label`` 0 means ``cand_a`` is the better start sentence. Equal scores
    predict 0. Records whose candidates fall outside the document are skipped.
    """
    correct = used = skipped = 0
    for i, p in enumerate(pairs):
        n = len(p.sentences)
        if not (0 <= p.cand_a < n and 0 <= p.cand_b < n) or p.label not in (0, 1):
            skipped += 1
            continue
        s = np.asarray(score_fn(p.as_example(f"pair-{i}")))
        if max(p.cand_a, p.cand_b) >= len(s):
            # the scorer truncated the document before this candidate
            skipped += 1
            continue
        pred = 0 if s[p.cand_a] >= s[p.cand_b] else 1
        correct += int(pred == p.label)
        used += 1
    return (correct / used if used else 0.0), used, skipped
