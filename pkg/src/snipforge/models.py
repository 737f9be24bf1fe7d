"""DeepQSE, the cacheable coarse selector and the Cross Transformer fine reranker.

Every model turns a batch of documents into one score per sentence slot.
Documents are never split: a batch holds ``B`` documents, their ``S``
sentences flattened into one token matrix, and a ``[B, m]`` slot table
mapping each document's sentence slots back into that matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, Module, QueryKV, RelevanceEncoder, TokenEncoder
from .tensor import Tensor
from .text import (SEG_QUERY, SEG_SENTENCE, SEG_TITLE, EncodedField, ExtractionExample,
                   LengthBudget, Vocab, encode_concat, pad_fields)

MODEL_KINDS = ("deepqse", "coarse", "fine")


@dataclass(frozen=True)
class Ablation:
    no_title: bool = False
    no_query: bool = False
    no_dare: bool = False


@dataclass
class EncodedDoc:
    id: str
    query: EncodedField
    sentences: list
    gold: int | None


@dataclass
class Batch:
    q_ids: np.ndarray
    q_mask: np.ndarray
    q_seg: np.ndarray
    s_ids: np.ndarray
    s_mask: np.ndarray
    s_seg: np.ndarray
    s_doc: np.ndarray          # [S] document row of each flattened sentence
    slots: np.ndarray          # [B, m] flattened-sentence index, -1 for padding
    positions: np.ndarray      # [B, m] original sentence index within the document
    gold: np.ndarray           # [B] gold slot, -1 when unknown / absent
    ids: list = field(default_factory=list)

    @property
    def slot_mask(self) -> np.ndarray:
        return self.slots >= 0


def _seeds(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class SnippetModel(Module):
    kind = "base"

    def __init__(self, cfg: EncoderConfig, vocab: Vocab, budget: LengthBudget | None = None,
                 ablation: Ablation | None = None, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.budget = budget or LengthBudget()
        self.ablation = ablation or Ablation()
        self.seed = seed
        if vocab.size > cfg.vocab_size:
            raise ValueError(f"vocab of {vocab.size} ids exceeds cfg.vocab_size={cfg.vocab_size}")
        rel_needed = self.budget.max_sentences + 1
        if cfg.rel_positions < rel_needed:
            raise ValueError(f"rel_positions={cfg.rel_positions} < max_sentences + 1 = {rel_needed}")

    # -- text to fields -----------------------------------------------------

    def _texts(self, ex: ExtractionExample) -> tuple:
        query = "" if self.ablation.no_query else ex.query
        title = "" if self.ablation.no_title else ex.title
        return query, title

    def query_field(self, ex: ExtractionExample) -> EncodedField:
        b = self.budget
        query, title = self._texts(ex)
        return encode_concat([(query, b.max_query), (title, b.max_title)], b.max_query + b.max_title + 3,
                             self.vocab, segments=[SEG_QUERY, SEG_TITLE])

    def sentence_field(self, ex: ExtractionExample, text: str) -> EncodedField:
        raise NotImplementedError

    def encode(self, ex: ExtractionExample, only=None) -> EncodedDoc:
        """Encode one document; with ``only`` just those sentence indices are tokenized."""
        sents = ex.sentences[: self.budget.max_sentences]
        if not sents:
            raise ValueError(f"example {ex.id!r} has no sentences")
        gold = ex.gold_start if ex.gold_start is not None and ex.gold_start < len(sents) else None
        keep = range(len(sents)) if only is None else set(only)
        fields = [self.sentence_field(ex, s) if i in keep else None for i, s in enumerate(sents)]
        return EncodedDoc(ex.id, self.query_field(ex), fields, gold)

    def collate(self, docs: list, candidates: list | None = None) -> Batch:
        """Pack encoded documents; ``candidates[i]`` restricts document ``i`` to those sentence indices."""
        if candidates is None:
            candidates = [list(range(len(d.sentences))) for d in docs]
        m = max(len(c) for c in candidates)
        if m == 0:
            raise ValueError("every document needs at least one candidate sentence")
        slots = np.full((len(docs), m), -1, dtype=np.int64)
        positions = np.zeros((len(docs), m), dtype=np.int64)
        gold = np.full(len(docs), -1, dtype=np.int64)
        fields, s_doc = [], []
        for b, (doc, cand) in enumerate(zip(docs, candidates)):
            if not cand:
                raise ValueError(f"document {doc.id!r} has no candidate sentences")
            for j, idx in enumerate(cand):
                slots[b, j] = len(fields)
                positions[b, j] = idx
                fields.append(doc.sentences[idx])
                s_doc.append(b)
                if idx == doc.gold:
                    gold[b] = j
        q_ids, q_mask, q_seg = pad_fields([d.query for d in docs])
        s_ids, s_mask, s_seg = pad_fields(fields)
        return Batch(q_ids, q_mask, q_seg, s_ids, s_mask, s_seg, np.array(s_doc, dtype=np.int64),
                     slots, positions, gold, [d.id for d in docs])

    def prepare(self, examples: list, candidates: list | None = None) -> Batch:
        return self.collate([self.encode(ex) for ex in examples], candidates)

    # -- scoring -------------------------------------------------------------

    def scores(self, batch: Batch) -> Tensor:
        """Selection scores ``[B, m]`` (padding slots hold arbitrary finite values)."""
        raise NotImplementedError

    def score_document(self, ex: ExtractionExample, candidates: list | None = None) -> np.ndarray:
        """Inference-mode scores for one document, one per (candidate) sentence."""
        cand = None if candidates is None else [list(candidates)]
        batch = self.collate([self.encode(ex, None if cand is None else cand[0])], cand)
        with T.no_grad():
            s = self.scores(batch)
        return s.data[0, batch.slot_mask[0]].copy()

    def _relevance(self, rel: RelevanceEncoder, q_rep: Tensor, s_rep: Tensor, batch: Batch) -> Tensor:
        sent = T.gather_rows(s_rep, batch.slots)
        return rel.forward(q_rep, sent, batch.slot_mask, batch.positions)


class DeepQSEModel(SnippetModel):
    """Single-stage cross-encoder: joint (title, query, sentence) encoder + relevance encoder."""

    kind = "deepqse"

    def __init__(self, cfg, vocab, budget=None, ablation=None, seed=0):
        super().__init__(cfg, vocab, budget, ablation, seed)
        r1, r2, r3 = _seeds(seed, 3)
        self.query_encoder = TokenEncoder(r1, cfg)
        self.sentence_encoder = TokenEncoder(r2, cfg)
        self.relevance = RelevanceEncoder(r3, cfg, use_dare=not self.ablation.no_dare)

    def sentence_field(self, ex, text):
        b = self.budget
        query, title = self._texts(ex)
        return encode_concat([(title, b.max_title), (query, b.max_query), (text, b.max_sentence)],
                             b.max_title + b.max_query + b.max_sentence + 4, self.vocab,
                             segments=[SEG_TITLE, SEG_QUERY, SEG_SENTENCE])

    def scores(self, batch):
        g_q, _ = self.query_encoder.forward(batch.q_ids, batch.q_mask, batch.q_seg)
        g_s, _ = self.sentence_encoder.forward(batch.s_ids, batch.s_mask, batch.s_seg)
        return self._relevance(self.relevance, g_q, g_s, batch)


class CoarseSelector(SnippetModel):
    """Bi-encoder stage: the sentence encoder never sees the query, so its outputs are cacheable."""

    kind = "coarse"

    def __init__(self, cfg, vocab, budget=None, ablation=None, seed=0):
        super().__init__(cfg, vocab, budget, ablation, seed)
        r1, r2, r3 = _seeds(seed, 3)
        self.query_encoder = TokenEncoder(r1, cfg)
        self.sentence_encoder = TokenEncoder(r2, cfg)
        self.relevance = RelevanceEncoder(r3, cfg, use_dare=not self.ablation.no_dare)

    def sentence_field(self, ex, text):
        b = self.budget
        title = "" if self.ablation.no_title else ex.title
        return encode_concat([(title, b.max_title), (text, b.max_sentence)], b.max_title + b.max_sentence + 3,
                             self.vocab, segments=[SEG_TITLE, SEG_SENTENCE])

    def sentence_reps(self, batch: Batch) -> Tensor:
        """``h_s`` for every flattened sentence, ``[S, d]``."""
        h_s, _ = self.sentence_encoder.forward(batch.s_ids, batch.s_mask, batch.s_seg)
        return h_s

    def query_rep(self, batch: Batch) -> Tensor:
        h_q, _ = self.query_encoder.forward(batch.q_ids, batch.q_mask, batch.q_seg)
        return h_q

    def scores_from_reps(self, h_q: Tensor, h_s: Tensor, batch: Batch) -> Tensor:
        if self.ablation.no_dare:
            # without the relevance encoder the query can only enter through an interaction term
            h_s = T.mul(h_s, T.gather_rows(h_q, batch.s_doc))
        return self._relevance(self.relevance, h_q, h_s, batch)

    def scores(self, batch):
        return self.scores_from_reps(self.query_rep(batch), self.sentence_reps(batch), batch)


class FineReranker(SnippetModel):
    """Cross Transformer reranker: query/title K,V computed once and shared by every candidate."""

    kind = "fine"

    def __init__(self, cfg, vocab, budget=None, ablation=None, seed=0, k: int = 20):
        super().__init__(cfg, vocab, budget, ablation, seed)
        if k < 1:
            raise ValueError("K must be >= 1")
        self.k = k
        r1, r2, r3 = _seeds(seed, 3)
        self.query_encoder = TokenEncoder(r1, cfg)
        self.sentence_encoder = TokenEncoder(r2, cfg)
        self.relevance = RelevanceEncoder(r3, cfg, use_dare=not self.ablation.no_dare)

    def sentence_field(self, ex, text):
        b = self.budget
        return encode_concat([(text, b.max_sentence)], b.max_sentence + 2, self.vocab, segments=[SEG_SENTENCE])

    def query_kv(self, batch: Batch) -> QueryKV:
        _, kv = self.query_encoder.forward(batch.q_ids, batch.q_mask, batch.q_seg, capture=True)
        return kv

    def scores(self, batch):
        kv = self.query_kv(batch)
        l_s, _ = self.sentence_encoder.forward(batch.s_ids, batch.s_mask, batch.s_seg, query_kv=kv.take(batch.s_doc))
        return self._relevance(self.relevance, kv.rep, l_s, batch)


MODEL_CLASSES = {"deepqse": DeepQSEModel, "coarse": CoarseSelector, "fine": FineReranker}


def build_model(kind: str, cfg: EncoderConfig, vocab: Vocab, budget=None, ablation=None, seed: int = 0, k: int = 20):
    if kind not in MODEL_CLASSES:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if kind == "fine":
        return FineReranker(cfg, vocab, budget, ablation, seed, k=k)
    return MODEL_CLASSES[kind](cfg, vocab, budget, ablation, seed)


# ---------------------------------------------------------------------------


def loss_softmax_ce(scores, gold_start, valid_mask=None) -> Tensor:
    """Per-document softmax cross-entropy over valid sentences, averaged over the batch.

    ``scores`` is ``[m]`` or ``[B, m]``; ``gold_start`` a slot index (or ``[B]``).
    """
    scores = T.as_tensor(scores)
    gold = np.asarray(gold_start, dtype=np.int64)
    if np.any(gold < 0) or np.any(gold >= scores.shape[-1]):
        raise ValueError(f"gold index {gold_start} outside the {scores.shape[-1]} score slots")
    return T.cross_entropy_from_logits(scores, gold, valid_mask)


def forward_deepqse(model: DeepQSEModel, example: ExtractionExample) -> np.ndarray:
    return model.score_document(example)


def top_k(scores: np.ndarray, k: int) -> list:
    """Indices of the ``k`` highest scores, ties broken toward the lower index."""
    if k < 1:
        raise ValueError("K must be >= 1")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:k]]


def argmax_lowest(scores) -> int:
    scores = np.asarray(scores)
    return int(np.flatnonzero(scores == scores.max())[0])


def forward_two_stage(coarse: CoarseSelector, fine: SnippetModel, example: ExtractionExample, k: int):
    """Coarse scores over all sentences, top-K candidates (rank order), fine scores per candidate."""
    s_c = coarse.score_document(example)
    cand = top_k(s_c, k)
    s_f = fine.score_document(example, cand)
    return s_c, cand, s_f
