"""Offline sentence cache and online snippet extraction.

Cache file layout (little-endian)::

    b"SNIPCACHE1"  magic (10 bytes)
    u32            format version (1)
    u32            representation width d
    u64            document count
    32 bytes       fingerprint: SHA-256 of the coarse checkpoint bytes
    per document:  u32 id length, UTF-8 id, u32 sentence count,
                   sentence count * d float32 values (row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .models import Batch, CoarseSelector, DeepQSEModel, SnippetModel, argmax_lowest, top_k
from .text import ExtractionExample, pad_fields

CACHE_MAGIC = b"SNIPCACHE1"
CACHE_VERSION = 1
_HEADER = struct.Struct("<IIQ32s")


class CacheError(ValueError):
    pass


class StaleCacheError(CacheError):
    pass


class UnknownDocumentError(KeyError):
    pass


@dataclass
class SentenceCache:
    d: int
    fingerprint: bytes
    docs: dict

    def __contains__(self, doc_id):
        return doc_id in self.docs

    def __len__(self):
        return len(self.docs)

    def rows(self, doc_id: str) -> np.ndarray:
        try:
            return self.docs[doc_id]
        except KeyError:
            raise UnknownDocumentError(doc_id) from None

    def to_bytes(self) -> bytes:
        parts = [CACHE_MAGIC, _HEADER.pack(CACHE_VERSION, self.d, len(self.docs), self.fingerprint)]
        for doc_id, block in self.docs.items():
            raw = doc_id.encode("utf-8")
            block = np.ascontiguousarray(block, dtype="<f4")
            if block.ndim != 2 or block.shape[1] != self.d:
                raise CacheError(f"doc {doc_id!r}: block shape {block.shape} does not match d={self.d}")
            parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", block.shape[0]), block.tobytes()]
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "SentenceCache":
        if not data.startswith(CACHE_MAGIC):
            raise CacheError("not a SNIPCACHE1 file (bad magic)")
        off = len(CACHE_MAGIC)
        try:
            version, d, count, fp = _HEADER.unpack_from(data, off)
            if version != CACHE_VERSION:
                raise CacheError(f"unsupported cache version {version}")
            off += _HEADER.size
            docs = {}
            for _ in range(count):
                (ln,) = struct.unpack_from("<I", data, off)
                off += 4
                doc_id = data[off : off + ln].decode("utf-8")
                off += ln
                (r,) = struct.unpack_from("<I", data, off)
                off += 4
                nbytes = r * d * 4
                if off + nbytes > len(data):
                    raise CacheError(f"doc {doc_id!r} block truncated")
                docs[doc_id] = np.frombuffer(data, dtype="<f4", count=r * d, offset=off).reshape(r, d)
                off += nbytes
        except struct.error as e:
            raise CacheError(f"truncated cache file: {e}") from e
        if off != len(data):
            raise CacheError("trailing bytes after last cache record")
        return cls(d, fp, docs)

    @classmethod
    def load(cls, path) -> "SentenceCache":
        return cls.from_bytes(Path(path).read_bytes())


def _load_model(m):
    return checkpoint.load(m) if isinstance(m, (str, Path)) else m


def _checkpoint_identity(coarse) -> tuple:
    """``(model, fingerprint)``; a path must round-trip byte-exactly so the hash names the parameters."""
    if isinstance(coarse, (str, Path)):
        raw = Path(coarse).read_bytes()
        model = checkpoint.from_bytes(raw)
        if checkpoint.to_bytes(model) != raw:
            raise CacheError(f"checkpoint {coarse} does not round-trip; its fingerprint would not identify its parameters")
        return model, checkpoint.fingerprint(raw)
    return coarse, checkpoint.fingerprint(coarse)


def encode_cache_rows(coarse: CoarseSelector, examples: list, batch_size: int = 128) -> dict:
    """``h_s`` blocks (float64) per document id."""
    out = {}
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            batch = coarse.prepare(chunk)
            h = coarse.sentence_reps(batch).data
            for b, ex in enumerate(chunk):
                out[ex.id] = h[batch.slots[b, batch.slot_mask[b]]]
    return out


def build_cache(coarse, corpus, out_path=None, batch_size: int = 128) -> SentenceCache:
    """Encode every (title, sentence) pair with the coarse sentence encoder and persist as float32."""
    model, fp = _checkpoint_identity(coarse)
    examples = list(corpus)
    seen = set()
    for ex in examples:
        if ex.id in seen:
            raise CacheError(f"duplicate document id {ex.id!r}")
        seen.add(ex.id)
    rows = encode_cache_rows(model, examples, batch_size)
    cache = SentenceCache(model.cfg.d, fp, {ex.id: rows[ex.id].astype("<f4") for ex in examples})
    if out_path is not None:
        cache.save(out_path)
    return cache


@dataclass
class SnippetResult:
    doc_id: str
    start: int
    snippet: list
    scores_coarse: list | None
    scores_fine: list | None
    provenance: str
    candidates: list | None = None

    def to_json(self) -> dict:
        return {"doc_id": self.doc_id, "start": self.start, "snippet": self.snippet,
                "scores_coarse": self.scores_coarse, "scores_fine": self.scores_fine,
                "provenance": self.provenance}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False)


def snippet_window(sentences: list, start: int, n: int) -> list:
    """``n`` consecutive sentences from ``start``, clipped at the document end."""
    if n < 1:
        raise ValueError("snippet length n must be >= 1")
    return list(sentences[start : start + n])


def _lowest_index_argmax(indices: list, scores) -> int:
    scores = np.asarray(scores)
    best = scores.max()
    return min(i for i, s in zip(indices, scores) if s == best)


def _query_example(query: str, doc: ExtractionExample) -> ExtractionExample:
    return ExtractionExample(doc.id, query, doc.title, list(doc.sentences))


def coarse_scores_cached(coarse: CoarseSelector, query: str, doc: ExtractionExample, rows: np.ndarray) -> np.ndarray:
    """Coarse scores from cached ``h_s`` rows; only the query side is encoded online."""
    ex = _query_example(query, doc)
    r = rows.shape[0]
    q_ids, q_mask, q_seg = pad_fields([coarse.query_field(ex)])
    batch = Batch(q_ids, q_mask, q_seg, None, None, None, np.zeros(r, dtype=np.int64),
                  np.arange(r)[None], np.arange(r)[None], np.array([-1]), [doc.id])
    with T.no_grad():
        h_q = coarse.query_rep(batch)
        s = coarse.scores_from_reps(h_q, T.Tensor(rows.astype(np.float64)), batch)
    return s.data[0].copy()


def coarse_scores_recomputed(coarse: CoarseSelector, query: str, doc: ExtractionExample) -> np.ndarray:
    """Coarse scores with ``h_s`` recomputed in float64 (no cache)."""
    return coarse.score_document(_query_example(query, doc))


class TwoStagePipeline:
    """Cached coarse selection, top-K, then fine reranking of the candidates.

    ``fine`` may be a :class:`FineReranker` or, for the no-Cross-Transformer
    ablation, a :class:`DeepQSEModel`; with ``fine=None`` the coarse argmax
    is returned (coarse-only).
    """

    def __init__(self, coarse, fine, cache: SentenceCache, k: int = 20, n: int = 2):
        if k < 1:
            raise ValueError("K must be >= 1")
        self.coarse, fp = _checkpoint_identity(coarse)
        self.fine = _load_model(fine) if fine is not None else None
        if isinstance(cache, (str, Path)):
            cache = SentenceCache.load(cache)
        if cache.fingerprint != fp:
            raise StaleCacheError("sentence cache was built by a different coarse checkpoint")
        if cache.d != self.coarse.cfg.d:
            raise StaleCacheError(f"cache width {cache.d} != coarse model width {self.coarse.cfg.d}")
        self.cache, self.k, self.n = cache, k, n

    def extract(self, query: str, doc: ExtractionExample) -> SnippetResult:
        rows = self.cache.rows(doc.id)
        sents = doc.sentences[: self.coarse.budget.max_sentences]
        if rows.shape[0] != len(sents):
            raise StaleCacheError(f"doc {doc.id!r}: cache has {rows.shape[0]} rows, document has {len(sents)} sentences")
        s_c = coarse_scores_cached(self.coarse, query, doc, rows)
        if self.fine is None:
            start = argmax_lowest(s_c)
            return SnippetResult(doc.id, start, snippet_window(sents, start, self.n), s_c.tolist(), None,
                                 "coarse-only", top_k(s_c, self.k))
        cand = top_k(s_c, self.k)
        s_f = self.fine.score_document(_query_example(query, doc), cand)
        start = _lowest_index_argmax(cand, s_f)
        fine_full = [None] * len(sents)
        for i, s in zip(cand, s_f):
            fine_full[i] = float(s)
        return SnippetResult(doc.id, start, snippet_window(sents, start, self.n), s_c.tolist(), fine_full,
                             "two-stage", cand)


class SingleStagePipeline:
    def __init__(self, deepqse, n: int = 2):
        self.model = _load_model(deepqse)
        self.n = n

    def extract(self, query: str, doc: ExtractionExample) -> SnippetResult:
        if not doc.sentences:
            raise ValueError("empty document")
        sents = doc.sentences[: self.model.budget.max_sentences]
        s = self.model.score_document(_query_example(query, doc))
        start = argmax_lowest(s)
        return SnippetResult(doc.id, start, snippet_window(sents, start, self.n), None, s.tolist(), "single-stage")


def extract_snippet(query: str, doc: ExtractionExample, cache, coarse, fine, k: int = 20, n: int = 2) -> SnippetResult:
    return TwoStagePipeline(coarse, fine, cache, k, n).extract(query, doc)


def extract_snippet_single(query: str, doc: ExtractionExample, deepqse, n: int = 2) -> SnippetResult:
    return SingleStagePipeline(deepqse, n).extract(query, doc)
