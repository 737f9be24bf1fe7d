"""Tokenization, vocabulary, field concatenation and the JSONL corpus format.

Corpus records are UTF-8 JSON objects, one per line::

    {"id": "doc-0", "query": "...", "title": "...",
     "sentences": ["...", "..."], "label": 1}

``label`` (index of the gold start sentence) is optional.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")

SEG_QUERY, SEG_TITLE, SEG_SENTENCE = 0, 1, 2


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class LengthBudget:
    max_query: int = 16
    max_title: int = 32
    max_sentence: int = 64
    max_sentences: int = 160

    def __post_init__(self):
        for name in ("max_query", "max_title", "max_sentence", "max_sentences"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class ExtractionExample:
    id: str
    query: str
    title: str
    sentences: list
    gold_start: int | None = None

    def __post_init__(self):
        if len(self.sentences) < 1:
            raise CorpusError(f"example {self.id!r} has no sentences")
        if self.gold_start is not None and not 0 <= self.gold_start < len(self.sentences):
            raise CorpusError(f"example {self.id!r}: gold_start {self.gold_start} out of range")

    def to_json(self) -> dict:
        rec = {"id": self.id, "query": self.query, "title": self.title, "sentences": list(self.sentences)}
        if self.gold_start is not None:
            rec["label"] = self.gold_start
        return rec


@dataclass
class EncodedField:
    ids: np.ndarray
    mask: np.ndarray
    segments: np.ndarray

    def __len__(self):
        return len(self.ids)


def split_words(text: str) -> list:
    return text.lower().split()


class Vocab:
    """Word vocabulary with fixed special ids.

    With ``hash_buckets > 0`` out-of-vocabulary words map to one of that
    many extra ids by CRC32 instead of collapsing to ``[UNK]``.
    """

    def __init__(self, words: Iterable[str] = (), hash_buckets: int = 0):
        self.itos = list(SPECIAL_TOKENS)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            w = w.lower()
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)
        self.hash_buckets = hash_buckets

    @property
    def size(self) -> int:
        return len(self.itos) + self.hash_buckets

    def __len__(self):
        return self.size

    def lookup(self, word: str) -> int:
        i = self.stoi.get(word)
        if i is not None:
            return i
        if self.hash_buckets:
            return len(self.itos) + zlib.crc32(word.encode("utf-8")) % self.hash_buckets
        return UNK

    def tokenize(self, text: str) -> list:
        return [self.lookup(w) for w in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] if i < len(self.itos) else "[UNK]" for i in ids)

    @classmethod
    def from_examples(cls, examples: Iterable[ExtractionExample], min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for ex in examples:
            for text in (ex.query, ex.title, *ex.sentences):
                for w in split_words(text):
                    counts[w] = counts.get(w, 0) + 1
        return cls(sorted(w for w, c in counts.items() if c >= min_count))

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.itos[len(SPECIAL_TOKENS):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(text: str, vocab: Vocab) -> list:
    return vocab.tokenize(text)


def encode_concat(fields: Sequence[tuple], total_cap: int, vocab: Vocab,
                  segments: Sequence[int] | None = None) -> EncodedField:
    """Build ``[CLS] f1 [SEP] f2 [SEP] ...`` from ``(text, cap)`` pairs.

    Each field is cut to its own cap before the whole sequence is cut to
    ``total_cap`` (the leading CLS always survives).
    """
    if not fields:
        raise ValueError("encode_concat needs at least one field")
    if total_cap < 1:
        raise ValueError(f"total_cap must be >= 1, got {total_cap}")
    if segments is None:
        segments = list(range(len(fields)))
    ids, segs = [CLS], [segments[0]]
    for (text, cap), seg in zip(fields, segments):
        toks = vocab.tokenize(text)[:cap] if isinstance(text, str) else list(text)[:cap]
        ids.extend(toks)
        ids.append(SEP)
        segs.extend([seg] * (len(toks) + 1))
    ids, segs = ids[:total_cap], segs[:total_cap]
    return EncodedField(np.array(ids, dtype=np.int64), np.ones(len(ids), dtype=bool),
                        np.array(segs, dtype=np.int64))


def pad_fields(fields: Sequence[EncodedField]) -> tuple:
    """Right-pad fields to a common length: returns ``(ids, mask, segments)``."""
    n = max(len(f) for f in fields)
    ids = np.full((len(fields), n), PAD, dtype=np.int64)
    mask = np.zeros((len(fields), n), dtype=bool)
    segs = np.zeros((len(fields), n), dtype=np.int64)
    for i, f in enumerate(fields):
        ids[i, : len(f)] = f.ids
        mask[i, : len(f)] = f.mask
        segs[i, : len(f)] = f.segments
    return ids, mask, segs


# ---------------------------------------------------------------------------
# corpus I/O


@dataclass
class LoadStats:
    loaded: int = 0
    truncated: int = 0
    skipped: int = 0
    dropped_sentences: int = 0


def parse_record(rec: dict, max_sentences: int, stats: LoadStats, where: str = "") -> ExtractionExample | None:
    for key, typ in (("id", str), ("query", str), ("title", str), ("sentences", list)):
        if not isinstance(rec.get(key), typ):
            raise CorpusError(f"{where}field {key!r} missing or not a {typ.__name__}")
    label = rec.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
        raise CorpusError(f"{where}label must be an integer")
    sentences = rec["sentences"]
    if any(not isinstance(s, str) for s in sentences):
        raise CorpusError(f"{where}sentences must be strings")
    keep = [i for i, s in enumerate(sentences) if s.strip()]
    stats.dropped_sentences += len(sentences) - len(keep)
    if label is not None:
        label = keep.index(label) if label in keep else None
        if label is None:
            stats.skipped += 1
            return None
    kept = [sentences[i] for i in keep]
    if len(kept) > max_sentences:
        stats.truncated += 1
        kept = kept[:max_sentences]
        if label is not None and label >= max_sentences:
            stats.skipped += 1
            return None
    if not kept:
        stats.skipped += 1
        return None
    stats.loaded += 1
    return ExtractionExample(rec["id"], rec["query"], rec["title"], kept, label)


def load_corpus(path, max_sentences: int = 160, stats: LoadStats | None = None) -> Iterator[ExtractionExample]:
    """Stream examples from a JSONL file.

    Documents longer than ``max_sentences`` are truncated (counted in
    ``stats.truncated``); records whose label falls outside what survives
    are skipped (``stats.skipped``). Empty sentences are dropped and the
    label re-indexed.
    """
    stats = stats if stats is not None else LoadStats()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {lineno}: malformed JSON ({e.msg})") from e
            if not isinstance(rec, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            ex = parse_record(rec, max_sentences, stats, where=f"line {lineno}: ")
            if ex is not None:
                yield ex
    if stats.truncated or stats.skipped:
        log.warning("corpus %s: %d truncated, %d skipped", path, stats.truncated, stats.skipped)


def write_corpus(examples: Iterable[ExtractionExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_words(n: int) -> list:
    """Deterministic pronounceable pseudo-words."""
    cons, vows = "bdfgklmnprstvz", "aeiou"
    words = []
    for i in range(n):
        a, r = divmod(i, len(cons) * len(vows))
        b, c = divmod(r, len(vows))
        words.append(f"{cons[b]}{vows[c]}{cons[a % len(cons)]}{vows[(a // len(cons)) % len(vows)]}{i}")
    return words


@dataclass
class SynthConfig:
    """Knobs of the synthetic generator.

    ``mode="basic"``: exactly one sentence holds two query-token
    occurrences plus a title token; every other sentence holds at most one
    query token. ``mode="context"`` adds (a) title decoys, sentences with
    two query-token occurrences but no title token, placed before the gold
    where possible, and (b) late twins, sentences that qualify like the gold
    but sit after it; the label is the earliest qualifying sentence, so
    solving it needs the title and the document order.
    """

    mode: str = "basic"
    min_sentences: int = 3
    max_sentences: int = 12
    # short fields: longer ones dilute the match signal a 32-wide encoder can learn in 5 epochs
    query_len: tuple = (2, 3)
    title_len: tuple = (2, 3)
    sentence_len: tuple = (3, 6)
    p_query_distractor: float = 0.5
    p_title_distractor: float = 0.1
    p_repeat: float = 0.5
    p_title_decoy: float = 0.6
    p_late_twin: float = 0.5
    extra: dict = field(default_factory=dict)


def synth_corpus(seed: int, n_docs: int, vocab, path=None, cfg: SynthConfig | None = None) -> list:
    """Generate ``n_docs`` synthetic examples; write them as JSONL when ``path`` is given.

    ``vocab`` is either an int (number of generated words) or a sequence
    of words.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    cfg = cfg or SynthConfig()
    if cfg.mode not in ("basic", "context"):
        raise ValueError(f"unknown synth mode {cfg.mode!r}")
    words = synth_words(vocab) if isinstance(vocab, int) else [w.lower() for w in vocab]
    need = cfg.query_len[1] + cfg.title_len[1] + cfg.sentence_len[1]
    if len(words) < need:
        raise ValueError(f"vocab of {len(words)} words too small; need at least {need}")
    if cfg.sentence_len[0] < 3:
        raise ValueError("sentences need room for two query tokens and a title token (sentence_len >= 3)")
    rng = np.random.default_rng(seed)
    examples = [_synth_doc(rng, words, cfg, f"synth-{seed}-{i}") for i in range(n_docs)]
    if path is not None:
        write_corpus(examples, path)
    return examples


def _synth_doc(rng: np.random.Generator, words: list, cfg: SynthConfig, doc_id: str) -> ExtractionExample:
    def randint(lo_hi):
        return int(rng.integers(lo_hi[0], lo_hi[1] + 1))

    perm = rng.permutation(len(words))
    nq, nt = randint(cfg.query_len), randint(cfg.title_len)
    query = [words[i] for i in perm[:nq]]
    title = [words[i] for i in perm[nq : nq + nt]]
    filler = [words[i] for i in perm[nq + nt :]]
    n_sent = randint((cfg.min_sentences, cfg.max_sentences))

    def sentence(n_query: int, n_title: int) -> list:
        toks = [filler[i] for i in rng.integers(0, len(filler), randint(cfg.sentence_len))]
        if n_query == 2 and rng.random() < cfg.p_repeat:
            q = [query[rng.integers(nq)]] * 2
        else:
            q = [query[i] for i in rng.choice(nq, size=n_query, replace=False)]
        t = [title[i] for i in rng.choice(nt, size=n_title, replace=False)]
        # overwrite filler slots so sentence length carries no label signal
        slots = rng.choice(len(toks), size=len(q) + len(t), replace=False)
        for i, tok in zip(slots, q + t):
            toks[i] = tok
        return toks

    def distractor() -> list:
        return sentence(int(rng.random() < cfg.p_query_distractor), int(rng.random() < cfg.p_title_distractor))

    if cfg.mode == "basic":
        gold = int(rng.integers(n_sent))
        sents = [sentence(2, 1) if i == gold else distractor() for i in range(n_sent)]
    else:
        gold = int(rng.integers(n_sent - 1)) if n_sent > 1 else 0
        sents = [sentence(2, 1) if i == gold else distractor() for i in range(n_sent)]
        if gold > 0 and rng.random() < cfg.p_title_decoy:
            sents[int(rng.integers(gold))] = sentence(2, 0)
        if gold < n_sent - 1 and rng.random() < cfg.p_late_twin:
            sents[int(rng.integers(gold + 1, n_sent))] = sentence(2, 1)
    return ExtractionExample(doc_id, " ".join(query), " ".join(title), [" ".join(s) for s in sents], gold)
