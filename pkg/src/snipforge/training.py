"""Training loop for the three model kinds, with validation and early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .encoders import EncoderConfig
from .metrics import EvalReport, evaluate_rankings, ranking_from_scores
from .models import (Ablation, CoarseSelector, SnippetModel, build_model, loss_softmax_ce,
                     top_k)
from .text import ExtractionExample, LengthBudget, Vocab

log = logging.getLogger(__name__)


HISTORY_KEYS = ("epoch", "split", "loss", "p_at_1", "p_at_3", "p_at_5")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    patience: int = 2
    val_fraction: float = 0.1
    k: int = 20
    no_title: bool = False
    no_query: bool = False
    no_dare: bool = False
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.k < 1:
            raise ValueError("lr, batch_size, epochs and k must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.no_title, self.no_query, self.no_dare)


@dataclass
class TrainResult:
    model: SnippetModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_p_at_1: float = 0.0
    fingerprint: bytes = b""


def split_corpus(examples: list, val_fraction: float, seed: int) -> tuple:
    """Deterministic shuffled train/validation split."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = rng.permutation(len(examples))
    n_val = int(round(len(examples) * val_fraction))
    val = [examples[i] for i in sorted(order[:n_val])]
    train = [examples[i] for i in sorted(order[n_val:])]
    return train, val


def coarse_candidates(coarse: CoarseSelector, examples: list, k: int, batch_size: int = 128) -> list:
    """Top-K coarse candidates (rank order) for every example."""
    out = []
    for scores in score_examples(coarse, examples, batch_size):
        out.append(top_k(scores, k))
    return out


def force_gold(cands: list, gold: int | None) -> list:
    """Put the gold sentence into a candidate list, replacing the last candidate if it is missing."""
    if gold is None or gold in cands:
        return list(cands)
    return list(cands[:-1]) + [gold]


def score_examples(model: SnippetModel, examples: list, batch_size: int = 128, candidates: list | None = None) -> list:
    """Inference scores per example (one array per document, aligned with its candidate list)."""
    out = []
    docs = [model.encode(ex) for ex in examples]
    with T.no_grad():
        for i in range(0, len(docs), batch_size):
            cand = None if candidates is None else candidates[i : i + batch_size]
            batch = model.collate(docs[i : i + batch_size], cand)
            s = model.scores(batch).data
            out.extend(s[b, batch.slot_mask[b]].copy() for b in range(len(batch.ids)))
    return out


def rank_examples(model: SnippetModel, examples: list, batch_size: int = 128,
                  coarse: CoarseSelector | None = None, k: int = 20) -> list:
    """Full sentence rankings per document.

    With ``coarse`` given the model reranks the coarse top-K, and the
    remaining sentences follow in coarse order.
    """
    if coarse is None:
        return [ranking_from_scores(s) for s in score_examples(model, examples, batch_size)]
    rankings = []
    coarse_scores = score_examples(coarse, examples, batch_size)
    cands = [top_k(s, k) for s in coarse_scores]
    fine_scores = score_examples(model, examples, batch_size, cands)
    for sc, cand, sf in zip(coarse_scores, cands, fine_scores):
        head = [cand[j] for j in ranking_from_scores(sf)]
        rest = [i for i in ranking_from_scores(sc) if i not in set(cand)]
        rankings.append(head + rest)
    return rankings


def evaluate(model: SnippetModel, examples: list, batch_size: int = 128,
             coarse: CoarseSelector | None = None, k: int = 20) -> EvalReport:
    labeled = [ex for ex in examples if ex.gold_start is not None]
    rankings = rank_examples(model, labeled, batch_size, coarse, k)
    return evaluate_rankings(rankings, [ex.gold_start for ex in labeled])


def _mean_loss(model, docs, batch_size, candidates=None) -> float:
    total, n = 0.0, 0
    with T.no_grad():
        for i in range(0, len(docs), batch_size):
            cand = None if candidates is None else candidates[i : i + batch_size]
            batch = model.collate(docs[i : i + batch_size], cand)
            keep = batch.gold >= 0
            if not keep.any():
                continue
            s = model.scores(batch)
            loss = loss_softmax_ce(T.Tensor(s.data[keep]), batch.gold[keep], batch.slot_mask[keep])
            total += float(loss.data) * int(keep.sum())
            n += int(keep.sum())
    return total / n if n else float("nan")


def train(model_kind: str, corpus: list, cfg: TrainConfig, enc_cfg: EncoderConfig | None = None,
          budget: LengthBudget | None = None, vocab: Vocab | None = None,
          coarse: CoarseSelector | None = None, val: list | None = None,
          out_path=None, history_path=None, progress: bool = False) -> TrainResult:
    """Train one model kind with Adam on per-document softmax cross-entropy.

    ``fine`` needs a trained ``coarse`` model: training documents use its
    top-K candidates with the gold forced in; validation uses the true
    two-stage ranking. The best-validation parameters are restored at the
    end and, with ``out_path``, written as a checkpoint.
    """
    corpus = [ex for ex in corpus if ex.gold_start is not None]
    if not corpus:
        raise ValueError("training corpus is empty (no labeled examples)")
    if model_kind == "fine" and coarse is None:
        raise ValueError("fine reranker training needs a coarse selector for candidates")
    budget = budget or LengthBudget()
    if val is None:
        train_ex, val = split_corpus(corpus, cfg.val_fraction, cfg.seed)
    else:
        train_ex = corpus
    vocab = vocab or Vocab.from_examples(corpus)
    if enc_cfg is None:
        enc_cfg = EncoderConfig(vocab_size=vocab.size, rel_positions=budget.max_sentences + 1)
    model = build_model(model_kind, enc_cfg, vocab, budget, cfg.ablation, seed=cfg.seed, k=cfg.k)

    docs = [model.encode(ex) for ex in train_ex]
    cands = None
    if model_kind == "fine":
        cands = [force_gold(c, d.gold) for c, d in zip(coarse_candidates(coarse, train_ex, cfg.k), docs)]

    seeds = np.random.SeedSequence([cfg.seed, 0x7A17])
    shuffle_rng, drop_rng = (np.random.default_rng(s) for s in seeds.spawn(2))
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult(model)
    best_state, stale = None, 0
    hist_fh = open(history_path, "w", encoding="utf-8") if history_path else None

    def record(entry):
        result.history.append(entry)
        if hist_fh:
            hist_fh.write(json.dumps({k: entry[k] for k in HISTORY_KEYS}, sort_keys=True) + "\n")
            hist_fh.flush()

    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train(True, drop_rng)
            order = shuffle_rng.permutation(len(docs))
            losses = []
            for step, i in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[i : i + cfg.batch_size]
                batch = model.collate([docs[j] for j in idx], None if cands is None else [cands[j] for j in idx])
                try:
                    opt.zero_grad()
                    loss = loss_softmax_ce(model.scores(batch), batch.gold, batch.slot_mask)
                    loss.backward()
                    opt.step()
                except T.NonFiniteError as e:
                    raise TrainingDiverged(
                        f"{model_kind}: non-finite values at epoch {epoch} step {step} ({e}); "
                        f"recent losses {losses[-5:]}") from e
                losses.append(float(loss.data))
            model.eval()
            record({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                    "p_at_1": None, "p_at_3": None, "p_at_5": None, "step_losses": losses})
            if val:
                rep = evaluate(model, val, cfg.eval_batch_size, coarse if model_kind == "fine" else None, cfg.k)
                vdocs = [model.encode(ex) for ex in val]
                vc = None
                if model_kind == "fine":
                    vc = [force_gold(c, d.gold) for c, d in zip(coarse_candidates(coarse, val, cfg.k), vdocs)]
                vloss = _mean_loss(model, vdocs, cfg.eval_batch_size, vc)
                record({"epoch": epoch, "split": "val", "loss": vloss,
                        "p_at_1": rep.p_at_1, "p_at_3": rep.p_at_3, "p_at_5": rep.p_at_5})
                p1 = rep.p_at_1
            else:
                p1 = -float(np.mean(losses))
            if progress:
                log.info("%s epoch %d loss %.4f val P@1 %.4f (%.1fs)", model_kind, epoch,
                         np.mean(losses), p1, time.perf_counter() - t0)
            if best_state is None or p1 > result.best_p_at_1:
                result.best_p_at_1, result.best_epoch = p1, epoch
                best_state = [p.data.copy() for p in model.parameters()]
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if hist_fh:
            hist_fh.close()
    for p, data in zip(model.parameters(), best_state):
        p.data = data
    model.eval()
    result.fingerprint = checkpoint.fingerprint(model)
    if out_path is not None:
        checkpoint.save(model, out_path)
    return result


def write_history(history: list, path) -> None:
    lines = (json.dumps({k: h[k] for k in HISTORY_KEYS}, sort_keys=True) + "\n" for h in history)
    Path(path).write_text("".join(lines), encoding="utf-8")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
