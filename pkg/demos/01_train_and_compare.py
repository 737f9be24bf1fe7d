"""Train a toy DeepQSE on synthetic documents and compare it with BM25 and CTS.

Run from the repository root:

    python demos/01_train_and_compare.py

Takes roughly a minute on one CPU core.
"""
import numpy as np

from snipforge.baselines import baseline_scorer
from snipforge.encoders import EncoderConfig
from snipforge.metrics import evaluate_rankings, ranking_from_scores
from snipforge.text import LengthBudget, Vocab, synth_corpus
from snipforge.training import TrainConfig, evaluate, split_corpus, train

# Each synthetic document has one sentence carrying two query tokens plus a
# title token; every other sentence carries at most one query token.
corpus = synth_corpus(seed=7, n_docs=2000, vocab=200)
vocab = Vocab.from_examples(corpus)
_, val = split_corpus(corpus, 0.1, seed=7)

ex = corpus[0]
print("query:", ex.query, "| title:", ex.title)
for i, s in enumerate(ex.sentences):
    print(" *" if i == ex.gold_start else "  ", i, s)

# Lexical baselines need no training.
gold = [e.gold_start for e in val]
for name in ("bm25", "cts"):
    rep = evaluate_rankings([ranking_from_scores(baseline_scorer(name)(e)) for e in val], gold)
    print(f"{name:8s} P@1 {rep.p_at_1:.3f}  P@3 {rep.p_at_3:.3f}")

budget = LengthBudget(max_sentences=12)
enc = EncoderConfig(d=32, heads=4, layers=2, ff=64, vocab_size=max(vocab.size, 204), rel_positions=13, dropout=0.0)
res = train("deepqse", corpus, TrainConfig(lr=5e-4, batch_size=2, epochs=5, seed=7), enc, budget, vocab,
            progress=True)
rep = evaluate(res.model, val)
print(f"deepqse  P@1 {rep.p_at_1:.3f}  P@3 {rep.p_at_3:.3f}  (best epoch {res.best_epoch})")

# what did the model pick for the first held-out document?
ex = val[0]
scores = res.model.score_document(ex)
print("predicted", int(np.argmax(scores)), "gold", ex.gold_start)
