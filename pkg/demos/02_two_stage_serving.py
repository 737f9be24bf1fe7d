"""Serve snippets with the two-stage pipeline and an offline sentence cache.

The coarse bi-encoder scores every sentence from cached vectors. The fine
reranker then reads only its top-K candidates.

    python demos/02_two_stage_serving.py
"""
import tempfile
from pathlib import Path

from snipforge import checkpoint
from snipforge.bench import latency_bench
from snipforge.encoders import EncoderConfig
from snipforge.serving import SentenceCache, TwoStagePipeline, build_cache
from snipforge.tensor import FlopsMeter
from snipforge.text import LengthBudget, Vocab, synth_corpus
from snipforge.training import TrainConfig, evaluate, split_corpus, train

corpus = synth_corpus(seed=7, n_docs=1000, vocab=200)
vocab = Vocab.from_examples(corpus)
_, val = split_corpus(corpus, 0.1, seed=7)
budget = LengthBudget(max_sentences=12)
enc = EncoderConfig(vocab_size=max(vocab.size, 204), rel_positions=13, dropout=0.0)
tc = dict(lr=5e-4, batch_size=2, epochs=3, seed=7)

coarse = train("coarse", corpus, TrainConfig(**tc), enc, budget, vocab).model
fine = train("fine", corpus, TrainConfig(**tc, k=4), enc, budget, vocab, coarse=coarse).model
print("two-stage P@1", evaluate(fine, val, coarse=coarse, k=4).p_at_1)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    checkpoint.save(coarse, tmp / "coarse.ckpt")
    # the cache is keyed to the coarse checkpoint's fingerprint
    build_cache(tmp / "coarse.ckpt", corpus, tmp / "cache.bin")
    cache = SentenceCache.load(tmp / "cache.bin")
    print("cache:", len(cache), "docs, d =", cache.d, "fingerprint", cache.fingerprint.hex()[:12])

    pipe = TwoStagePipeline(coarse, fine, cache, k=4, n=2)
    ex = val[0]
    with FlopsMeter() as meter:
        res = pipe.extract(ex.query, ex)
    print("query:", ex.query)
    print("snippet:", " / ".join(res.snippet), f"(start {res.start}, gold {ex.gold_start})")
    print("online FLOPs", meter.total_flops)
    print(latency_bench(pipe, val[:20], repetitions=5))
