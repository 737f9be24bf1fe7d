import math

import numpy as np
import pytest

from snipforge.baselines import BM25Stats, baseline_scorer, bm25_score, cts_score
from snipforge.bench import latency_bench
from snipforge.encoders import EncoderConfig
from snipforge.flops import PIPELINES, SeqLengths, bert_base_config, flops_breakdown, flops_estimate
from snipforge.metrics import (EvalReport, PairRecord, evaluate_rankings, load_pairs, pairwise_accuracy,
                               precision_at_k, ranking_from_scores)
from snipforge.models import build_model
from snipforge.serving import SingleStagePipeline, TwoStagePipeline, build_cache
from snipforge.tensor import FlopsMeter
from snipforge.text import ExtractionExample, LengthBudget, Vocab


class TestCTS:
    def test_no_overlap_is_position_prior(self):
        s = cts_score("zz", ["a b", "c d", "e"])
        np.testing.assert_allclose(s, [1.0, 0.5, 1 / 3])
        assert int(np.argmax(s)) == 0

    def test_both_words_in_third_sentence(self):
        s = cts_score("einstein achievement", ["born in ulm", "moved to zurich", "einstein achievement relativity"])
        assert s[2] == pytest.approx(2 + 1 / 3)
        assert int(np.argmax(s)) == 2

    def test_duplicates_count_once(self):
        assert cts_score("a a", ["a a a"])[0] == pytest.approx(1 + 1.0)


class TestBM25:
    def test_absent_term_contributes_zero(self):
        np.testing.assert_array_equal(bm25_score("zz", ["a b", "c"]), [0.0, 0.0])

    def test_single_sentence_plug_in(self):
        s = bm25_score("a", ["a b"])
        idf = math.log(1 + (1 - 1 + 0.5) / (1 + 0.5))
        assert s[0] == pytest.approx(idf * (1 * 2.2) / (1 + 1.2), rel=1e-12)
        assert s[0] == pytest.approx(idf, rel=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        words = [f"w{i}" for i in range(8)]
        for _ in range(50):
            sents = [" ".join(rng.choice(words, size=rng.integers(1, 6))) for _ in range(rng.integers(1, 6))]
            assert (bm25_score(" ".join(rng.choice(words, 3)), sents) >= 0).all()

    def test_idf_formula(self):
        st = BM25Stats.from_sentences(["a b", "a c", "d"])
        assert st.idf("a") == pytest.approx(math.log(1 + (3 - 2 + 0.5) / 2.5))
        assert st.avgdl == pytest.approx(5 / 3)

    def test_deterministic_scorer(self):
        ex = ExtractionExample("x", "a c", "t", ["a b", "c a", "d"])
        for name in ("bm25", "cts"):
            runs = [baseline_scorer(name)(ex) for _ in range(5)]
            assert all(np.array_equal(r, runs[0]) for r in runs)

    def test_unknown_baseline(self):
        with pytest.raises(ValueError):
            baseline_scorer("tfidf")


class TestPrecision:
    def test_gold_always_first(self):
        r = [[2, 0, 1], [0, 1]]
        rep = evaluate_rankings(r, [2, 0])
        assert rep.p_at_1 == rep.p_at_3 == rep.p_at_5 == 1.0

    def test_ranks_two_and_four(self):
        r = [[0, 7, 1, 2, 3], [0, 1, 2, 9, 4]]
        g = [7, 9]
        assert (precision_at_k(r, g, 1), precision_at_k(r, g, 3), precision_at_k(r, g, 5)) == (0.0, 0.5, 1.0)

    def test_k_beyond_length(self):
        assert precision_at_k([[1, 0], [0, 1]], [0, 1], 5) == 1.0

    def test_k_zero(self):
        with pytest.raises(ValueError):
            precision_at_k([[0]], [0], 0)

    def test_report_order_enforced(self):
        with pytest.raises(ValueError):
            EvalReport(0.5, 0.4, 0.6, 10)

    def test_ranking_ties(self):
        assert ranking_from_scores([1.0, 3.0, 3.0, 0.0]) == [1, 2, 0, 3]


class TestPairwise:
    pairs = [PairRecord("q", "t", ["a", "b", "c"], 0, 2, 0), PairRecord("q", "t", ["a", "b", "c"], 1, 0, 1)]

    def test_oracle(self):
        assert pairwise_accuracy(lambda ex: np.array([3.0, 1.0, 2.0]), self.pairs) == (1.0, 2, 0)

    def test_ties_predict_a(self):
        acc, used, _ = pairwise_accuracy(lambda ex: np.zeros(3), self.pairs)
        assert (acc, used) == (0.5, 2)

    def test_invalid_candidates_skipped(self):
        bad = [PairRecord("q", "t", ["a"], 0, 3, 0)]
        assert pairwise_accuracy(lambda ex: np.zeros(1), bad) == (0.0, 0, 1)

    def test_truncated_scores_skipped(self):
        pair = [PairRecord("q", "t", ["a", "b", "c"], 0, 2, 0)]
        assert pairwise_accuracy(lambda ex: np.zeros(2), pair) == (0.0, 0, 1)

    def test_coin_is_near_chance(self):
        rng = np.random.default_rng(1)
        pairs = [PairRecord("q", "t", ["a", "b"], 0, 1, int(rng.integers(2))) for _ in range(2000)]
        acc, _, _ = pairwise_accuracy(lambda ex: rng.random(2), pairs)
        assert abs(acc - 0.5) < 0.05

    def test_load_pairs(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text('{"query": "q", "title": "t", "sentences": ["a", "b"], "cand_a": 0, "cand_b": 1, "label": 1}\n')
        (rec,) = load_pairs(p)
        assert rec.cand_b == 1 and rec.label == 1


# -- FLOPs ---------------------------------------------------------------------

TINY_B = LengthBudget(max_query=3, max_title=2, max_sentence=4, max_sentences=4)


def tiny(v, **kw):
    base = dict(d=4, heads=1, layers=1, ff=8, max_positions=16, vocab_size=v.size, dropout=0.0, rel_layers=1,
                rel_positions=5, init_std=0.3)
    base.update(kw)
    return EncoderConfig(**base)


def full_example(r=1):
    # every field fills its cap so the encoded lengths equal the formula's lengths
    return ExtractionExample("f", "q1 q2 q3", "t1 t2", [f"s{i} a b c" for i in range(r)], 0)


@pytest.fixture
def tv():
    return Vocab.from_examples([full_example(4)])


class TestFlopsExact:
    def test_deepqse(self, tv):
        m = build_model("deepqse", tiny(tv), tv, TINY_B)
        with FlopsMeter() as meter:
            m.score_document(full_example(1))
        assert meter.total_flops == flops_estimate("deepqse", m.cfg, 1, 1, TINY_B)

    def test_coarse_online(self, tv):
        coarse = build_model("coarse", tiny(tv), tv, TINY_B)
        ex = full_example(1)
        pipe = TwoStagePipeline(coarse, None, build_cache(coarse, [ex]), k=1)
        with FlopsMeter() as meter:
            pipe.extract(ex.query, ex)
        assert meter.total_flops == flops_estimate("coarse", coarse.cfg, 1, 1, TINY_B)

    def test_offline_cache(self, tv):
        coarse = build_model("coarse", tiny(tv), tv, TINY_B)
        with FlopsMeter() as meter:
            build_cache(coarse, [full_example(1)])
        assert meter.total_flops == flops_breakdown("coarse", coarse.cfg, 1, 1, TINY_B)["offline"]

    @pytest.mark.parametrize("r,k", [(1, 1), (4, 2), (4, 4)])
    def test_efficient(self, tv, r, k):
        coarse = build_model("coarse", tiny(tv), tv, TINY_B, seed=1)
        fine = build_model("fine", tiny(tv), tv, TINY_B, seed=2)
        ex = full_example(r)
        pipe = TwoStagePipeline(coarse, fine, build_cache(coarse, [ex]), k=k)
        with FlopsMeter() as meter:
            pipe.extract(ex.query, ex)
        assert meter.total_flops == flops_estimate("efficient", coarse.cfg, r, k, TINY_B)

    def test_deepqse_multi_sentence_and_heads(self, tv):
        m = build_model("deepqse", tiny(tv, d=8, heads=2, layers=2), tv, TINY_B)
        with FlopsMeter() as meter:
            m.score_document(full_example(3))
        assert meter.total_flops == flops_estimate("deepqse", m.cfg, 3, 3, TINY_B)


class TestFlopsModel:
    def test_k0_is_coarse_only(self):
        cfg = EncoderConfig()
        assert flops_estimate("efficient", cfg, 160, 0) == flops_estimate("coarse", cfg, 160, 0)

    def test_bert_ratio(self):
        cfg = bert_base_config()
        ratio = flops_estimate("efficient", cfg, 160, 20) / flops_estimate("deepqse", cfg, 160, 20)
        assert 0.05 <= ratio <= 0.20

    def test_efficient_below_deepqse_when_k_below_r(self):
        for cfg in (EncoderConfig(), EncoderConfig(d=16, heads=2, layers=1, ff=32), bert_base_config()):
            for r in (2, 12, 160):
                for k in (1, r // 2, r - 1):
                    if 1 <= k < r:
                        assert flops_estimate("efficient", cfg, r, k) < flops_estimate("deepqse", cfg, r, k)

    @pytest.mark.parametrize("field", ["R", "K", "layers", "d"])
    def test_strictly_increasing(self, field):
        base = dict(R=40, K=10, layers=2, d=32)
        lo, hi = dict(base), dict(base)
        hi[field] += 4 if field == "d" else 1

        def est(p):
            cfg = EncoderConfig(d=p["d"], heads=4, layers=p["layers"], ff=64)
            return flops_estimate("efficient", cfg, p["R"], p["K"]), flops_estimate("deepqse", cfg, p["R"], p["K"])

        (eff_hi, dq_hi), (eff_lo, dq_lo) = est(hi), est(lo)
        assert eff_hi > eff_lo
        # single-stage cost has no K term
        assert dq_hi > dq_lo if field != "K" else dq_hi == dq_lo

    def test_additive_and_nonnegative(self):
        for kind in PIPELINES:
            b = flops_breakdown(kind, EncoderConfig(), 12, 4)
            assert b["online"] == sum(b["online_parts"].values()) >= 0
            assert b["offline"] == sum(b["offline_parts"].values()) >= 0

    def test_unknown_pipeline(self):
        with pytest.raises(ValueError):
            flops_estimate("nope", EncoderConfig(), 1, 1)

    def test_seq_lengths(self):
        assert SeqLengths.from_budget(LengthBudget()) == SeqLengths(51, 116, 99, 66)


class TestBench:
    @pytest.fixture
    def pipe(self, tv):
        return SingleStagePipeline(build_model("deepqse", tiny(tv), tv, TINY_B))

    def test_single_rep(self, pipe):
        rep = latency_bench(pipe, [full_example(2)], repetitions=1)
        assert rep["p50_ms"] == rep["p95_ms"] > 0
        assert rep["deterministic"]

    def test_empty_sample(self, pipe):
        with pytest.raises(ValueError):
            latency_bench(pipe, [], 3)

    def test_warmup_minimum(self, pipe):
        with pytest.raises(ValueError):
            latency_bench(pipe, [full_example(1)], 3, warmup=2)

    def test_config_provenance(self, pipe):
        rep = latency_bench(pipe, [full_example(1), full_example(3)], 3, config={"k": 20})
        assert rep["config"] == {"k": 20} and rep["requests"] == 2 and rep["p50_ms"] <= rep["p95_ms"]
