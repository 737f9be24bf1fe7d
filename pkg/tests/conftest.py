import numpy as np
import pytest

from snipforge.encoders import EncoderConfig
from snipforge.models import build_model
from snipforge.text import LengthBudget, Vocab, synth_corpus

TINY_BUDGET = LengthBudget(max_query=6, max_title=6, max_sentence=12, max_sentences=12)


def tiny_config(vocab_size, **kw):
    base = dict(d=8, heads=2, layers=1, ff=16, max_positions=40, vocab_size=vocab_size, dropout=0.0,
                rel_layers=1, rel_positions=TINY_BUDGET.max_sentences + 1, init_std=0.3)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def corpus():
    return synth_corpus(3, 40, 60)


@pytest.fixture(scope="session")
def vocab(corpus):
    return Vocab.from_examples(corpus)


@pytest.fixture
def make_model(vocab):
    def make(kind, seed=0, ablation=None, **kw):
        return build_model(kind, tiny_config(vocab.size, **kw), vocab, TINY_BUDGET, ablation, seed=seed)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
