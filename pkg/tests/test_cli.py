import hashlib
import json

import pytest

from snipforge import cli
from snipforge.cli import EXIT_FINGERPRINT, EXIT_MISSING, EXIT_USAGE, resolve_seed

TINY = {
    "train": {"lr": 3e-3, "batch_size": 8, "epochs": 1},
    "encoder": {"d": 8, "heads": 2, "layers": 1, "ff": 16, "max_positions": 40, "dropout": 0.0,
                "rel_layers": 1, "rel_positions": 13, "init_std": 0.3},
    "budget": {"max_query": 6, "max_title": 6, "max_sentence": 12, "max_sentences": 12},
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def ok(capsys, *argv) -> dict:
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def artifacts(workdir):
    """Corpus, tiny checkpoints and cache built once through the CLI itself."""
    cfg = workdir / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    corpus = workdir / "c.jsonl"
    steps = [
        ["synth", "--seed", 3, "--docs", 60, "--vocab", 40, "--out", corpus],
        ["train", "--model", "coarse", "--corpus", corpus, "--config", cfg, "--out", workdir / "coarse.ckpt"],
        ["train", "--model", "fine", "--corpus", corpus, "--config", cfg, "--coarse-ckpt", workdir / "coarse.ckpt",
         "--k", 3, "--out", workdir / "fine.ckpt"],
        ["train", "--model", "deepqse", "--corpus", corpus, "--config", cfg, "--out", workdir / "dq.ckpt"],
        ["index", "--coarse-ckpt", workdir / "coarse.ckpt", "--corpus", corpus, "--out", workdir / "cache.bin"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    return workdir


def first_doc(corpus):
    with open(corpus) as fh:
        return json.loads(fh.readline())


class TestSynth:
    def test_same_seed_same_digest(self, capsys, tmp_path):
        a = ok(capsys, "synth", "--seed", 11, "--docs", 20, "--out", tmp_path / "a.jsonl")
        b = ok(capsys, "synth", "--seed", 11, "--docs", 20, "--out", tmp_path / "b.jsonl")
        assert a["sha256"] == b["sha256"] == hashlib.sha256((tmp_path / "a.jsonl").read_bytes()).hexdigest()

    def test_env_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("SNIPFORGE_SEED", "11")
        a = ok(capsys, "synth", "--docs", 20, "--out", tmp_path / "a.jsonl")
        monkeypatch.delenv("SNIPFORGE_SEED")
        b = ok(capsys, "synth", "--seed", 11, "--docs", 20, "--out", tmp_path / "b.jsonl")
        assert a["sha256"] == b["sha256"] and a["config"]["seed"] == 11

    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("SNIPFORGE_SEED", "5")
        assert resolve_seed(9) == 9
        assert resolve_seed(None) == 5

    def test_stdout_is_one_json_document(self, capsys, tmp_path):
        code, out, _ = run(capsys, "--pretty", "synth", "--docs", 5, "--out", tmp_path / "x.jsonl")
        assert code == 0
        doc = json.loads(out)
        assert doc["docs"] == 5 and "config" in doc


class TestErrors:
    def test_unknown_flag_is_usage(self, capsys):
        code, out, err = run(capsys, "synth", "--bogus")
        assert code == EXIT_USAGE and out == ""
        assert json.loads(err)["exit_code"] == EXIT_USAGE

    def test_missing_corpus(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--model", "deepqse", "--corpus", tmp_path / "none.jsonl",
                           "--out", tmp_path / "m.ckpt")
        assert code == EXIT_MISSING and json.loads(err)["type"] == "FileNotFoundError"

    def test_unknown_config_key(self, capsys, tmp_path):
        (tmp_path / "bad.json").write_text('{"train": {"learning_rate": 1}}')
        code, _, _ = run(capsys, "synth", "--config", tmp_path / "bad.json", "--out", tmp_path / "x.jsonl")
        assert code == EXIT_USAGE

    def test_eval_needs_a_scorer(self, capsys, tmp_path):
        assert run(capsys, "eval", "--corpus", tmp_path / "c.jsonl")[0] == EXIT_USAGE

    def test_stale_cache(self, capsys, artifacts, tmp_path):
        corpus = artifacts / "c.jsonl"
        cfg = json.loads((artifacts / "tiny.json").read_text())
        cfg["seed"] = 99
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert cli.main(["train", "--model", "coarse", "--corpus", str(corpus), "--config",
                         str(tmp_path / "cfg.json"), "--out", str(tmp_path / "other.ckpt")]) == 0
        capsys.readouterr()
        doc = first_doc(corpus)
        code, _, err = run(capsys, "extract", "--query", doc["query"], "--doc-id", doc["id"], "--corpus", corpus,
                           "--cache", artifacts / "cache.bin", "--coarse-ckpt", tmp_path / "other.ckpt",
                           "--fine-ckpt", artifacts / "fine.ckpt")
        assert code == EXIT_FINGERPRINT and json.loads(err)["type"] == "StaleCacheError"


class TestPipeline:
    def test_train_echoes_config(self, capsys, artifacts, tmp_path):
        doc = ok(capsys, "train", "--model", "deepqse", "--corpus", artifacts / "c.jsonl", "--config",
                 artifacts / "tiny.json", "--no-title", "--out", tmp_path / "m.ckpt")
        assert doc["config"]["model"] == "deepqse" and doc["config"]["train"]["no_title"]
        assert doc["config"]["encoder"]["d"] == 8
        assert len(doc["fingerprint"]) == 64

    def test_extract_two_stage(self, capsys, artifacts):
        doc = first_doc(artifacts / "c.jsonl")
        out = ok(capsys, "extract", "--query", doc["query"], "--doc-id", doc["id"], "--corpus",
                 artifacts / "c.jsonl", "--cache", artifacts / "cache.bin", "--coarse-ckpt",
                 artifacts / "coarse.ckpt", "--fine-ckpt", artifacts / "fine.ckpt", "--k", 2, "--n", 1)
        assert out["provenance"] == "two-stage" and len(out["snippet"]) == 1
        assert out["snippet"][0] == doc["sentences"][out["start"]]

    def test_extract_k_saturates(self, capsys, artifacts):
        doc = first_doc(artifacts / "c.jsonl")
        common = ["extract", "--query", doc["query"], "--doc-id", doc["id"], "--corpus", artifacts / "c.jsonl",
                  "--cache", artifacts / "cache.bin", "--coarse-ckpt", artifacts / "coarse.ckpt",
                  "--fine-ckpt", artifacts / "fine.ckpt"]
        a = ok(capsys, *common, "--k", len(doc["sentences"]))
        b = ok(capsys, *common, "--k", 500)
        assert a["start"] == b["start"]

    def test_extract_single(self, capsys, artifacts):
        doc = first_doc(artifacts / "c.jsonl")
        out = ok(capsys, "extract", "--single", "--deepqse-ckpt", artifacts / "dq.ckpt", "--query", doc["query"],
                 "--doc-id", doc["id"], "--corpus", artifacts / "c.jsonl")
        assert out["provenance"] == "single-stage"

    def test_unknown_doc(self, capsys, artifacts):
        code, _, _ = run(capsys, "extract", "--single", "--deepqse-ckpt", artifacts / "dq.ckpt", "--query", "q",
                         "--doc-id", "nope", "--corpus", artifacts / "c.jsonl")
        assert code == 1

    @pytest.mark.parametrize("extra", [["--baseline", "bm25"], ["--baseline", "cts"], ["--model", "dq.ckpt"],
                                       ["--model", "fine.ckpt", "--coarse-ckpt", "coarse.ckpt", "--k", "3"]])
    def test_eval_report(self, capsys, artifacts, tmp_path, extra):
        extra = [str(artifacts / e) if e.endswith(".ckpt") else e for e in extra]
        rep = ok(capsys, "eval", "--corpus", artifacts / "c.jsonl", "--report-out", tmp_path / "r.json", *extra)
        assert rep["p_at_1"] <= rep["p_at_3"] <= rep["p_at_5"]
        assert json.loads((tmp_path / "r.json").read_text()) == rep

    def test_bench(self, capsys, artifacts):
        rep = ok(capsys, "bench", "--pipeline", "efficient", "--corpus", artifacts / "c.jsonl", "--coarse-ckpt",
                 artifacts / "coarse.ckpt", "--fine-ckpt", artifacts / "fine.ckpt", "--cache", artifacts / "cache.bin",
                 "--k", 2, "--reps", 2, "--sample", 5)
        assert rep["latency"]["requests"] == 5 and rep["flops"]["online"] > 0
