"""``snipforge`` command line: synth, train, index, extract, eval, bench.

Every command prints exactly one JSON document on stdout; logs go to
stderr. Failures print ``{"error": ..., "type": ..., "exit_code": ...}``
on stderr and exit nonzero (2 bad usage, 3 missing file, 4 fingerprint
mismatch, 1 anything else).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .baselines import baseline_scorer
from .bench import latency_bench
from .encoders import EncoderConfig
from .flops import flops_breakdown
from .metrics import evaluate_rankings, load_pairs, pairwise_accuracy, ranking_from_scores
from .models import forward_two_stage
from .serving import (CacheError, SingleStagePipeline, StaleCacheError, TwoStagePipeline,
                      UnknownDocumentError, build_cache)
from .text import LengthBudget, LoadStats, SynthConfig, Vocab, load_corpus, synth_corpus
from .training import TrainConfig, evaluate, train

log = logging.getLogger("snipforge")

EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_FINGERPRINT = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_seed(flag, default: int = 0) -> int:
    """``--seed`` if given, else ``SNIPFORGE_SEED``, else ``default``."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("SNIPFORGE_SEED")
    if env is None or env == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SNIPFORGE_SEED={env!r} is not an integer") from None


def _merge(base: dict, overlay: dict, where: str = "") -> dict:
    out = dict(base)
    for key, val in overlay.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path, defaults: dict) -> dict:
    if path is None:
        return defaults
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        overlay = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: invalid JSON ({e})") from e
    overlay.pop("command", None)
    return _merge(defaults, overlay)


def _require(path, what="file"):
    if path is None:
        return None
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _corpus(path, max_sentences=160):
    _require(path, "corpus")
    stats = LoadStats()
    examples = list(load_corpus(path, max_sentences, stats))
    if stats.truncated or stats.skipped:
        log.warning("corpus %s: %d truncated, %d skipped", path, stats.truncated, stats.skipped)
    return examples


def _emit(doc: dict, pretty: bool, report_out=None):
    if report_out:
        Path(report_out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if pretty:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(json.dumps(doc, sort_keys=True))


def _override(section: dict, **flags):
    for k, v in flags.items():
        if v is not None:
            section[k] = v


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> dict:
    defaults = {"seed": 0, "docs": 2000, "vocab": 200,
                "synth": {f.name: getattr(SynthConfig(), f.name) for f in fields(SynthConfig)}}
    cfg = load_config(args.config, defaults)
    cfg["seed"] = resolve_seed(args.seed, cfg["seed"])
    _override(cfg, docs=args.docs, vocab=args.vocab)
    _override(cfg["synth"], mode=args.mode)
    sc = dict(cfg["synth"])
    for key in ("query_len", "title_len", "sentence_len"):
        sc[key] = tuple(sc[key])
    examples = synth_corpus(cfg["seed"], cfg["docs"], cfg["vocab"], args.out, SynthConfig(**sc))
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    return {"command": "synth", "config": cfg, "out": str(args.out), "docs": len(examples), "sha256": digest}


def _train_defaults() -> dict:
    return {"seed": 0,
            "train": asdict(TrainConfig()),
            "encoder": EncoderConfig().to_dict(),
            "budget": asdict(LengthBudget())}


def cmd_train(args) -> dict:
    cfg = load_config(args.config, _train_defaults())
    cfg["seed"] = resolve_seed(args.seed, cfg["seed"])
    cfg["train"]["seed"] = cfg["seed"]
    _override(cfg["train"], lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, k=args.k)
    for flag in ("no_title", "no_query", "no_dare"):
        if getattr(args, flag):
            cfg["train"][flag] = True
    _override(cfg["budget"], max_sentences=args.max_sentences)
    budget = LengthBudget(**cfg["budget"])
    corpus = _corpus(args.corpus, budget.max_sentences)
    vocab = Vocab.from_examples(corpus)
    cfg["encoder"]["vocab_size"] = max(cfg["encoder"]["vocab_size"], vocab.size)
    cfg["encoder"]["rel_positions"] = max(cfg["encoder"]["rel_positions"], budget.max_sentences + 1)
    coarse = checkpoint.load(_require(args.coarse_ckpt, "coarse checkpoint")) if args.coarse_ckpt else None
    if coarse is not None:
        vocab = coarse.vocab
    tc = TrainConfig(**cfg["train"])
    result = train(args.model, corpus, tc, EncoderConfig(**cfg["encoder"]), budget, vocab, coarse=coarse,
                   out_path=args.out, history_path=args.history_out, progress=True)
    history = [{k: v for k, v in h.items() if k != "step_losses"} for h in result.history]
    cfg["model"] = args.model
    return {"command": "train", "config": cfg, "out": str(args.out), "fingerprint": result.fingerprint.hex(),
            "best_epoch": result.best_epoch, "best_p_at_1": result.best_p_at_1, "history": history}


def cmd_index(args) -> dict:
    _require(args.coarse_ckpt, "coarse checkpoint")
    model = checkpoint.load(args.coarse_ckpt)
    if model.kind != "coarse":
        raise UsageError(f"{args.coarse_ckpt} holds a {model.kind!r} model, expected 'coarse'")
    corpus = _corpus(args.corpus, model.budget.max_sentences)
    cache = build_cache(args.coarse_ckpt, corpus, args.out)
    cfg = {"coarse_ckpt": str(args.coarse_ckpt), "corpus": str(args.corpus)}
    return {"command": "index", "config": cfg, "out": str(args.out), "docs": len(cache),
            "d": cache.d, "fingerprint": cache.fingerprint.hex()}


def _find_doc(corpus, doc_id):
    for ex in corpus:
        if ex.id == doc_id:
            return ex
    raise UnknownDocumentError(doc_id)


def cmd_extract(args) -> dict:
    cfg = {"query": args.query, "doc_id": args.doc_id, "corpus": str(args.corpus), "n": args.n}
    if args.single:
        if not args.deepqse_ckpt:
            raise UsageError("--single needs --deepqse-ckpt")
        pipe = SingleStagePipeline(_require(args.deepqse_ckpt, "deepqse checkpoint"), args.n)
        cfg.update(single=True, deepqse_ckpt=str(args.deepqse_ckpt))
        max_r = pipe.model.budget.max_sentences
    else:
        if not (args.cache and args.coarse_ckpt):
            raise UsageError("two-stage extraction needs --cache and --coarse-ckpt (or --single)")
        _require(args.cache, "cache")
        _require(args.coarse_ckpt, "coarse checkpoint")
        _require(args.fine_ckpt, "fine checkpoint")
        pipe = TwoStagePipeline(args.coarse_ckpt, args.fine_ckpt, args.cache, args.k, args.n)
        cfg.update(cache=str(args.cache), coarse_ckpt=str(args.coarse_ckpt),
                   fine_ckpt=None if args.fine_ckpt is None else str(args.fine_ckpt), k=args.k)
        max_r = pipe.coarse.budget.max_sentences
    doc = _find_doc(_corpus(args.corpus, max_r), args.doc_id)
    out = pipe.extract(args.query, doc).to_json()
    out["config"] = cfg
    return out


def _eval_scorer(args):
    """``(score_fn(example) -> scores, description)``."""
    if args.baseline:
        return baseline_scorer(args.baseline), {"baseline": args.baseline}
    if not args.model:
        raise UsageError("eval needs --model CKPT or --baseline {bm25,cts}")
    model = checkpoint.load(_require(args.model, "checkpoint"))
    desc = {"model": str(args.model), "kind": model.kind}
    if args.coarse_ckpt:
        coarse = checkpoint.load(_require(args.coarse_ckpt, "coarse checkpoint"))
        desc.update(coarse_ckpt=str(args.coarse_ckpt), k=args.k)
        return ("two-stage", model, coarse), desc
    return ("single", model, None), desc


def cmd_eval(args) -> dict:
    scorer, desc = _eval_scorer(args)
    cfg = dict(desc, corpus=None if args.corpus is None else str(args.corpus),
               pairs=None if args.pairs is None else str(args.pairs))
    report = {"command": "eval", "config": cfg}
    if args.corpus is None and args.pairs is None:
        raise UsageError("eval needs --corpus and/or --pairs")
    if isinstance(scorer, tuple):
        _, model, coarse = scorer
        max_r = model.budget.max_sentences

        def score_fn(ex):
            if coarse is None:
                return model.score_document(ex)
            # sentences the coarse stage dropped rank below every candidate
            _, cand, s_f = forward_two_stage(coarse, model, ex, args.k)
            full = np.full(len(ex.sentences[:max_r]), -np.inf)
            full[cand] = s_f
            return full
    else:
        max_r, score_fn = 160, scorer
    if args.corpus is not None:
        examples = [ex for ex in _corpus(args.corpus, max_r) if ex.gold_start is not None]
        if isinstance(scorer, tuple) and coarse is None:
            rep = evaluate(model, examples)
        elif isinstance(scorer, tuple):
            rep = evaluate(model, examples, coarse=coarse, k=args.k)
        else:
            rep = evaluate_rankings([ranking_from_scores(score_fn(ex)) for ex in examples],
                                    [ex.gold_start for ex in examples])
        report.update(rep.to_dict())
    if args.pairs is not None:
        acc, used, skipped = pairwise_accuracy(score_fn, load_pairs(_require(args.pairs, "pairs file")))
        report.update(pairwise_accuracy=acc, pairs_used=used, pairs_skipped=skipped)
    return report


def cmd_bench(args) -> dict:
    cfg = {"pipeline": args.pipeline, "reps": args.reps, "warmup": args.warmup, "k": args.k, "n": args.n,
           "corpus": str(args.corpus), "sample": args.sample}
    if args.pipeline == "deepqse":
        if not args.deepqse_ckpt:
            raise UsageError("--pipeline deepqse needs --deepqse-ckpt")
        pipe = SingleStagePipeline(_require(args.deepqse_ckpt, "deepqse checkpoint"), args.n)
        model_cfg, budget = pipe.model.cfg, pipe.model.budget
        cfg["deepqse_ckpt"] = str(args.deepqse_ckpt)
    else:
        if not (args.coarse_ckpt and args.cache):
            raise UsageError(f"--pipeline {args.pipeline} needs --coarse-ckpt and --cache")
        fine = None
        if args.pipeline == "efficient":
            if not args.fine_ckpt:
                raise UsageError("--pipeline efficient needs --fine-ckpt")
            fine = _require(args.fine_ckpt, "fine checkpoint")
        pipe = TwoStagePipeline(_require(args.coarse_ckpt, "coarse checkpoint"), fine,
                                _require(args.cache, "cache"), args.k, args.n)
        model_cfg, budget = pipe.coarse.cfg, pipe.coarse.budget
        cfg.update(coarse_ckpt=str(args.coarse_ckpt), fine_ckpt=args.fine_ckpt and str(args.fine_ckpt),
                   cache=str(args.cache))
    sample = _corpus(args.corpus, budget.max_sentences)[: args.sample]
    lat = latency_bench(pipe, sample, args.reps, args.warmup)
    r = max(len(ex.sentences) for ex in sample)
    flops = flops_breakdown("deepqse" if args.pipeline == "deepqse" else args.pipeline, model_cfg, r, args.k, budget)
    return {"command": "bench", "config": cfg, "latency": lat,
            "flops": {"R": r, "online": flops["online"], "offline": flops["offline"],
                      "online_parts": flops["online_parts"]}}


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snipforge", description=__doc__.splitlines()[0])
    p.add_argument("--pretty", action="store_true", help="indent the JSON output")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--seed", type=int)
    s.add_argument("--docs", type=int)
    s.add_argument("--vocab", type=int)
    s.add_argument("--mode", choices=("basic", "context"))
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a deepqse, coarse or fine model")
    t.add_argument("--model", required=True, choices=("deepqse", "coarse", "fine"))
    t.add_argument("--corpus", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--coarse-ckpt", help="candidate source for --model fine")
    t.add_argument("--history-out")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--max-sentences", type=int)
    t.add_argument("--no-title", action="store_true")
    t.add_argument("--no-query", action="store_true")
    t.add_argument("--no-dare", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", help="build the coarse sentence cache")
    i.add_argument("--coarse-ckpt", required=True)
    i.add_argument("--corpus", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_index)

    e = sub.add_parser("extract", help="extract a snippet for one (query, document)")
    e.add_argument("--query", required=True)
    e.add_argument("--doc-id", required=True)
    e.add_argument("--corpus", required=True, help="JSONL file holding the document text")
    e.add_argument("--cache")
    e.add_argument("--coarse-ckpt")
    e.add_argument("--fine-ckpt")
    e.add_argument("--k", type=int, default=20)
    e.add_argument("--n", type=int, default=2)
    e.add_argument("--single", action="store_true")
    e.add_argument("--deepqse-ckpt")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="P@k and pairwise accuracy")
    v.add_argument("--model")
    v.add_argument("--coarse-ckpt", help="evaluate --model as the fine stage over coarse top-K")
    v.add_argument("--baseline", choices=("bm25", "cts"))
    v.add_argument("--k", type=int, default=20)
    v.add_argument("--corpus")
    v.add_argument("--pairs")
    v.add_argument("--report-out")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency and FLOPs of a serving pipeline")
    b.add_argument("--pipeline", required=True, choices=("deepqse", "efficient", "coarse"))
    b.add_argument("--corpus", required=True)
    b.add_argument("--deepqse-ckpt")
    b.add_argument("--coarse-ckpt")
    b.add_argument("--fine-ckpt")
    b.add_argument("--cache")
    b.add_argument("--k", type=int, default=20)
    b.add_argument("--n", type=int, default=2)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--sample", type=int, default=50)
    b.add_argument("--report-out")
    b.set_defaults(func=cmd_bench)
    return p


def _fail(exc: BaseException, code: int) -> int:
    doc = {"error": str(exc) if not isinstance(exc, KeyError) else f"unknown document id {exc.args[0]!r}",
           "type": type(exc).__name__, "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(e, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = args.func(args)
    except UsageError as e:
        return _fail(e, EXIT_USAGE)
    except FileNotFoundError as e:
        return _fail(e, EXIT_MISSING)
    except StaleCacheError as e:
        return _fail(e, EXIT_FINGERPRINT)
    except (CacheError, UnknownDocumentError, ValueError, RuntimeError) as e:
        return _fail(e, EXIT_ERROR)
    _emit(doc, args.pretty, getattr(args, "report_out", None))
    return 0


if __name__ == "__main__":
    sys.exit(main())
