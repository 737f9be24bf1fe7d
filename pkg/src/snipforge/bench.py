"""Wall-clock latency of online snippet extraction."""

from __future__ import annotations

import time

import numpy as np

MIN_WARMUP = 3


def _extract_fn(pipeline):
    if hasattr(pipeline, "extract"):
        return pipeline.extract
    if callable(pipeline):
        return pipeline
    raise TypeError("pipeline must have an extract(query, doc) method or be callable")


def _score_key(result):
    scores = getattr(result, "scores_fine", None)
    if scores is None:
        scores = getattr(result, "scores_coarse", None)
    return getattr(result, "start", None), None if scores is None else tuple(scores)


def latency_bench(pipeline, corpus_sample, repetitions: int = 10, warmup: int = MIN_WARMUP,
                  config: dict | None = None) -> dict:
    """Latency percentiles (ms per request) over ``repetitions`` passes of ``corpus_sample``.

    Each pass is timed as a whole and divided by the number of (query, doc)
    requests; p50/p95 are taken over passes. The first ``warmup`` passes are
    run but not recorded. ``deterministic`` reports whether
    every repetition returned identical starts and scores.
    """
    sample = list(corpus_sample)
    if not sample:
        raise ValueError("latency bench needs a non-empty corpus sample")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP} iterations")
    extract = _extract_fn(pipeline)
    for _ in range(warmup):
        for ex in sample:
            extract(ex.query, ex)
    times, reference, deterministic = [], None, True
    for _ in range(repetitions):
        t0 = time.perf_counter()
        results = [extract(ex.query, ex) for ex in sample]
        times.append((time.perf_counter() - t0) * 1e3 / len(sample))
        outputs = [_score_key(r) for r in results]
        if reference is None:
            reference = outputs
        elif outputs != reference:
            deterministic = False
    ms = np.asarray(times)
    report = {"p50_ms": float(np.percentile(ms, 50)), "p95_ms": float(np.percentile(ms, 95)),
              "mean_ms": float(ms.mean()), "requests": len(sample), "repetitions": repetitions,
              "warmup": warmup, "deterministic": deterministic}
    if config is not None:
        report["config"] = config
    return report
