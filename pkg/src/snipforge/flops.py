"""Closed-form FLOP counts for online serving.

The formulas follow the op-by-op charging rules of :mod:`snipforge.tensor`
exactly, so for a concrete configuration they equal what a
:class:`~snipforge.tensor.FlopsMeter` records around the serving path.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoders import EncoderConfig
from .tensor import GELU_FLOPS, LAYERNORM_FLOPS, SOFTMAX_FLOPS
from .text import LengthBudget

PIPELINES = ("deepqse", "efficient", "coarse", "fine", "no_coarse", "no_fine", "no_cross")


@dataclass(frozen=True)
class SeqLengths:
    """Token counts per encoder input, including CLS/SEP."""

    query: int     # [CLS] query [SEP] title [SEP]
    joint: int     # [CLS] title [SEP] query [SEP] sentence [SEP]
    plain: int     # [CLS] title [SEP] sentence [SEP]
    cross: int     # [CLS] sentence [SEP]

    @classmethod
    def from_budget(cls, b: LengthBudget) -> "SeqLengths":
        q, t, s = b.max_query, b.max_title, b.max_sentence
        return cls(q + t + 3, t + q + s + 4, t + s + 3, s + 2)


def linear_flops(rows: int, n_in: int, n_out: int) -> int:
    return 2 * rows * n_in * n_out + rows * n_out


def block_flops(cfg: EncoderConfig, batch: int, n: int, keys: int | None = None) -> int:
    """One pre-LN block over ``batch`` sequences of ``n`` rows attending over ``keys`` positions."""
    d, h, ff = cfg.d, cfg.heads, cfg.ff
    m = n if keys is None else keys
    rows = batch * n
    total = LAYERNORM_FLOPS * rows * d                    # ln1
    total += 3 * linear_flops(rows, d, d)                 # q, k, v projections
    attn = batch * h * n * m
    total += 2 * batch * n * m * d                       # q @ k^T
    total += attn                                         # 1/sqrt(dh)
    total += SOFTMAX_FLOPS * attn
    total += attn                                         # query-row mask
    total += 2 * batch * n * m * d                        # attn @ v
    total += linear_flops(rows, d, d)                     # output projection
    total += rows * d                                     # residual
    total += LAYERNORM_FLOPS * rows * d                   # ln2
    total += linear_flops(rows, d, ff) + GELU_FLOPS * rows * ff + linear_flops(rows, ff, d)
    total += rows * d                                     # residual
    return total


def encoder_flops(cfg: EncoderConfig, batch: int, n: int, prefix: int = 0) -> int:
    """Token encoder: embeddings, ``L`` blocks (keys widened by ``prefix``), final LN."""
    if batch == 0:
        return 0
    rows = batch * n
    total = 2 * rows * cfg.d                              # token + position + segment sums
    total += cfg.layers * block_flops(cfg, batch, n, n + prefix)
    total += LAYERNORM_FLOPS * rows * cfg.d
    return total


def head_flops(cfg: EncoderConfig, m: int) -> int:
    d = cfg.d
    return linear_flops(m, d, d) + GELU_FLOPS * m * d + linear_flops(m, d, 1)


def relevance_flops(cfg: EncoderConfig, m: int, use_dare: bool = True) -> int:
    if m == 0:
        return 0
    if not use_dare:
        return head_flops(cfg, m)
    seq = m + 1
    total = seq * cfg.d                                   # position embeddings
    total += cfg.rel_layers * block_flops(cfg, 1, seq)
    total += LAYERNORM_FLOPS * seq * cfg.d
    return total + head_flops(cfg, m)


def flops_breakdown(kind: str, cfg: EncoderConfig, R: int, K: int,
                    lengths: SeqLengths | LengthBudget | None = None) -> dict:
    """Online and offline FLOPs of one (query, document) request, by component."""
    if kind not in PIPELINES:
        raise ValueError(f"unknown pipeline {kind!r}; expected one of {PIPELINES}")
    if R < 1 or K < 0:
        raise ValueError("need R >= 1 and K >= 0")
    if lengths is None:
        lengths = SeqLengths.from_budget(LengthBudget())
    elif isinstance(lengths, LengthBudget):
        lengths = SeqLengths.from_budget(lengths)
    k = min(K, R)
    parts: dict = {}
    offline: dict = {}

    def coarse():
        parts["coarse_query_encoder"] = encoder_flops(cfg, 1, lengths.query)
        parts["coarse_relevance"] = relevance_flops(cfg, R)
        offline["coarse_sentence_encoder"] = encoder_flops(cfg, R, lengths.plain)

    def fine(m):
        if m == 0:
            return
        parts["fine_query_encoder"] = encoder_flops(cfg, 1, lengths.query)
        parts["fine_sentence_encoder"] = encoder_flops(cfg, m, lengths.cross, prefix=lengths.query)
        parts["fine_relevance"] = relevance_flops(cfg, m)

    def joint(m, prefix="deepqse"):
        parts[f"{prefix}_query_encoder"] = encoder_flops(cfg, 1, lengths.query)
        parts[f"{prefix}_sentence_encoder"] = encoder_flops(cfg, m, lengths.joint)
        parts[f"{prefix}_relevance"] = relevance_flops(cfg, m)

    if kind == "deepqse":
        joint(R)
    elif kind == "coarse" or kind == "no_fine":
        coarse()
    elif kind == "fine" or kind == "no_coarse":
        fine(R)
    elif kind == "efficient":
        coarse()
        fine(k)
    elif kind == "no_cross":
        coarse()
        if k:
            joint(k, prefix="fine_joint")
    return {"online": sum(parts.values()), "offline": sum(offline.values()),
            "online_parts": parts, "offline_parts": offline}


def flops_estimate(kind: str, cfg: EncoderConfig, R: int, K: int,
                   lengths: SeqLengths | LengthBudget | None = None) -> int:
    """Online-serving FLOPs for a pipeline; cached offline work is excluded."""
    return flops_breakdown(kind, cfg, R, K, lengths)["online"]


def bert_base_config(budget: LengthBudget | None = None, rel_layers: int = 2) -> EncoderConfig:
    """BERT-base proportions (d=768, 12 heads, 12 layers, ff=3072)."""
    budget = budget or LengthBudget()
    return EncoderConfig(d=768, heads=12, layers=12, ff=3072, max_positions=512, vocab_size=30522,
                         dropout=0.0, rel_layers=rel_layers, rel_positions=budget.max_sentences + 1)
