"""Transformer building blocks and the three encoder stacks.

All encoders work on batches: token ids ``[B, n]`` with a boolean mask
``[B, n]`` (True = real token). Blocks are pre-LN. A block may receive a
key/value prefix (the Cross Transformer case): keys and values computed
once by the query encoder are prepended to the block's own projections,
so sentence tokens attend over ``query ++ sentence`` while the query side
emits no rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    heads: int = 4
    layers: int = 2
    ff: int = 64
    max_positions: int = 128
    vocab_size: int = 204
    dropout: float = 0.1
    rel_layers: int = 2
    rel_positions: int = 161
    segments: int = 3
    init_std: float = 0.05

    def __post_init__(self):
        for name in ("d", "heads", "layers", "ff", "max_positions", "vocab_size", "rel_positions", "segments"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rel_layers < 0:
            raise ValueError("rel_layers must be >= 0")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Parameter container; submodules and parameters are found by attribute walk."""

    training = False
    rng: np.random.Generator | None = None

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True, rng: np.random.Generator | None = None) -> "Module":
        for m in self.modules():
            m.training = mode
            m.rng = rng if mode else None
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _dropout(self, x: Tensor, p: float) -> Tensor:
        return T.dropout(x, p, self.rng) if self.training else x


def _normal(rng, shape, std):
    return T.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, std: float):
        self.weight = _normal(rng, (n_in, n_out), std)
        self.bias = T.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class ScoreHead(Module):
    """Two-layer MLP ``d -> d -> 1`` with GELU."""

    def __init__(self, rng, d: int, std: float):
        self.hidden = Linear(rng, d, d, std)
        self.out = Linear(rng, d, 1, std)

    def __call__(self, x: Tensor) -> Tensor:
        s = self.out(T.gelu(self.hidden(x)))
        return T.reshape(s, s.shape[:-1])


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return T.permute(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dh))


class Block(Module):
    """Pre-LN transformer block; ``forward`` accepts an optional key/value prefix."""

    def __init__(self, rng, cfg: EncoderConfig):
        d, std = cfg.d, cfg.init_std
        self.heads = cfg.heads
        self.p_drop = cfg.dropout
        self.ln1 = LayerNorm(d)
        self.wq = Linear(rng, d, d, std)
        self.wk = Linear(rng, d, d, std)
        self.wv = Linear(rng, d, d, std)
        self.wo = Linear(rng, d, d, std)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, cfg.ff, std)
        self.ff2 = Linear(rng, cfg.ff, d, std)
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor, mask: np.ndarray, prefix: tuple | None = None):
        """Return ``(out, K, V)`` where ``K``/``V`` are this block's own ``[B, n, d]`` projections.

        ``prefix = (K_q, V_q, mask_q)`` with ``K_q``/``V_q`` of shape
        ``[B, q_len, d]`` is concatenated in front of the block's keys and
        values.
        """
        b, n, d = x.shape
        if n == 0:
            raise EncoderError("block input has no positions")
        h = self.ln1(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        keys, values, key_mask = k, v, mask
        if prefix is not None:
            kq, vq, mq = prefix
            if kq.shape[-1] != d or vq.shape != kq.shape or kq.shape[0] != b:
                raise EncoderError(f"prefix K/V shapes {kq.shape}/{vq.shape} incompatible with input {x.shape}")
            if kq.shape[1]:
                keys = T.concat([kq, k], axis=1)
                values = T.concat([vq, v], axis=1)
                key_mask = np.concatenate([mq, mask], axis=1)
        qh = _split_heads(q, self.heads)
        kh = _split_heads(keys, self.heads)
        vh = _split_heads(values, self.heads)
        logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(d // self.heads))
        attn = T.softmax_rows(logits, key_mask[:, None, None, :])
        attn = T.mul(attn, mask[:, None, :, None].astype(np.float64))
        self.last_attention = attn.data
        ctx = self._dropout(self.wo(_merge_heads(T.matmul(attn, vh))), self.p_drop)
        x = T.add(x, ctx)
        f = self.ff2(T.gelu(self.ff1(self.ln2(x))))
        x = T.add(x, self._dropout(f, self.p_drop))
        return x, k, v

    def __call__(self, x, mask, prefix=None):
        return self.forward(x, mask, prefix)[0]


def _as_batch(H: Tensor, mask):
    if H.ndim == 2:
        H = T.reshape(H, (1,) + H.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    if mask is None:
        mask = np.ones(H.shape[:2], dtype=bool)
    return H, np.asarray(mask, dtype=bool)


def transformer_block(block: Block, H: Tensor, mask=None) -> Tensor:
    """Standard self-attention block on ``[n, d]`` or ``[B, n, d]`` input."""
    squeeze = H.ndim == 2
    Hb, m = _as_batch(H, mask)
    out = block(Hb, m)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def cross_transformer_block(block: Block, H_s: Tensor, K_q: Tensor, V_q: Tensor,
                            mask_s=None, mask_q=None) -> Tensor:
    """Cross Transformer block: sentence rows attend over ``K_q ++ W_K H_s``."""
    squeeze = H_s.ndim == 2
    Hb, ms = _as_batch(H_s, mask_s)
    if K_q.ndim == 2:
        K_q, V_q = T.reshape(K_q, (1,) + K_q.shape), T.reshape(V_q, (1,) + V_q.shape)
    if K_q.shape != V_q.shape:
        raise EncoderError(f"K_q {K_q.shape} and V_q {V_q.shape} differ")
    if K_q.shape[-1] != Hb.shape[-1]:
        raise EncoderError(f"query K/V width {K_q.shape[-1]} != sentence width {Hb.shape[-1]}")
    mq = np.ones(K_q.shape[:2], dtype=bool) if mask_q is None else np.asarray(mask_q, dtype=bool).reshape(K_q.shape[:2])
    out = block(Hb, ms, (K_q, V_q, mq))
    return T.reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class QueryKV:
    """Per-layer keys/values of the query encoder plus its CLS representation."""

    keys: list
    values: list
    rep: Tensor
    mask: np.ndarray

    @property
    def layers(self) -> int:
        return len(self.keys)

    def take(self, rows: np.ndarray) -> "QueryKV":
        """Repeat per-query entries for each sentence (``rows[i]`` = query index of sentence i)."""
        return QueryKV([T.gather_rows(k, rows) for k in self.keys],
                       [T.gather_rows(v, rows) for v in self.values],
                       T.gather_rows(self.rep, rows), self.mask[rows])

    @classmethod
    def empty(cls, batch: int, layers: int, d: int) -> "QueryKV":
        z = Tensor(np.zeros((batch, 0, d)))
        return cls([z] * layers, [z] * layers, Tensor(np.zeros((batch, d))), np.zeros((batch, 0), dtype=bool))


class TokenEncoder(Module):
    """Embedding layer (token + position + segment) followed by ``L`` blocks and a final LN."""

    def __init__(self, rng, cfg: EncoderConfig):
        std = cfg.init_std
        self.cfg = cfg
        self.tok = _normal(rng, (cfg.vocab_size, cfg.d), std)
        self.pos = _normal(rng, (cfg.max_positions, cfg.d), std)
        self.seg = _normal(rng, (cfg.segments, cfg.d), std)
        self.blocks = [Block(rng, cfg) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.d)

    def embed(self, ids: np.ndarray, segments: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise EncoderError(f"expected non-empty [B, n] token ids, got shape {ids.shape}")
        n = ids.shape[1]
        if n > self.cfg.max_positions:
            raise EncoderError(f"sequence of {n} tokens exceeds max_positions={self.cfg.max_positions}")
        x = T.add(T.embedding_lookup(self.tok, ids), T.embedding_lookup(self.pos, np.arange(n)))
        x = T.add(x, T.embedding_lookup(self.seg, segments))
        return self._dropout(x, self.cfg.dropout)

    def forward(self, ids, mask, segments, query_kv: QueryKV | None = None, capture: bool = False):
        """Encode a batch; returns ``(cls_rep [B, d], QueryKV or None)``.

        With ``query_kv`` every block runs as a Cross Transformer block.
        With ``capture`` the per-layer K/V projections are collected.
        """
        mask = np.asarray(mask, dtype=bool)
        if query_kv is not None and query_kv.layers != len(self.blocks):
            raise EncoderError(f"query K/V has {query_kv.layers} layers, encoder has {len(self.blocks)}")
        x = self.embed(ids, segments)
        keys, values = [], []
        for i, blk in enumerate(self.blocks):
            prefix = None
            if query_kv is not None:
                prefix = (query_kv.keys[i], query_kv.values[i], query_kv.mask)
            x, k, v = blk.forward(x, mask, prefix)
            if capture:
                keys.append(k)
                values.append(v)
        x = self.ln_f(x)
        cls = T.select(x, (slice(None), 0))
        kv = QueryKV(keys, values, cls, mask) if capture else None
        return cls, kv


class RelevanceEncoder(Module):
    """Scores sentences in document context: ``[q; s_1..s_m] + pos -> blocks -> MLP``.

    With ``use_dare=False`` the blocks and position embeddings are skipped
    and the score head sees each sentence vector on its own.
    """

    def __init__(self, rng, cfg: EncoderConfig, use_dare: bool = True):
        self.cfg = cfg
        self.use_dare = use_dare
        if use_dare:
            self.pos = _normal(rng, (cfg.rel_positions, cfg.d), cfg.init_std)
            self.blocks = [Block(rng, cfg) for _ in range(cfg.rel_layers)]
            self.ln_f = LayerNorm(cfg.d)
        self.head = ScoreHead(rng, cfg.d, cfg.init_std)

    def forward(self, query_rep: Tensor, sent_reps: Tensor, sent_mask: np.ndarray,
                positions: np.ndarray) -> Tensor:
        """``query_rep [B, d]``, ``sent_reps [B, m, d]``, mask/positions ``[B, m]`` -> scores ``[B, m]``.

        ``positions`` are 0-based sentence indices in the original document;
        they occupy position ids ``1..``, the query takes id 0.
        """
        sent_mask = np.asarray(sent_mask, dtype=bool)
        b, m = sent_mask.shape
        if m == 0 or not sent_mask.any(axis=1).all():
            raise EncoderError("every document needs at least one valid sentence")
        if not self.use_dare:
            return self.head(sent_reps)
        pos_ids = np.concatenate([np.zeros((b, 1), dtype=np.int64), np.asarray(positions) + 1], axis=1)
        pos_ids = np.where(np.concatenate([np.ones((b, 1), bool), sent_mask], axis=1), pos_ids, 0)
        if pos_ids.max() >= self.cfg.rel_positions:
            raise EncoderError(f"sentence position {pos_ids.max() - 1} exceeds rel_positions")
        x = T.concat([T.reshape(query_rep, (b, 1, self.cfg.d)), sent_reps], axis=1)
        x = self._dropout(T.add(x, T.embedding_lookup(self.pos, pos_ids)), self.cfg.dropout)
        full_mask = np.concatenate([np.ones((b, 1), dtype=bool), sent_mask], axis=1)
        for blk in self.blocks:
            x = blk(x, full_mask)
        x = self.ln_f(x)
        return self.head(T.select(x, (slice(None), slice(1, None))))


# ---------------------------------------------------------------------------
# functional entry points over single documents


def encode_query(encoder: TokenEncoder, field) -> QueryKV:
    """Run the query encoder on one encoded (query, title) field and capture per-layer K/V."""
    if len(field) == 0:
        raise EncoderError("empty query field")
    _, kv = encoder.forward(field.ids[None], field.mask[None], field.segments[None], capture=True)
    return kv


def encode_sentence_cross(encoder: TokenEncoder, field, query_kv: QueryKV) -> Tensor:
    """Cross Transformer sentence representation ``[d]`` for one sentence field."""
    cls, _ = encoder.forward(field.ids[None], field.mask[None], field.segments[None], query_kv=query_kv)
    return T.reshape(cls, (cls.shape[-1],))


def encode_sentence_joint(encoder: TokenEncoder, field) -> Tensor:
    """CLS representation ``[d]`` of a (title, query, sentence) concatenation."""
    if len(field) == 0:
        raise EncoderError("empty field")
    cls, _ = encoder.forward(field.ids[None], field.mask[None], field.segments[None])
    return T.reshape(cls, (cls.shape[-1],))


def encode_sentence_plain(encoder: TokenEncoder, field) -> Tensor:
    """Query-independent CLS representation ``[d]`` of a (title, sentence) field."""
    return encode_sentence_joint(encoder, field)


def relevance_encode(rel: RelevanceEncoder, query_rep: Tensor, sent_reps: Tensor,
                     mask=None, positions=None) -> Tensor:
    """Scores ``[m]`` for one document: ``query_rep [d]``, ``sent_reps [m, d]``."""
    m, d = sent_reps.shape
    if m < 1:
        raise EncoderError("relevance_encode needs at least one sentence")
    mask = np.ones(m, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    positions = np.arange(m) if positions is None else np.asarray(positions)
    s = rel.forward(T.reshape(query_rep, (1, d)), T.reshape(sent_reps, (1, m, d)), mask[None], positions[None])
    return T.reshape(s, (m,))
