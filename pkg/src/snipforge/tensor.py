"""Dense f64 tensors with reverse-mode differentiation and FLOP metering.

Every op accepts arrays with arbitrary leading batch dimensions; the
trailing one or two axes carry the row/column semantics (``matmul`` treats
the last two axes as the matrix, ``softmax_rows`` normalizes the last axis).

FLOP counting convention (used by :class:`FlopsMeter` and mirrored by the
analytic model in :mod:`snipforge.flops`):

* matmul ``[m x k] @ [k x n]``: ``2*m*n*k`` (one multiply-accumulate = 2)
* add / sub / mul / scale: 1 per output element
* softmax: ``SOFTMAX_FLOPS`` per input element (max-subtract, exp, sum, divide)
* layer norm: ``LAYERNORM_FLOPS`` per element
* GELU: ``GELU_FLOPS`` per element
* lookups, gathers, reshapes, concatenation: 0
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

SOFTMAX_FLOPS = 4
LAYERNORM_FLOPS = 7
GELU_FLOPS = 8
LN_EPS = 1e-5

_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _meters() -> list:
    meters = getattr(_state, "meters", None)
    if meters is None:
        meters = _state.meters = []
    return meters


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class FlopsMeter:
    """Counts FLOPs of every op executed inside a ``with`` block.

    Meters nest; an op is charged to every active meter of the thread.
    """

    def __init__(self):
        self.total_flops = 0
        self.per_op: dict[str, int] = defaultdict(int)

    def add(self, op: str, n: int) -> None:
        self.total_flops += int(n)
        self.per_op[op] += int(n)

    def __enter__(self):
        _meters().append(self)
        return self

    def __exit__(self, *exc):
        _meters().remove(self)
        return False


def _charge(op: str, n) -> None:
    meters = getattr(_state, "meters", None)
    if meters:
        for m in meters:
            m.add(op, n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return select(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _charge("add", out.size)
    sa, sb = a.shape, b.shape
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _charge("sub", out.size)
    sa, sb = a.shape, b.shape
    return _result(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _charge("mul", out.size)
    ad, bd = a.data, b.data
    return _result(
        out, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    _charge("scale", out.size)
    return _result(out, "scale", (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)
    _charge("gelu", GELU_FLOPS * out.size)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner),)

    return _result(out, "gelu", (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _charge("matmul", 2 * m * n * k * (out.size // (m * n)))
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _result(out, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(a.data, -1, -2), "transpose", (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), "permute", (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tensors, backward)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically (along the second-to-last axis)."""
    return concat(tensors, axis=-2)


def select(a: Tensor, key) -> Tensor:
    out = a.data[key]
    src_shape = a.shape

    def backward(g):
        full = np.zeros(src_shape)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), "select", (a,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[...] = x[index[...]]`` along axis 0; index -1 yields a zero row."""
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = x.data[safe]
    vshape = valid.shape + (1,) * (x.ndim - 1)
    out = out * valid.reshape(vshape)
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape)
        np.add.at(full, safe[valid], g[valid])
        return (full,)

    return _result(out, "gather", (x,), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]
    src_shape = table.shape

    def backward(g):
        full = np.zeros(src_shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src_shape[-1]))
        return (full,)

    return _result(out, "embedding", (table,), backward)


# ---------------------------------------------------------------------------
# reductions and normalizers


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(np.array(a.data.mean()), "mean", (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Numerically stable softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded positions
    exactly. A row with no kept position raises :class:`DegenerateInputError`.
    """
    xd = x.data
    _charge("softmax", SOFTMAX_FLOPS * xd.size)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateInputError("softmax row with every position masked")
        z = np.where(mask, xd, -np.inf)
    else:
        z = xd
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    _charge("layer_norm", LAYERNORM_FLOPS * out.size)
    gd = gain.data
    n = xd.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain.reshape(gain.shape), gbias.reshape(bias.shape)

    return _result(out, "layer_norm", (x, gain, bias), backward)


def cross_entropy_from_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]`` with optional mask."""
    ld = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if ld.ndim == 1:
        ld = ld[None, :]
        targets = targets.reshape(1)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None, :]
    rows = np.arange(ld.shape[0])
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), ld.shape)
        if not mask[rows, targets].all():
            raise DegenerateInputError("gold position is masked")
        z = np.where(mask, ld, -np.inf)
    else:
        z = ld
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    logp_t = (z - zmax - np.log(denom))[rows, targets]
    loss = np.array(-logp_t.mean())
    p = e / denom
    shape = logits.shape
    b = ld.shape[0]

    def backward(g):
        gl = p.copy()
        gl[rows, targets] -= 1.0
        return ((gl * (g / b)).reshape(shape),)

    return _result(loss, "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# optimization and checking


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is not None:
                adam_step(p, self.m[i], self.v[i], self.t, self.lr, self.b1, self.b2, self.eps)


def adam_step(p: Tensor, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update of ``p`` using its ``grad``; ``m``/``v`` updated in place."""
    g = p.grad
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("objective is not finite")
    out.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                a = analytic.reshape(-1)[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, rel)
    return worst
