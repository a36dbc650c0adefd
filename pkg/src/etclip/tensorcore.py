"""Dense tensors with tape-based reverse-mode differentiation and Adam.

Tensors wrap a numpy array. Operations executed while a :class:`Tape` is
active (``with Tape() as tape:``) record a node holding their inputs and a
local backward rule; :func:`backward` walks those nodes in reverse. Outside
a tape nothing is recorded, which is how inference runs.

Gradients accumulate into ``Tensor.grad`` of leaf tensors (tensors not
produced by a recorded op). A tape can be backpropagated once; a second
call raises :class:`TapeError`.
"""
from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Adam", "TensorError", "TapeError",
    "get_dtype", "precision", "backward", "zero_grads",
    "add", "sub", "mul", "scale", "neg", "matmul", "exp", "sqrt",
    "sum", "max", "logsumexp", "mean", "reshape", "transpose", "getitem", "concat", "embedding_lookup",
    "gelu", "relu", "softmax", "log_softmax", "cross_entropy", "layer_norm",
    "masked_fill", "l2_normalize", "causal_mask", "check_finite", "gradcheck",
]

_DTYPE = np.float32
_TAPES: list["Tape"] = []


class TensorError(ValueError):
    """Shape, index or contract violation raised eagerly by an op."""


class TapeError(RuntimeError):
    """Misuse of a tape (non-scalar loss, loss not recorded, reuse)."""


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors.

    Used by gradient checks, which need float64 for finite differences to be
    meaningful at h=1e-3.
    """
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    if requires and _TAPES:
        _TAPES[-1].nodes.append(_Node(tuple(inputs), result, backward_fn))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Backpropagate a scalar ``loss`` through ``tape`` into leaf gradients."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in produced:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype).reshape(t.shape)
            else:
                t.grad += gi
    tape.nodes.clear()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = _DTYPE(c) if x.data.dtype == _DTYPE else x.data.dtype.type(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (g * 0.5 / y,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _record(y.astype(xd.dtype), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


# -- linear algebra and shape ----------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record(y if keepdims else np.squeeze(y, axis), (x,), bw)


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """``log(sum(exp(x)))`` along ``axis``, a smooth upper bound on the maximum."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = m + np.log(s)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * (e / s),)

    return _record(y if keepdims else np.squeeze(y, axis), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise TensorError(f"cannot reshape {old} to {shape}") from e
    return _record(y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic or advanced numpy indexing; backward scatter-adds."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _record(np.array(x.data[key]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise TensorError(f"embedding index out of range for table of {n} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.data[ids], (table,), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask
    y = np.where(mask, x.data.dtype.type(value), x.data)
    return _record(y, (x,), lambda g: (_unbroadcast(g * keep, x.shape),))


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where key index exceeds query index."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# -- normalisation and probabilities ---------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise TensorError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(y, (x,), bw)


def cross_entropy(logits: Tensor, gold, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[gold]`` over leading dims.

    ``logits`` has shape (..., C) and ``gold`` integer shape (...). With
    ``weights`` (same shape as ``gold``) the result is
    ``sum(w * nll) / sum(w)``; rows of weight 0 contribute nothing.
    """
    gold = np.asarray(gold, dtype=np.int64)
    c = logits.shape[-1]
    if gold.shape != logits.shape[:-1]:
        raise TensorError(f"gold shape {gold.shape} does not match logits {logits.shape}")
    if gold.size and (gold.min() < 0 or gold.max() >= c):
        raise IndexError(f"gold class out of range [0, {c})")
    dt = logits.data.dtype
    w = np.ones(gold.shape, dtype=dt) if weights is None else np.asarray(weights, dtype=dt)
    total = w.sum()
    if total <= 0:
        raise TensorError("cross_entropy needs positive total weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, gold[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * nll).sum() / total, dtype=dt)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, gold[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / total)[..., None] * g,)

    return _record(loss, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = gain.shape[-1]
    if x.shape[-1] != d:
        raise TensorError(f"layer_norm last dim {x.shape[-1]} != {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _record(y.astype(xd.dtype), (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd ** 2).sum(axis=axis, keepdims=True) + eps)
    y = xd / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _record(y, (x,), bw)


# -- optimiser --------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive-moment optimiser over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        zero_grads(self.params.values())

    def grad_norm(self) -> float:
        return math.sqrt(float(np.sum([np.sum(np.square(p.grad, dtype=np.float64))
                                       for p in self.params.values()])))

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise TapeError(f"no gradient for parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        factor = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad * p.data.dtype.type(factor) if factor != 1.0 else p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int):
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state[f"v.{k}"], dtype=self.params[k].data.dtype)
        self.step_count = int(step_count)


# -- finite differences ------------------------------------------------------

@dataclass
class GradCheckResult:
    checked: int
    failures: list  # (name, index, analytic, numeric)
    worst_ratio: float

    @property
    def ok(self) -> bool:
        return not self.failures


def gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], n_coords: int = 100,
              seed: int = 0, h: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-6) -> GradCheckResult:
    """Compare tape gradients with central differences on sampled coordinates.

    A coordinate passes when ``|analytic - numeric| <= atol + rtol * |numeric|``.
    Coordinates are spread round-robin over ``params`` so every tensor is
    visited. Run under ``precision(np.float64)`` for meaningful results.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    names = list(params)
    failures, worst = [], 0.0
    for i in range(n_coords):
        name = names[i % len(names)]
        p = params[name]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        old = p.data[idx].copy()
        p.data[idx] = old + h
        up = loss_fn().item()
        p.data[idx] = old - h
        down = loss_fn().item()
        p.data[idx] = old
        numeric = (up - down) / (2 * h)
        a = float(analytic[name][idx])
        ratio = abs(a - numeric) / (atol + rtol * abs(numeric))
        worst = builtins.max(worst, ratio)
        if ratio > 1.0:
            failures.append((name, idx, a, numeric))
    for p in params.values():
        p.grad = None
    return GradCheckResult(n_coords, failures, worst)
