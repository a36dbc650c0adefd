"""Small neural-network building blocks on top of :mod:`etclip.tensorcore`."""
from __future__ import annotations

import math

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def zero_grad(self):
        tc.zero_grads(self.parameters())


def param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(n_in)
        self.weight = param(rng.normal(0.0, 1.0, (n_in, n_out)) * std)
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.table = param(rng.normal(0.0, std, (n, d)))

    def __call__(self, ids) -> Tensor:
        return tc.embedding_lookup(self.table, ids)


class MLP(Module):
    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        """``x`` is (B, S, d); ``mask`` broadcasts to (B, H, S, S), True = blocked."""
        b, s, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return tc.transpose(tc.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = tc.masked_fill(scores, mask, NEG_INF)
        ctx = tc.matmul(tc.softmax(scores, axis=-1), v)
        ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return self.out(ctx)


class Block(Module):
    """Pre-norm transformer layer."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, d * mlp_ratio, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))
