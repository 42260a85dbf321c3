"""Parameter containers and the basic trainable layers."""

from __future__ import annotations

import math

import numpy as np

from scenefuse import numerics as nx
from scenefuse.numerics import Tensor


class Module:
    """Base class; parameters are discovered by walking attributes."""

    training = False

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
            elif isinstance(value, dict):
                for k in sorted(value):
                    item = value[k]
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{k}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value.values() if isinstance(value, dict) else value
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple, dict)):
                for item in items:
                    if isinstance(item, Module):
                        yield from item.modules()


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    """y = x W^T + b with W shaped [out, in]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, zero: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        if zero:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gain = param(np.ones(d), dtype)
        self.bias = param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layernorm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng, dtype=np.float64):
        self.fc1 = Linear(d, d_ff, rng, dtype)
        self.fc2 = Linear(d_ff, d, rng, dtype)

    def __call__(self, x: Tensor, dropout: float = 0.0, rng=None) -> Tensor:
        h = nx.relu(self.fc1(x))
        h = nx.dropout(h, dropout, rng)
        return self.fc2(h)


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with per-head width d / heads."""

    def __init__(self, d: int, heads: int, rng, dtype=np.float64):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        h = self.heads
        x = nx.reshape(x, (B, L, h, D // h))
        x = nx.transpose(x, (0, 2, 1, 3))
        return nx.reshape(x, (B * h, L, D // h))

    def __call__(self, xq: Tensor, xkv: Tensor, key_mask=None, allow_empty: bool = False) -> Tensor:
        """xq [B, Lq, D], xkv [B, Lk, D], key_mask bool [B, Lk] -> [B, Lq, D]."""
        B, Lq, D = xq.shape
        h = self.heads
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        km = None
        if key_mask is not None:
            km = np.repeat(np.asarray(key_mask, dtype=bool), h, axis=0)
        out = nx.attention(q, k, v, km, allow_empty=allow_empty, heads=h)
        out = nx.reshape(out, (B, h, Lq, D // h))
        out = nx.transpose(out, (0, 2, 1, 3))
        out = nx.reshape(out, (B, Lq, D))
        return self.o(out)
