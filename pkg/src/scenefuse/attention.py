"""Encoder blocks: joint self-attention, axis-factorized, and latent-query variants.

All blocks use the pre-layernorm residual arrangement::

    h   = x + MHA(LN(x))
    out = h + FFN(LN(h))

Masked query rows leave a self-attention block unchanged; masked keys get
zero attention weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from scenefuse import numerics as nx
from scenefuse.layers import FeedForward, LayerNorm, Module, MultiHeadAttention, param
from scenefuse.numerics import DegenerateRowError, Tensor

AXES = ("joint", "temporal", "spatial")


@dataclass(frozen=True)
class BlockConfig:
    hidden: int = 64
    heads: int = 4
    intermediate: int = 128
    dropout: float = 0.0
    axis: str = "joint"
    latent_out: int | None = None

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.intermediate not in (2 * self.hidden, 4 * self.hidden):
            raise ValueError(
                f"intermediate size must be 2x or 4x hidden ({self.hidden}), got {self.intermediate}")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.latent_out is not None and self.latent_out < 1:
            raise ValueError("latent_out must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def latent_count(ratio: float, length: int) -> int:
    """Number of latent queries for reduction ``ratio`` of an input of ``length``."""
    if ratio <= 0:
        raise ValueError(f"latent ratio must be positive, got {ratio}")
    return max(1, round_half_away(ratio * length))


def _require_valid_agents(mask: np.ndarray) -> None:
    flat = mask.reshape(mask.shape[0], -1)
    if not flat.any(axis=1).all():
        bad = np.flatnonzero(~flat.any(axis=1)).tolist()
        raise DegenerateRowError(f"agents {bad} have no valid token")


class SelfAttentionBlock(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.ln_attn = LayerNorm(cfg.hidden, dtype)
        self.mha = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.intermediate, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None, allow_empty: bool = False) -> Tensor:
        """x [B, L, D], mask bool [B, L] -> [B, L, D]."""
        mask = np.asarray(mask, dtype=bool)
        if not allow_empty:
            _require_valid_agents(mask)
        rate = self.cfg.dropout if self.training else 0.0
        h = self.ln_attn(x)
        a = self.mha(h, h, mask, allow_empty=allow_empty)
        h = x + nx.dropout(a, rate, rng)
        f = self.ffn(self.ln_ffn(h), rate, rng)
        out = h + nx.dropout(f, rate, rng)
        if mask.all():
            return out
        return nx.where(mask[..., None], out, x)


def _to_slices(x: Tensor, mask: np.ndarray, axis: str):
    """[A, T, S, D] -> ([A*S, T, D] or [A*T, S, D], matching mask)."""
    A, T, S, D = x.shape
    if axis == "temporal":
        xs = nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (A * S, T, D))
        ms = mask.transpose(0, 2, 1).reshape(A * S, T)
    else:
        xs = nx.reshape(x, (A * T, S, D))
        ms = mask.reshape(A * T, S)
    return xs, ms


def _from_slices(xs: Tensor, ms: np.ndarray, axis: str, A: int, T: int, S: int):
    D = xs.shape[-1]
    if axis == "temporal":
        n = xs.shape[1]
        x = nx.transpose(nx.reshape(xs, (A, S, n, D)), (0, 2, 1, 3))
        m = ms.reshape(A, S, n).transpose(0, 2, 1)
    else:
        n = xs.shape[1]
        x = nx.reshape(xs, (A, T, n, D))
        m = ms.reshape(A, T, n)
    return x, np.ascontiguousarray(m)


class FactorizedBlock(Module):
    """Self-attention restricted to one axis of an [A, T, S, D] grid.

    ``temporal`` attends along T independently for every slot s; ``spatial``
    attends along S independently for every timestep t. Slices without any
    valid token pass through unchanged.
    """

    def __init__(self, cfg: BlockConfig, axis: str, rng, dtype=np.float64):
        if axis not in ("temporal", "spatial"):
            raise ValueError(f"factorized axis must be temporal or spatial, got {axis!r}")
        self.axis = axis
        self.block = SelfAttentionBlock(cfg, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        if x.ndim != 4:
            raise nx.DimensionError(f"factorized block expects [A, T, S, D], got {x.shape}")
        mask = np.asarray(mask, dtype=bool)
        _require_valid_agents(mask)
        A, T, S, _ = x.shape
        xs, ms = _to_slices(x, mask, self.axis)
        ys = self.block(xs, ms, rng, allow_empty=True)
        y, _ = _from_slices(ys, ms, self.axis, A, T, S)
        return y, mask


class LatentQueryBlock(Module):
    """Cross-attention from a trainable query bank [L_out, D] onto the input.

    The residual runs on the query side: ``h = z + MHA(LN(z), LN(x))``.
    """

    def __init__(self, cfg: BlockConfig, n_latents: int, rng, dtype=np.float64):
        if n_latents < 1:
            raise ValueError("latent query bank needs at least one query")
        self.cfg = cfg
        self.n_latents = n_latents
        self.queries = param(rng.normal(0.0, 1.0 / math.sqrt(cfg.hidden), (n_latents, cfg.hidden)), dtype)
        self.ln_q = LayerNorm(cfg.hidden, dtype)
        self.ln_kv = LayerNorm(cfg.hidden, dtype)
        self.mha = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.intermediate, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None,
                 allow_empty: bool = False) -> tuple[Tensor, np.ndarray]:
        """x [B, L_in, D], mask [B, L_in] -> (z [B, L_out, D], mask [B, L_out])."""
        B, L_in, D = x.shape
        if L_in == 0:
            raise DegenerateRowError("latent query block received an empty input")
        mask = np.asarray(mask, dtype=bool)
        if not allow_empty:
            _require_valid_agents(mask)
        rate = self.cfg.dropout if self.training else 0.0
        z = nx.broadcast_to(self.queries, (B, self.n_latents, D))
        a = self.mha(self.ln_q(z), self.ln_kv(x), mask, allow_empty=allow_empty)
        h = z + nx.dropout(a, rate, rng)
        f = self.ffn(self.ln_ffn(h), rate, rng)
        out = h + nx.dropout(f, rate, rng)
        out_mask = np.repeat(mask.any(axis=1, keepdims=True), self.n_latents, axis=1)
        return out, out_mask


class FactorizedLatentQueryBlock(Module):
    """Latent-query reduction along one axis of an [A, T, S, D] grid."""

    def __init__(self, cfg: BlockConfig, axis: str, n_latents: int, rng, dtype=np.float64):
        if axis not in ("temporal", "spatial"):
            raise ValueError(f"factorized axis must be temporal or spatial, got {axis!r}")
        self.axis = axis
        self.block = LatentQueryBlock(cfg, n_latents, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        mask = np.asarray(mask, dtype=bool)
        _require_valid_agents(mask)
        A, T, S, _ = x.shape
        xs, ms = _to_slices(x, mask, self.axis)
        zs, zm = self.block(xs, ms, rng, allow_empty=True)
        return _from_slices(zs, zm, self.axis, A, T, S)
