"""Cross-attention trajectory decoder producing a per-agent Gaussian mixture.

Each of the k learned mode queries self-attends to the others, cross-attends
to the scene encoding and passes through a feed-forward layer. Two affine
heads read out a logit and a [T_f, 4] series (mu_x, mu_y, log sigma_x,
log sigma_y) per mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from scenefuse import numerics as nx
from scenefuse.attention import BlockConfig
from scenefuse.layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from scenefuse.numerics import DegenerateRowError, Tensor

LOGSTD_MIN = -5.0
LOGSTD_MAX = 5.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DecoderConfig:
    modes: int = 6
    depth: int = 1
    horizon: int = 8
    block: BlockConfig | None = None  # None: same width as the encoder
    trajectory_scale: float = 1.0     # multiplies the mean head output

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError("decoder needs at least one mode")
        if self.depth < 1:
            raise ValueError("decoder depth must be >= 1")
        if self.horizon < 1:
            raise ValueError("prediction horizon must be >= 1")
        if not self.trajectory_scale > 0:
            raise ValueError("trajectory scale must be positive")


@dataclass
class MixtureTrajectory:
    logits: Tensor   # [A, k]
    means: Tensor    # [A, k, T_f, 2]
    logstd: Tensor   # [A, k, T_f, 2]

    @property
    def num_modes(self) -> int:
        return self.logits.shape[-1]

    def probabilities(self) -> np.ndarray:
        z = self.logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class ModeQueryBank(Module):
    def __init__(self, k: int, d: int, rng, dtype=np.float64):
        if k < 1:
            raise ValueError("query bank needs k >= 1")
        self.queries = param(rng.normal(0.0, 1.0 / math.sqrt(d), (k, d)), dtype)

    @property
    def k(self) -> int:
        return self.queries.shape[0]


class DecoderBlock(Module):
    def __init__(self, cfg: BlockConfig, rng, dtype=np.float64):
        self.ln_self = LayerNorm(cfg.hidden, dtype)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln_q = LayerNorm(cfg.hidden, dtype)
        self.ln_kv = LayerNorm(cfg.hidden, dtype)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.intermediate, rng, dtype)

    def __call__(self, q: Tensor, z: Tensor, z_mask: np.ndarray) -> Tensor:
        h = self.ln_self(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.ln_q(q), self.ln_kv(z), z_mask)
        return q + self.ffn(self.ln_ffn(q))


class TrajectoryDecoder(Module):
    def __init__(self, cfg: DecoderConfig, encoder_width: int, rng, dtype=np.float64,
                 zero_heads: bool = False):
        block = cfg.block or BlockConfig(hidden=encoder_width, heads=_heads_for(encoder_width),
                                         intermediate=2 * encoder_width)
        self.cfg = cfg
        self.width = block.hidden
        self.bank = ModeQueryBank(cfg.modes, block.hidden, rng, dtype)
        self.adapter = Linear(encoder_width, block.hidden, rng, dtype) if block.hidden != encoder_width else None
        self.blocks = [DecoderBlock(block, rng, dtype) for _ in range(cfg.depth)]
        self.ln_out = LayerNorm(block.hidden, dtype)
        self.logit_head = Linear(block.hidden, 1, rng, dtype, zero=zero_heads)
        self.traj_head = Linear(block.hidden, 4 * cfg.horizon, rng, dtype, zero=zero_heads)

    def __call__(self, z: Tensor, z_mask: np.ndarray, queries: Tensor | None = None) -> MixtureTrajectory:
        """z [A, L, D_enc], mask [A, L] -> mixture over k modes."""
        z_mask = np.asarray(z_mask, dtype=bool)
        if z.shape[1] == 0 or not z_mask.any(axis=1).all():
            raise DegenerateRowError("decoder received an empty scene encoding")
        if self.adapter is not None:
            z = self.adapter(z)
        A = z.shape[0]
        bank = self.bank.queries if queries is None else queries
        k, D = bank.shape
        q = nx.broadcast_to(bank, (A, k, D))
        with nx.attention_tag("decoder"):
            for blk in self.blocks:
                q = blk(q, z, z_mask)
        h = self.ln_out(q)
        logits = nx.reshape(self.logit_head(h), (A, k))
        series = nx.reshape(self.traj_head(h), (A, k, self.cfg.horizon, 4))
        means = series[..., 0:2]
        if self.cfg.trajectory_scale != 1.0:
            means = nx.mul(means, self.cfg.trajectory_scale)
        logstd = nx.clip(series[..., 2:4], LOGSTD_MIN, LOGSTD_MAX)
        return MixtureTrajectory(logits, means, logstd)


def _heads_for(d: int) -> int:
    for h in (4, 2, 1):
        if d % h == 0:
            return h
    return 1


def decode(z, z_mask, decoder: TrajectoryDecoder) -> MixtureTrajectory:
    return decoder(z, z_mask)


def gaussian_log_prob(means: Tensor, logstd: Tensor, gt) -> Tensor:
    """Sum over timesteps and axes of diagonal Gaussian log densities.

    means/logstd [..., T_f, 2], gt broadcastable -> [...].
    """
    gt = np.asarray(gt, dtype=means.dtype)
    r = nx.mul(nx.sub(gt, means), nx.exp(nx.mul(logstd, -1.0)))
    per = nx.add(nx.mul(nx.square(r), -0.5), nx.mul(logstd, -1.0))
    T = means.shape[-2]
    return nx.add(nx.sum_(per, axis=(-2, -1)), -T * LOG_2PI)


def mixture_log_prob(mix: MixtureTrajectory, gt, mode=None) -> Tensor:
    """Log density of ``gt`` [A, T_f, 2] under one mode per agent.

    ``mode`` is an int array [A]; omitted, every mode is scored -> [A, k].
    """
    gt = np.asarray(gt)
    if gt.shape != mix.means.shape[:1] + mix.means.shape[2:]:
        raise nx.DimensionError(f"ground truth {gt.shape} does not match means {mix.means.shape}")
    if mode is None:
        return gaussian_log_prob(mix.means, mix.logstd, gt[:, None])
    rows = np.arange(gt.shape[0])
    idx = (rows, np.asarray(mode))
    return gaussian_log_prob(nx.getitem(mix.means, idx), nx.getitem(mix.logstd, idx), gt)
