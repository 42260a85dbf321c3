"""Scene encoders: late, early and hierarchical fusion under three attention regimes.

Regimes
-------
multi_axis
    joint self-attention over the flattened T*S tokens of the encoder input.
factorized_sequential
    N/2 temporal blocks followed by N/2 spatial blocks.
factorized_interleaved
    temporal and spatial blocks alternating.

With a latent ratio R the first block of every multi-axis encoder becomes a
latent-query block with ``max(1, round(R * L_in))`` queries; in factorized
regimes the first temporal and first spatial blocks become per-axis latent
blocks. Factorized encodings are mean-pooled over time before decoding.

Hierarchical fusion runs the first ``N // 2`` blocks of the block sequence
per modality and the remaining ``N - N // 2`` blocks on the concatenation.

Encoding length L_z (no latents: R = 1 in the formulas below, T*S counts)::

    multi_axis  late / hierarchical   sum_m lat(R, T_m * S_m)
    multi_axis  early                 lat(R, sum_m T_m * S_m)
    factorized  late                  sum_m S'_m
    factorized  early                 S'(sum_m S_m)
    factorized  hierarchical          S'(sum_m S''_m)

where ``S'`` applies the spatial latent count if that stack holds a spatial
block, and ``S''`` the same for the modality stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scenefuse import numerics as nx
from scenefuse.attention import (
    BlockConfig,
    FactorizedBlock,
    FactorizedLatentQueryBlock,
    LatentQueryBlock,
    SelfAttentionBlock,
    latent_count,
)
from scenefuse.layers import Module
from scenefuse.numerics import DegenerateRowError, Tensor
from scenefuse.scene import concat_modalities

FUSIONS = ("late", "early", "hierarchical")
REGIMES = ("multi_axis", "factorized_sequential", "factorized_interleaved")


@dataclass(frozen=True)
class EncoderConfig:
    fusion: str = "early"
    regime: str = "multi_axis"
    depth: int = 2
    block: BlockConfig = field(default_factory=BlockConfig)
    latent_ratio: float | None = None
    temporal_latents: int | None = None
    spatial_latents: int | None = None

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.depth < 0:
            raise ValueError("encoder depth must be >= 0")
        if self.factorized and self.depth % 2:
            raise ValueError(f"factorized regimes need an even depth, got {self.depth}")
        if self.fusion == "hierarchical" and self.depth < 2:
            raise ValueError("hierarchical fusion needs depth >= 2")
        if self.latent_ratio is not None and not 0 < self.latent_ratio <= 1:
            raise ValueError(f"latent ratio must be in (0, 1], got {self.latent_ratio}")
        for n in (self.temporal_latents, self.spatial_latents):
            if n is not None and n < 1:
                raise ValueError("latent counts must be >= 1")

    @property
    def factorized(self) -> bool:
        return self.regime != "multi_axis"

    @property
    def uses_latents(self) -> bool:
        return (self.latent_ratio is not None or self.temporal_latents is not None
                or self.spatial_latents is not None)


@dataclass
class SceneEncoding:
    z: Tensor
    mask: np.ndarray


def block_axes(depth: int, regime: str) -> list[str]:
    """Axis of each block in an encoder of the given depth."""
    if regime == "multi_axis":
        return ["joint"] * depth
    if regime == "factorized_sequential":
        half = (depth + 1) // 2
        return ["temporal"] * half + ["spatial"] * (depth - half)
    return ["temporal" if i % 2 == 0 else "spatial" for i in range(depth)]


def hierarchical_split(depth: int) -> tuple[int, int]:
    return depth // 2, depth - depth // 2


# ----------------------------------------------------------------------------
# stacks


class AxisStack(Module):
    """Joint self-attention stack over [A, L, D] with optional first latent block."""

    def __init__(self, cfg: BlockConfig, depth: int, length: int, latent_ratio, rng, dtype):
        self.blocks = []
        self.out_length = length
        for i in range(depth):
            if i == 0 and latent_ratio is not None:
                n = latent_count(latent_ratio, length)
                self.blocks.append(LatentQueryBlock(cfg, n, rng, dtype))
                self.out_length = n
            else:
                self.blocks.append(SelfAttentionBlock(cfg, rng, dtype))

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None):
        for blk in self.blocks:
            if isinstance(blk, LatentQueryBlock):
                x, mask = blk(x, mask, rng)
            else:
                x = blk(x, mask, rng)
        return x, mask


class FactorizedStack(Module):
    """Axis-factorized stack over an [A, T, S, D] grid.

    ``axes`` lists each block's axis; ``temporal_latents`` / ``spatial_latents``
    (if given) replace the first block of that axis with a latent block.
    """

    def __init__(self, cfg: BlockConfig, axes, grid: tuple[int, int], temporal_latents, spatial_latents,
                 rng, dtype):
        T, S = grid
        self.blocks = []
        seen = set()
        for axis in axes:
            first = axis not in seen
            seen.add(axis)
            n = temporal_latents if axis == "temporal" else spatial_latents
            length = T if axis == "temporal" else S
            if first and n is not None and length > 1:
                self.blocks.append(FactorizedLatentQueryBlock(cfg, axis, n, rng, dtype))
                if axis == "temporal":
                    T = n
                else:
                    S = n
            else:
                self.blocks.append(FactorizedBlock(cfg, axis, rng, dtype))
        self.out_grid = (T, S)

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None):
        for blk in self.blocks:
            x, mask = blk(x, mask, rng)
        return x, mask


def finalize_factorized(enc: Tensor, mask: np.ndarray) -> SceneEncoding:
    """Mask-aware mean over the time axis: [A, T, S, D] -> [A, S, D]."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.reshape(mask.shape[0], -1).any(axis=1).all():
        raise DegenerateRowError("agent with no valid cell in factorized encoding")
    if enc.shape[1] == 1:
        return SceneEncoding(nx.reshape(enc, (enc.shape[0],) + enc.shape[2:]), mask[:, 0].copy())
    return SceneEncoding(nx.masked_mean(enc, mask, axis=1), mask.any(axis=1))


def _flatten(grid: Tensor, mask: np.ndarray):
    A, T, S, D = grid.shape
    return nx.reshape(grid, (A, T * S, D)), np.asarray(mask, bool).reshape(A, T * S)


# ----------------------------------------------------------------------------
# scene encoder


def _latents_for(cfg: EncoderConfig, grid: tuple[int, int]):
    T, S = grid
    nt, ns = cfg.temporal_latents, cfg.spatial_latents
    if cfg.latent_ratio is not None:
        nt = latent_count(cfg.latent_ratio, T) if nt is None else nt
        ns = latent_count(cfg.latent_ratio, S) if ns is None else ns
    return nt, ns


def _common_time(shapes) -> int:
    ts = {t for t, _ in shapes.values() if t != 1}
    if len(ts) > 1:
        raise ValueError(f"modalities disagree on temporal length: {sorted(ts)}")
    return ts.pop() if ts else 1


class SceneEncoder(Module):
    """Maps projected modality grids to a :class:`SceneEncoding`.

    ``shapes`` maps modality name to (T_m, S_m) in input order.
    """

    def __init__(self, cfg: EncoderConfig, shapes: dict[str, tuple[int, int]], rng, dtype=np.float64):
        self.cfg = cfg
        self.names = tuple(shapes)
        self.shapes = dict(shapes)
        b, N = cfg.block, cfg.depth
        ratio = cfg.latent_ratio
        self.per_modality: dict[str, Module] = {}
        self.cross: Module | None = None
        if not cfg.factorized:
            if cfg.fusion == "late":
                for m in self.names:
                    T, S = shapes[m]
                    self.per_modality[m] = AxisStack(b, N, T * S, ratio, rng, dtype)
            elif cfg.fusion == "early":
                L = sum(T * S for T, S in shapes.values())
                self.cross = AxisStack(b, N, L, ratio, rng, dtype)
            else:
                n1, n2 = hierarchical_split(N)
                L = 0
                for m in self.names:
                    T, S = shapes[m]
                    st = AxisStack(b, n1, T * S, ratio, rng, dtype)
                    self.per_modality[m] = st
                    L += st.out_length
                self.cross = AxisStack(b, n2, L, None, rng, dtype)
            return
        axes = block_axes(N, cfg.regime)
        if cfg.fusion == "late":
            for m in self.names:
                nt, ns = _latents_for(cfg, shapes[m])
                self.per_modality[m] = FactorizedStack(b, axes, shapes[m], nt, ns, rng, dtype)
        elif cfg.fusion == "early":
            grid = (_common_time(shapes), sum(S for _, S in shapes.values()))
            nt, ns = _latents_for(cfg, grid)
            self.cross = FactorizedStack(b, axes, grid, nt, ns, rng, dtype)
        else:
            n1, _ = hierarchical_split(N)
            stage1, stage2 = axes[:n1], axes[n1:]
            out_t, S_total = set(), 0
            temporal_done = "temporal" in stage1
            spatial_done = "spatial" in stage1
            for m in self.names:
                nt, ns = _latents_for(cfg, shapes[m])
                st = FactorizedStack(b, stage1, shapes[m], nt, ns, rng, dtype)
                self.per_modality[m] = st
                if shapes[m][0] != 1:
                    out_t.add(st.out_grid[0])
                S_total += st.out_grid[1]
            if len(out_t) > 1:
                raise ValueError(f"modality stage produced different temporal lengths: {sorted(out_t)}")
            grid = (out_t.pop() if out_t else 1, S_total)
            nt, ns = _latents_for(cfg, grid)
            self.cross = FactorizedStack(b, stage2, grid,
                                         None if temporal_done else nt,
                                         None if spatial_done else ns, rng, dtype)

    def __call__(self, grids: dict[str, Tensor], masks: dict[str, np.ndarray], rng=None) -> SceneEncoding:
        cfg = self.cfg
        items = [(m, grids[m], np.asarray(masks[m], bool)) for m in self.names]
        if not cfg.factorized:
            if cfg.fusion == "early":
                seq = concat_modalities(items)
                z, mask = self.cross(seq.tokens, seq.mask, rng)
                return SceneEncoding(z, mask)
            zs, ms = [], []
            for m, g, mk in items:
                x, xm = _flatten(g, mk)
                z, zm = self.per_modality[m](x, xm, rng)
                zs.append(z)
                ms.append(zm)
            z = zs[0] if len(zs) == 1 else nx.concat(zs, axis=1)
            mask = np.concatenate(ms, axis=1)
            if cfg.fusion == "hierarchical":
                z, mask = self.cross(z, mask, rng)
            return SceneEncoding(z, mask)
        if cfg.fusion == "early":
            grid = concat_modalities(items, factorized=True)
            z, mask = self.cross(grid.tokens, grid.mask, rng)
            return finalize_factorized(z, mask)
        if cfg.fusion == "late":
            zs, ms = [], []
            for m, g, mk in items:
                z, zm = self.per_modality[m](g, mk, rng)
                enc = finalize_factorized(z, zm)
                zs.append(enc.z)
                ms.append(enc.mask)
            z = zs[0] if len(zs) == 1 else nx.concat(zs, axis=1)
            return SceneEncoding(z, np.concatenate(ms, axis=1))
        staged = []
        for m, g, mk in items:
            z, zm = self.per_modality[m](g, mk, rng)
            staged.append((m, z, zm))
        grid = concat_modalities(staged, factorized=True)
        z, mask = self.cross(grid.tokens, grid.mask, rng)
        return finalize_factorized(z, mask)


def encode_late(grids, masks, encoder: SceneEncoder, rng=None) -> SceneEncoding:
    if encoder.cfg.fusion != "late":
        raise ValueError("encoder is not configured for late fusion")
    return encoder(grids, masks, rng)


def encode_early(grids, masks, encoder: SceneEncoder, rng=None) -> SceneEncoding:
    if encoder.cfg.fusion != "early":
        raise ValueError("encoder is not configured for early fusion")
    return encoder(grids, masks, rng)


def encode_hierarchical(grids, masks, encoder: SceneEncoder, rng=None) -> SceneEncoding:
    if encoder.cfg.fusion != "hierarchical":
        raise ValueError("encoder is not configured for hierarchical fusion")
    return encoder(grids, masks, rng)


# ----------------------------------------------------------------------------
# closed forms


def _lat(ratio, n):
    return n if ratio is None else latent_count(ratio, n)


def _factorized_out(axes, grid, nt, ns):
    """Output grid and per-agent score count of a factorized stack, in closed form."""
    T, S = grid
    scores = 0
    seen = set()
    for axis in axes:
        first = axis not in seen
        seen.add(axis)
        if axis == "temporal":
            if first and nt is not None and T > 1:
                scores += S * nt * T
                T = nt
            else:
                scores += S * T * T
        else:
            if first and ns is not None and S > 1:
                scores += T * ns * S
                S = ns
            else:
                scores += T * S * S
    return (T, S), scores


def _axis_out(depth, length, ratio):
    scores, L = 0, length
    for i in range(depth):
        if i == 0 and ratio is not None:
            n = latent_count(ratio, L)
            scores += n * L
            L = n
        else:
            scores += L * L
    return L, scores


def _analyze(cfg: EncoderConfig, shapes) -> tuple[int, int]:
    N, ratio = cfg.depth, cfg.latent_ratio
    if not cfg.factorized:
        if cfg.fusion == "early":
            return _axis_out(N, sum(T * S for T, S in shapes.values()), ratio)
        depth = N if cfg.fusion == "late" else hierarchical_split(N)[0]
        L, scores = 0, 0
        for T, S in shapes.values():
            Lm, sm = _axis_out(depth, T * S, ratio)
            L += Lm
            scores += sm
        if cfg.fusion == "hierarchical":
            L, s2 = _axis_out(hierarchical_split(N)[1], L, None)
            scores += s2
        return L, scores
    axes = block_axes(N, cfg.regime)
    if cfg.fusion == "late":
        L, scores = 0, 0
        for grid in shapes.values():
            (_, S), sm = _factorized_out(axes, grid, *_latents_for(cfg, grid))
            L += S
            scores += sm
        return L, scores
    if cfg.fusion == "early":
        grid = (_common_time(shapes), sum(S for _, S in shapes.values()))
        (_, S), scores = _factorized_out(axes, grid, *_latents_for(cfg, grid))
        return S, scores
    n1, _ = hierarchical_split(N)
    stage1, stage2 = axes[:n1], axes[n1:]
    scores, S_total, ts = 0, 0, set()
    for grid in shapes.values():
        (T, S), sm = _factorized_out(stage1, grid, *_latents_for(cfg, grid))
        scores += sm
        S_total += S
        if grid[0] != 1:
            ts.add(T)
    grid = (ts.pop() if ts else 1, S_total)
    nt, ns = _latents_for(cfg, grid)
    (_, S), s2 = _factorized_out(stage2, grid, None if "temporal" in stage1 else nt,
                                 None if "spatial" in stage1 else ns)
    return S, scores + s2


def encoding_length(cfg: EncoderConfig, shapes: dict[str, tuple[int, int]]) -> int:
    """L_z of the scene encoding for modality shapes {name: (T_m, S_m)}."""
    return _analyze(cfg, shapes)[0]


def attention_score_count(cfg: EncoderConfig, shapes: dict[str, tuple[int, int]]) -> int:
    """Query-key score entries per agent in one encoder forward pass."""
    return _analyze(cfg, shapes)[1]


def block_parameter_count(block: BlockConfig) -> int:
    """Parameters of one self-attention block: two layernorms, MHA, FFN."""
    D, F = block.hidden, block.intermediate
    return 4 * D + 4 * (D * D + D) + (D * F + F) + (F * D + D)


def _stack_parameters(block: BlockConfig, n_blocks: int, latents) -> int:
    # a latent block adds its query bank and a second input layernorm
    D = block.hidden
    return n_blocks * block_parameter_count(block) + sum(n * D + 2 * D for n in latents)


def encoder_parameter_count(cfg: EncoderConfig, shapes: dict[str, tuple[int, int]]) -> int:
    """Closed-form parameter count of :class:`SceneEncoder`."""
    b, N, ratio = cfg.block, cfg.depth, cfg.latent_ratio
    if not cfg.factorized:
        def lat(depth, length):
            return [latent_count(ratio, length)] if ratio is not None and depth > 0 else []
        if cfg.fusion == "early":
            L = sum(T * S for T, S in shapes.values())
            return _stack_parameters(b, N, lat(N, L))
        depth = N if cfg.fusion == "late" else hierarchical_split(N)[0]
        total = sum(_stack_parameters(b, depth, lat(depth, T * S)) for T, S in shapes.values())
        if cfg.fusion == "hierarchical":
            total += _stack_parameters(b, hierarchical_split(N)[1], [])
        return total

    def fact_lat(axes, grid, nt, ns):
        out = []
        if nt is not None and "temporal" in axes and grid[0] > 1:
            out.append(nt)
        if ns is not None and "spatial" in axes and grid[1] > 1:
            out.append(ns)
        return out

    axes = block_axes(N, cfg.regime)
    if cfg.fusion == "late":
        return sum(_stack_parameters(b, N, fact_lat(axes, g, *_latents_for(cfg, g))) for g in shapes.values())
    if cfg.fusion == "early":
        grid = (_common_time(shapes), sum(S for _, S in shapes.values()))
        return _stack_parameters(b, N, fact_lat(axes, grid, *_latents_for(cfg, grid)))
    n1, n2 = hierarchical_split(N)
    stage1, stage2 = axes[:n1], axes[n1:]
    total, S_total, ts = 0, 0, set()
    for g in shapes.values():
        nt, ns = _latents_for(cfg, g)
        total += _stack_parameters(b, n1, fact_lat(stage1, g, nt, ns))
        (T, S), _ = _factorized_out(stage1, g, *(x if a in stage1 else None
                                                 for x, a in ((nt, "temporal"), (ns, "spatial"))))
        S_total += S
        if g[0] != 1:
            ts.add(T)
    grid = (ts.pop() if ts else 1, S_total)
    nt, ns = _latents_for(cfg, grid)
    return total + _stack_parameters(b, n2, fact_lat(stage2, grid, None if "temporal" in stage1 else nt,
                                                     None if "spatial" in stage1 else ns))


def fusion_parameter_gap(cfg: EncoderConfig, n_modalities: int) -> int:
    """Late minus early encoder parameters at equal (N, D, F), without latents."""
    return (n_modalities - 1) * cfg.depth * block_parameter_count(cfg.block)
