"""Reduce many trajectory modes to a few: greedy cover, weighted refinement, ensemble merge.

Distances between modes are final-timestep (endpoint) Euclidean distances,
both for coverage during initialisation and for reassignment while refining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scenefuse import _backend


@dataclass(frozen=True)
class AggregationConfig:
    threshold: float = 2.3
    iterations: int = 3
    modes_out: int = 6

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("distance threshold must be positive")
        if self.iterations < 0:
            raise ValueError("iteration count must be >= 0")
        if self.modes_out < 1:
            raise ValueError("need at least one output mode")


@dataclass
class Modes:
    """Plain-array mixture: probs [A, k], means / logstd [A, k, T, 2]."""

    probs: np.ndarray
    means: np.ndarray
    logstd: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.logstd = np.asarray(self.logstd, dtype=np.float64)
        if self.means.shape != self.logstd.shape or self.means.shape[:2] != self.probs.shape:
            raise ValueError(f"inconsistent mode shapes {self.probs.shape}, {self.means.shape}, {self.logstd.shape}")

    @classmethod
    def from_mixture(cls, mix) -> "Modes":
        return cls(mix.probabilities(), mix.means.data, mix.logstd.data)

    @property
    def num_modes(self) -> int:
        return self.probs.shape[1]

    def agent(self, a: int) -> "Modes":
        return Modes(self.probs[a:a + 1], self.means[a:a + 1], self.logstd[a:a + 1])


def merge_ensemble(members) -> Modes:
    """Concatenate the modes of N predictors and divide every probability by N."""
    members = [m if isinstance(m, Modes) else Modes.from_mixture(m) for m in members]
    if not members:
        raise ValueError("no ensemble members to merge")
    shape = members[0].means.shape
    for m in members[1:]:
        if m.means.shape[0] != shape[0] or m.means.shape[2:] != shape[2:]:
            raise ValueError(f"ensemble members disagree on agents or horizon: {shape} vs {m.means.shape}")
    n = len(members)
    if n == 1:
        return members[0]
    return Modes(np.concatenate([m.probs for m in members], axis=1) / n,
                 np.concatenate([m.means for m in members], axis=1),
                 np.concatenate([m.logstd for m in members], axis=1))


def greedy_init(means: np.ndarray, probs: np.ndarray, threshold: float) -> np.ndarray:
    """Indices of centroid modes for one agent, in selection order.

    Each pick is the uncovered mode whose radius-``threshold`` endpoint ball
    holds the most uncovered probability; picking stops once every mode is
    within ``threshold`` of a centroid.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"mode probabilities sum to {probs.sum()}, expected 1")
    ends = np.ascontiguousarray(np.asarray(means, dtype=np.float64)[:, -1, :])
    return np.asarray(_backend.kernels.greedy_cover(ends, np.ascontiguousarray(probs), float(threshold)),
                      dtype=np.int64)


def _assign(ends: np.ndarray, centres: np.ndarray) -> np.ndarray:
    return np.asarray(_backend.kernels.nearest_assign(np.ascontiguousarray(ends),
                                                       np.ascontiguousarray(centres)), dtype=np.int64)


@dataclass
class Refined:
    means: np.ndarray    # [c, T, 2]
    logstd: np.ndarray   # [c, T, 2]
    probs: np.ndarray    # [c]
    assignment: np.ndarray


def refine(centroid_idx, means, logstd, probs, iterations: int) -> Refined:
    """Weighted-mean refinement of greedy centroids for one agent.

    Each iteration moves every centroid to the probability-weighted mean of
    its assigned modes, then reassigns modes to the nearest centroid.
    Centroids that lose all modes keep their trajectory and get zero mass.
    """
    means = np.asarray(means, dtype=np.float64)
    logstd = np.asarray(logstd, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    idx = np.asarray(centroid_idx, dtype=np.int64)
    c_means = means[idx].copy()
    c_logstd = logstd[idx].copy()
    ends = means[:, -1, :]
    assign = _assign(ends, c_means[:, -1, :])
    for _ in range(iterations):
        for c in range(len(idx)):
            sel = assign == c
            w = probs[sel]
            total = w.sum()
            if not sel.any() or total <= 0:
                continue
            c_means[c] = np.tensordot(w, means[sel], axes=1) / total
            c_logstd[c] = np.tensordot(w, logstd[sel], axes=1) / total
        assign = _assign(ends, c_means[:, -1, :])
    c_probs = np.bincount(assign, weights=probs, minlength=len(idx))
    return Refined(c_means, c_logstd, c_probs, assign)


def aggregate_agent(means, logstd, probs, cfg: AggregationConfig):
    """(means [k_out, T, 2], logstd, probs [k_out]) for one agent, most likely first."""
    means = np.asarray(means, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if means.shape[0] < cfg.modes_out:
        raise ValueError(f"{means.shape[0]} modes cannot be reduced to {cfg.modes_out}")
    picks = greedy_init(means, probs, cfg.threshold)
    r = refine(picks, means, logstd, probs, cfg.iterations)
    out_m, out_s, out_p = r.means, r.logstd, r.probs
    if len(picks) > cfg.modes_out:
        keep = np.argsort(-out_p, kind="stable")[:cfg.modes_out]
        out_m, out_s, out_p = out_m[keep], out_s[keep], out_p[keep]
    elif len(picks) < cfg.modes_out:
        rest = np.setdiff1d(np.arange(len(probs)), picks)
        extra = rest[np.argsort(-probs[rest], kind="stable")][:cfg.modes_out - len(picks)]
        out_m = np.concatenate([out_m, means[extra]])
        out_s = np.concatenate([out_s, np.asarray(logstd, dtype=np.float64)[extra]])
        out_p = np.concatenate([out_p, probs[extra]])
    out_p = out_p / out_p.sum()
    order = np.argsort(-out_p, kind="stable")
    return out_m[order], out_s[order], out_p[order]


def aggregate_to_k(modes: Modes, cfg: AggregationConfig) -> Modes:
    """Aggregate every agent's modes down to ``cfg.modes_out``."""
    ms, ss, ps = [], [], []
    for a in range(modes.probs.shape[0]):
        m, s, p = aggregate_agent(modes.means[a], modes.logstd[a], modes.probs[a], cfg)
        ms.append(m)
        ss.append(s)
        ps.append(p)
    return Modes(np.stack(ps), np.stack(ms), np.stack(ss))
