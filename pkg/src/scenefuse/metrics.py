"""Forecast evaluation: minADE, minFDE, minDE^t, miss rate, overlap, mAP, brier-minFDE.

All metrics use the top-k modes by probability. Distances are Euclidean in
scene units; every metric is invariant to a rigid motion applied jointly to
predictions and ground truth.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

BUCKETS = ("stationary", "straight", "left-turn", "right-turn")


@dataclass(frozen=True)
class MetricsConfig:
    k: int = 6
    miss_threshold: float = 2.0
    map_threshold: float = 2.0
    overlap_radius: float = 1.0
    stationary_threshold: float = 2.0
    turn_threshold: float = math.pi / 6
    horizons: tuple[int, ...] = (4, 8)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("miss_threshold", "map_threshold", "overlap_radius",
                     "stationary_threshold", "turn_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.horizons or min(self.horizons) < 1:
            raise ValueError("horizons must be positive step counts")


class MetricsError(ValueError):
    pass


# ----------------------------------------------------------------------------
# per-agent distances


def _dists(preds, gt) -> np.ndarray:
    """[k, T] Euclidean distances between modes and ground truth."""
    return np.linalg.norm(np.asarray(preds, float) - np.asarray(gt, float)[None], axis=-1)


def min_ade(preds, gt) -> float:
    return float(_dists(preds, gt).mean(axis=1).min())


def min_fde(preds, gt) -> float:
    return float(_dists(preds, gt)[:, -1].min())


def min_de(preds, gt, t: int) -> float:
    """Smallest displacement at step ``t`` (1-based) over the modes."""
    return float(_dists(np.asarray(preds)[:, :t], np.asarray(gt)[:t])[:, -1].min())


def is_miss(preds, gt, threshold: float, t: int | None = None) -> bool:
    """True when every mode's position at step ``t`` (default: last) is farther than ``threshold``."""
    d = _dists(preds, gt)
    col = d[:, -1] if t is None else d[:, t - 1]
    return bool((col > threshold).all())


def miss_rate(preds_list, gts, threshold: float, t: int | None = None) -> float:
    flags = [is_miss(p, g, threshold, t) for p, g in zip(preds_list, gts)]
    if not flags:
        raise MetricsError("miss rate of an empty population")
    return float(np.mean(flags))


def overlap(pred, others_gt, radius: float, others_mask=None) -> float:
    """Fraction of timesteps where ``pred`` [T, 2] comes within 2*radius of another agent."""
    pred = np.asarray(pred, float)
    others = np.asarray(others_gt, float).reshape(-1, pred.shape[0], 2)
    if others.shape[0] == 0:
        return 0.0
    d = np.linalg.norm(others - pred[None], axis=-1)
    hit = d < 2.0 * radius
    if others_mask is not None:
        hit &= np.asarray(others_mask, bool).reshape(hit.shape)
    return float(hit.any(axis=0).mean())


def brier_min_fde(preds, probs, gt) -> float:
    """minFDE plus (1 - p)^2 for the probability p of the mode achieving minFDE."""
    d = _dists(preds, gt)[:, -1]
    best = int(np.argmin(d))
    return float(d[best] + (1.0 - float(probs[best])) ** 2)


def top_k(preds, probs, k: int):
    """Modes sorted by probability (stable) and cut to ``k``."""
    probs = np.asarray(probs, float)
    order = np.argsort(-probs, kind="stable")[:k]
    return np.asarray(preds)[order], probs[order]


# ----------------------------------------------------------------------------
# behaviour buckets and mAP


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def bucket(gt, start=None, cfg: MetricsConfig = MetricsConfig()) -> str:
    """Behaviour label from displacement and net heading change of a ground-truth path.

    ``start`` (the current position) is prepended when given. Heading change
    compares the first and last non-degenerate step directions.
    """
    pts = np.asarray(gt, float)
    if start is not None:
        pts = np.concatenate([np.asarray(start, float)[None], pts])
    if np.linalg.norm(pts[-1] - pts[0]) < cfg.stationary_threshold or len(pts) < 3:
        return "stationary"
    steps = np.diff(pts, axis=0)
    moving = np.flatnonzero(np.linalg.norm(steps, axis=1) > 1e-6)
    if len(moving) < 2:
        return "straight"
    a0 = math.atan2(steps[moving[0], 1], steps[moving[0], 0])
    a1 = math.atan2(steps[moving[-1], 1], steps[moving[-1], 0])
    turn = _wrap(a1 - a0)
    if turn > cfg.turn_threshold:
        return "left-turn"
    if turn < -cfg.turn_threshold:
        return "right-turn"
    return "straight"


def average_precision(scores, labels, n_positive: int) -> float:
    """Area under the interpolated precision-recall curve.

    Predictions sharing a score enter the curve together.
    """
    if n_positive == 0:
        raise MetricsError("average precision with no ground-truth positives")
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    cut = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(l)[cut]
    n = cut + 1
    precision = tp / n
    recall = tp / n_positive
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * interp))


def match_predictions(preds, gt, threshold: float) -> np.ndarray:
    """True-positive flag per mode: only the closest endpoint within ``threshold``."""
    d = _dists(preds, gt)[:, -1]
    flags = np.zeros(len(d), dtype=bool)
    best = int(np.argmin(d))
    if d[best] <= threshold:
        flags[best] = True
    return flags


def map_metric(entries, cfg: MetricsConfig = MetricsConfig()) -> float:
    """Mean over non-empty behaviour buckets of average precision.

    ``entries`` yields (preds [k, T, 2], probs [k], gt [T, 2], bucket name).
    """
    per = {b: ([], [], 0) for b in BUCKETS}
    for preds, probs, gt, name in entries:
        if name not in per:
            raise MetricsError(f"unknown bucket {name!r}")
        preds, probs = top_k(preds, probs, cfg.k)
        s, l, n = per[name]
        s.extend(probs.tolist())
        l.extend(match_predictions(preds, gt, cfg.map_threshold).tolist())
        per[name] = (s, l, n + 1)
    aps = [average_precision(s, l, n) for s, l, n in per.values() if n > 0]
    if not aps:
        raise MetricsError("mAP needs at least one non-empty bucket")
    return float(np.mean(aps))


# ----------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    count: int
    min_ade: float
    min_fde: float
    brier_min_fde: float
    map: float
    min_de: dict[int, float] = field(default_factory=dict)
    miss_rate: dict[int, float] = field(default_factory=dict)
    overlap: dict[int, float] = field(default_factory=dict)
    buckets: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [("count", self.count), ("minADE", self.min_ade), ("minFDE", self.min_fde)]
        for t in sorted(self.min_de):
            out.append((f"minDE@{t}", self.min_de[t]))
        for t in sorted(self.miss_rate):
            out.append((f"MR@{t}", self.miss_rate[t]))
        for t in sorted(self.overlap):
            out.append((f"Overlap@{t}", self.overlap[t]))
        out += [("mAP", self.map), ("brier-minFDE", self.brier_min_fde)]
        out += [(f"bucket:{b}", self.buckets.get(b, 0)) for b in BUCKETS]
        return out

    def to_text(self) -> str:
        return "".join(f"{name:<20s} {_fmt(v)}\n" for name, v in self.rows())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,value\n")
        for name, v in self.rows():
            buf.write(f"{name},{_fmt(v)}\n")
        return buf.getvalue()

    def as_dict(self) -> dict[str, float]:
        return dict(self.rows())


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def evaluate(records, cfg: MetricsConfig = MetricsConfig()) -> MetricsReport:
    """Aggregate metrics over agents.

    ``records`` yields dicts with keys ``preds`` [k, T, 2], ``probs`` [k],
    ``gt`` [T, 2], ``start`` [2] (current position), ``others`` [n, T, 2]
    (other agents' ground truth in the same scene).
    """
    records = list(records)
    if not records:
        raise MetricsError("no predictions to evaluate")
    T = np.asarray(records[0]["gt"]).shape[0]
    horizons = [h for h in cfg.horizons if h <= T] or [T]
    ade, fde, brier = [], [], []
    mde = {h: [] for h in horizons}
    miss = {h: [] for h in horizons}
    ov = {h: [] for h in horizons}
    entries, counts = [], {b: 0 for b in BUCKETS}
    for r in records:
        preds, probs = top_k(r["preds"], r["probs"], cfg.k)
        gt = np.asarray(r["gt"], float)
        ade.append(min_ade(preds, gt))
        fde.append(min_fde(preds, gt))
        brier.append(brier_min_fde(preds, probs, gt))
        for h in horizons:
            mde[h].append(min_de(preds, gt, h))
            miss[h].append(is_miss(preds, gt, cfg.miss_threshold, h))
            others = np.asarray(r.get("others", np.zeros((0, T, 2))), float)
            ov[h].append(overlap(preds[0, :h], others[:, :h], cfg.overlap_radius))
        name = bucket(gt, r.get("start"), cfg)
        counts[name] += 1
        entries.append((preds, probs, gt, name))
    return MetricsReport(
        count=len(records),
        min_ade=float(np.mean(ade)),
        min_fde=float(np.mean(fde)),
        brier_min_fde=float(np.mean(brier)),
        map=map_metric(entries, cfg),
        min_de={h: float(np.mean(v)) for h, v in mde.items()},
        miss_rate={h: float(np.mean(v)) for h, v in miss.items()},
        overlap={h: float(np.mean(v)) for h, v in ov.items()},
        buckets=counts,
    )
