"""Pure numpy implementations of the hot kernels.

Same signatures as the compiled ``_kernels`` extension; used when the
extension is unavailable or ``SCENEFUSE_PURE_PYTHON=1`` is set.
"""

import numpy as np

NAME = "python"

# masses closer than this count as tied; lowest index wins
TIE_TOL = 1e-12


def attention_forward(q, k, v, key_mask, scale):
    """q [B,Lq,d], k [B,Lk,d], v [B,Lk,dv], key_mask uint8 [B,Lk] -> (out, probs)."""
    valid = key_mask.astype(bool)[:, None, :]
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    scores = np.where(valid, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.exp(scores - m)
    s = e.sum(axis=-1, keepdims=True)
    probs = np.where(empty, 0.0, e / np.where(empty, 1.0, s)).astype(q.dtype, copy=False)
    out = np.matmul(probs, v)
    return out, probs


def attention_backward(g, q, k, v, probs, scale):
    gv = np.matmul(probs.transpose(0, 2, 1), g)
    gp = np.matmul(g, v.transpose(0, 2, 1))
    gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
    gq = np.matmul(gs, k) * scale
    gk = np.matmul(gs.transpose(0, 2, 1), q) * scale
    return gq, gk, gv


def greedy_cover(points, probs, threshold):
    """Greedy centroid selection: indices in pick order.

    Each step picks, among uncovered points, the one whose radius-``threshold``
    ball holds the most uncovered probability (ties: lowest index).
    """
    n = points.shape[0]
    diff = points[:, None, :] - points[None, :, :]
    within = np.sqrt((diff * diff).sum(axis=-1)) <= threshold
    uncovered = np.ones(n, dtype=bool)
    picks = []
    while uncovered.any():
        mass = within[:, uncovered] @ probs[uncovered]
        mass = np.where(uncovered, mass, -np.inf)
        best = int(np.flatnonzero(mass >= mass.max() - TIE_TOL)[0])
        picks.append(best)
        uncovered &= ~within[best]
    return np.asarray(picks, dtype=np.int64)


def nearest_assign(points, centers):
    """Index of the nearest center for each point (ties: lowest index)."""
    diff = points[:, None, :] - centers[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return np.argmin(d, axis=1).astype(np.int64)
