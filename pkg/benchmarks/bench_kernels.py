"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, size) with the median time of each backend and
the speed-up. The two backends are also checked for agreement.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from scenefuse import _kernels_py

try:
    from scenefuse import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def cases(rng):
    for B, L, d in ((64, 49, 16), (256, 49, 16), (64, 192, 32)):
        q = rng.normal(size=(B, L, d))
        k = rng.normal(size=(B, L, d))
        v = rng.normal(size=(B, L, d))
        mask = (rng.random((B, L)) > 0.2).astype(np.uint8)
        mask[:, 0] = 1
        yield (f"attention_forward B={B} L={L} d={d}", "attention_forward",
               (q, k, v, mask, 1.0 / np.sqrt(d)))
        q32, k32, v32 = (a.astype(np.float32) for a in (q, k, v))
        yield (f"attention_forward f32 B={B} L={L} d={d}", "attention_forward",
               (q32, k32, v32, mask, np.float32(1.0 / np.sqrt(d))))
    for n in (6, 64, 192):
        pts = rng.normal(scale=5.0, size=(n, 2))
        probs = rng.dirichlet(np.ones(n))
        yield f"greedy_cover n={n}", "greedy_cover", (pts, probs, 2.3)
        yield f"nearest_assign n={n}", "nearest_assign", (pts, pts[: max(1, n // 8)].copy())


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f":
        return np.allclose(a, b, rtol=1e-4, atol=1e-5)
    return np.array_equal(a, b)


def run(repeat: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    rows = []
    for label, name, args in cases(rng):
        py = getattr(_kernels_py, name)
        t_py = np.median(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))
        if _kernels is None:
            rows.append((label, t_py, float("nan"), True))
            continue
        cy = getattr(_kernels, name)
        t_cy = np.median(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat))
        rows.append((label, t_py, t_cy, _same(py(*args), cy(*args))))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    rows = run(args.repeat)
    print(f"{'kernel':<42s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}  agree")
    for label, t_py, t_cy, ok in rows:
        print(f"{label:<42s} {1e3 * t_py:10.3f} {1e3 * t_cy:10.3f} {t_py / t_cy:8.2f}x  {ok}")
    return 0 if all(ok for *_, ok in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
