"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed in the terminal summary (and immediately with ``-s``).
Criteria 3 and 5 train models for several minutes and carry the ``slow`` marker.
"""

import dataclasses
import functools
import inspect
import time

import numpy as np
import oracles
import pytest
from conftest import ACCEPTANCE, tiny_run

from scenefuse import numerics as nx
from scenefuse import pipeline
from scenefuse.aggregate import AggregationConfig, Modes, aggregate_to_k, greedy_init, refine
from scenefuse.attention import BlockConfig
from scenefuse.cli import main
from scenefuse.config import DataConfig, RunConfig, save
from scenefuse.fusion import REGIMES, EncoderConfig, SceneEncoder, encoding_length
from scenefuse.metrics import MetricsConfig, brier_min_fde, is_miss, map_metric, min_ade, min_fde, overlap
from scenefuse.model import ForecastModel, make_batch
from scenefuse.numerics import Tape, Tensor
from scenefuse.objective import TrainConfig, ensemble_loss


class Check:
    def __init__(self):
        self.notes = []
        self.ok = True

    def expect(self, cond, note):
        self.notes.append(note)
        self.ok = self.ok and bool(cond)


def criterion(number, title, budget_s=None):
    """Run the body with a ``Check``; record one PASS/FAIL line and fail the test on FAIL."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            check = Check()
            t0 = time.perf_counter()
            try:
                fn(check, *args, **kwargs)
            except Exception as exc:  # record, then re-raise
                check.expect(False, f"error: {type(exc).__name__}: {exc}")
                _record(number, title, check, time.perf_counter() - t0, budget_s)
                raise
            _record(number, title, check, time.perf_counter() - t0, budget_s)
            assert check.ok, "; ".join(check.notes)

        # pytest sees the body's fixtures, minus the injected ``check``
        sig = inspect.signature(fn)
        run.__signature__ = sig.replace(parameters=list(sig.parameters.values())[1:])
        return run

    return wrap


def _record(number, title, check, elapsed, budget_s):
    if budget_s is not None:
        check.expect(elapsed < budget_s, f"runtime {elapsed:.1f}s / budget {budget_s}s")
    detail = "; ".join(check.notes)
    ACCEPTANCE.append((number, title, check.ok, detail))
    print(f"\ncriterion {number} {'PASS' if check.ok else 'FAIL'}: {title} ({detail})")


def _weighted_sum(t, seed=0):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return nx.sum_(nx.mul(t, w))


# ----------------------------------------------------------------------------
# 1


@criterion(1, "gradient suite", budget_s=120)
def test_gradient_suite(check):
    from test_numerics import UNARY

    rng = np.random.default_rng(11)
    worst = 0.0
    for name, (fn, make) in UNARY.items():
        x = make(rng, 2, 3, 3)
        worst = max(worst, nx.gradient_check(lambda: _weighted_sum(fn(x)), [x]))
    a, b = Tensor(rng.normal(size=(2, 3, 4)), True), Tensor(rng.uniform(0.5, 2, (3, 1)), True)
    for op in (nx.add, nx.sub, nx.mul, nx.div):
        worst = max(worst, nx.gradient_check(lambda: _weighted_sum(op(a, b)), [a, b]))
    w, bias = Tensor(rng.normal(size=(5, 4)), True), Tensor(rng.normal(size=5), True)
    worst = max(worst, nx.gradient_check(lambda: _weighted_sum(nx.linear(a, w, bias)), [a, w, bias]))
    m = Tensor(rng.normal(size=(4, 2)), True)
    worst = max(worst, nx.gradient_check(lambda: _weighted_sum(nx.matmul(a, m)), [a, m]))
    g, beta = Tensor(rng.normal(size=4), True), Tensor(rng.normal(size=4), True)
    worst = max(worst, nx.gradient_check(lambda: _weighted_sum(nx.layernorm(a, g, beta)), [a, g, beta]))
    c = Tensor(rng.normal(size=(2, 3, 4)), True)
    cond = rng.random((2, 3, 4)) > 0.5
    worst = max(worst, nx.gradient_check(lambda: _weighted_sum(nx.where(cond, a, c)), [a, c]))
    worst = max(worst, nx.gradient_check(lambda: _weighted_sum(nx.concat([a, c], 1)), [a, c]))
    q, k, v = (Tensor(rng.normal(size=s), True) for s in ((3, 4, 2), (3, 4, 2), (3, 4, 2)))
    mask = np.ones((3, 4), bool)
    mask[0, 2:] = False
    worst = max(worst, nx.gradient_check(lambda: _weighted_sum(nx.attention(q, k, v, mask)), [q, k, v]))
    check.expect(worst < 1e-4, f"ops max rel err {worst:.1e}")

    configs = [("early", r, None) for r in REGIMES] + [("late", "multi_axis", None),
                                                      ("hierarchical", "factorized_sequential", None),
                                                      ("early", "multi_axis", 0.5)]
    worst = 0.0
    for fusion, regime, ratio in configs:
        model, batch = tiny_run(fusion=fusion, regime=regime, jitter=0.1)
        if ratio is not None:
            enc = dataclasses.replace(model.cfg.encoder, latent_ratio=ratio)
            cfg = dataclasses.replace(model.cfg, encoder=enc)
            model = ForecastModel(cfg, batch.shapes(), seed=0, dtype=np.float64)
            for p in model.parameters():
                p.data += 0.1 * np.random.default_rng(5).normal(size=p.data.shape)
        shapes = [v.shape[1:3] for v in batch.values.values()]
        assert batch.size <= 2 and max(max(s) for s in shapes) <= 4
        err = nx.gradient_check(lambda: ensemble_loss(model(batch), batch.future).total, model.parameters())
        worst = max(worst, err)
    check.expect(worst < 1e-4, f"full loss over {len(configs)} encoder configs max rel err {worst:.1e}")


# ----------------------------------------------------------------------------
# 2

GRID_SHAPES = [
    {"history": (3, 1), "roadgraph": (1, 4)},
    {"history": (2, 1), "interactions": (2, 3)},
    {"history": (4, 1), "interactions": (4, 2), "roadgraph": (1, 3), "traffic_lights": (4, 1)},
    {"history": (5, 1), "interactions": (5, 2), "roadgraph": (1, 24), "traffic_lights": (5, 2)},
]


@criterion(2, "complexity law", budget_s=60)
def test_complexity_law(check):
    rng = np.random.default_rng(2)
    block = BlockConfig(hidden=8, heads=2, intermediate=16)
    A = 3
    matched = 0
    for i, shapes in enumerate(GRID_SHAPES):
        for regime in REGIMES:
            depth = 2 if i % 2 == 0 else 4
            enc = SceneEncoder(EncoderConfig("early", regime, depth, block), shapes, rng)
            grids = {m: Tensor(rng.normal(size=(A, T, S, 8))) for m, (T, S) in shapes.items()}
            masks = {m: np.ones((A, T, S), bool) for m, (T, S) in shapes.items()}
            with nx.AttentionCounter() as counter:
                enc(grids, masks)
            per_agent, rem = divmod(counter.total("encoder"), A)
            if regime == "multi_axis":
                L = sum(T * S for T, S in shapes.values())
                expected = depth * L * L
            else:
                T = max(T for T, _ in shapes.values())
                S = sum(S for _, S in shapes.values())
                expected = (depth // 2) * (S * T * T + T * S * S)
            matched += rem == 0 and per_agent == expected
    check.expect(matched == 12, f"{matched}/12 configs exact")


# ----------------------------------------------------------------------------
# 3


@pytest.mark.slow
@criterion(3, "latent-query scaling", budget_s=1800)
def test_latent_query_scaling(check):
    ratios = [0.25, 0.5, 0.75, 1.0]
    base = RunConfig()
    train_scenes = pipeline.make_scenes(base, "train")
    eval_scenes = pipeline.make_scenes(base, "eval")
    batch = make_batch(eval_scenes)
    timing = batch.subset(np.arange(64))
    models, flops = {}, {}
    for r in ratios:
        enc = dataclasses.replace(base.model.encoder, latent_ratio=r)
        cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, encoder=enc))
        models[r] = (cfg, pipeline.build_model(cfg, batch.shapes()))
        with nx.AttentionCounter() as counter:
            models[r][1].encode(timing.values, timing.masks)
        flops[r] = 4 * enc.block.hidden * counter.total("encoder")
    times = {r: [] for r in ratios}
    for _ in range(30):  # interleaved, so drift hits every ratio alike
        for r in ratios:
            t0 = time.perf_counter()
            models[r][1](timing)
            times[r].append(time.perf_counter() - t0)
    wall = [float(np.median(times[r])) for r in ratios]
    f = [flops[r] for r in ratios]
    check.expect(all(a <= b for a, b in zip(f, f[1:])), f"FLOPs {f}")
    check.expect(all(a <= b for a, b in zip(wall, wall[1:])),
                 "median ms " + str([round(1e3 * w, 2) for w in wall]))
    ade = {}
    for r in (0.25, 1.0):
        model, _ = pipeline.fit(models[r][0], train_scenes)
        report = pipeline.evaluate_predictions(pipeline.predict(model, eval_scenes), eval_scenes,
                                               base.metrics)
        ade[r] = report.min_ade
    rel = ade[0.25] / ade[1.0] - 1.0
    check.expect(rel <= 0.2, f"minADE R=0.25 {ade[0.25]:.3f} vs R=1 {ade[1.0]:.3f} ({100 * rel:+.1f}%)")


# ----------------------------------------------------------------------------
# 4


@criterion(4, "fusion isolation")
def test_fusion_isolation(check):
    rng = np.random.default_rng(4)
    D, F, N = 8, 16, 2
    block = BlockConfig(hidden=D, heads=2, intermediate=F)
    shapes = {"history": (3, 1), "interactions": (3, 2), "roadgraph": (1, 4), "traffic_lights": (3, 1)}
    leaks = 0
    own = True
    for regime in REGIMES:
        cfg = EncoderConfig("late", regime, N, block)
        enc = SceneEncoder(cfg, shapes, rng)
        grids = {m: Tensor(rng.normal(size=(2, T, S, D)), True) for m, (T, S) in shapes.items()}
        masks = {m: np.ones((2, T, S), bool) for m, (T, S) in shapes.items()}
        lengths = [encoding_length(cfg, {m: shapes[m]}) for m in shapes]
        offsets = np.cumsum([0] + lengths)
        for i, m in enumerate(shapes):
            with Tape() as tape:
                z = enc(grids, masks).z
                part = _weighted_sum(z[:, offsets[i]:offsets[i + 1]], seed=i)
                sources = [grids[o] for o in shapes] + [p for o in shapes
                                                        for p in enc.per_modality[o].parameters()]
                grads = tape.gradient(part, sources)
            owners = list(shapes) + [o for o in shapes for _ in enc.per_modality[o].parameters()]
            for o, g in zip(owners, grads):
                if o == m:
                    own = own and bool(np.any(g != 0)) if g.ndim == 4 else own
                else:
                    leaks += int(np.count_nonzero(g))
    check.expect(leaks == 0 and own, f"{leaks} non-zero cross-modality gradient entries")
    block_params = 4 * D + 4 * (D * D + D) + (D * F + F) + (F * D + D)
    counts = {f: SceneEncoder(EncoderConfig(f, "multi_axis", N, block), shapes, rng).num_parameters()
              for f in ("early", "late")}
    gap = counts["late"] - counts["early"]
    expected = (len(shapes) - 1) * N * block_params
    check.expect(gap == expected and gap > 0, f"late-early params {gap}, closed form {expected}")


# ----------------------------------------------------------------------------
# 5


def _fork_coverage(preds, scenes, radius=1.0):
    by_id = {s.scene_id: s for s in scenes}
    hits = []
    for p in preds:
        ends = np.asarray(by_id[p.scene_id].meta["branch_endpoints"][p.agent])
        top = p.means[np.argsort(-p.probabilities, kind="stable")[:2], -1]
        d = np.linalg.norm(ends[:, None] - top[None], axis=-1)
        hits.append((d[0, 0] < radius and d[1, 1] < radius) or (d[0, 1] < radius and d[1, 0] < radius))
    return float(np.mean(hits))


@pytest.mark.slow
@criterion(5, "end-to-end learning", budget_s=1200)
def test_end_to_end_learning(check):
    cfg = RunConfig()
    enc = cfg.model.encoder
    assert (enc.fusion, enc.regime, enc.block.hidden, enc.depth, cfg.model.decoder.modes) == \
        ("early", "multi_axis", 64, 2, 6)
    assert (cfg.train.steps, cfg.data.train_scenes) == (2000, 5000)
    eval_scenes = pipeline.make_scenes(cfg, "eval")
    model, _ = pipeline.fit(cfg, pipeline.make_scenes(cfg, "train"))
    ade = pipeline.evaluate_predictions(pipeline.predict(model, eval_scenes), eval_scenes, cfg.metrics).min_ade
    check.expect(ade < 0.5, f"unimodal held-out minADE {ade:.3f}")

    bim = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, task="bimodal"))
    eval_scenes = pipeline.make_scenes(bim, "eval")
    model, _ = pipeline.fit(bim, pipeline.make_scenes(bim, "train"))
    agg = pipeline.aggregate_predictions(pipeline.predict(model, eval_scenes), bim.aggregation)
    frac = _fork_coverage(agg, eval_scenes)
    check.expect(frac >= 0.9, f"bimodal top-2 within 1.0 of both branches in {100 * frac:.1f}% of agents")


# ----------------------------------------------------------------------------
# 6


@criterion(6, "aggregation oracle")
def test_aggregation_oracle(check):
    import itertools

    rng = np.random.default_rng(6)
    mismatches = total = 0
    for n in range(1, 7):
        for xs in itertools.product([0.0, 1.0, 2.0, 3.0], repeat=n):
            means = np.zeros((n, 1, 2))
            means[:, 0, 0] = xs
            probs = rng.dirichlet(np.ones(n))
            total += 1
            mismatches += greedy_init(means, probs, 1.5).tolist() != oracles.greedy_cover(means[:, -1], probs, 1.5)
    check.expect(mismatches == 0, f"greedy vs oracle {total - mismatches}/{total}")
    uncovered = 0
    drift = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        means = rng.normal(scale=4.0, size=(n, 4, 2))
        probs = rng.dirichlet(np.ones(n))
        th = float(rng.uniform(0.5, 4.0))
        picks = greedy_init(means, probs, th)
        d = np.linalg.norm(means[:, -1][:, None] - means[picks, -1][None], axis=-1)
        uncovered += int((d.min(axis=1) > th).sum())
        r = refine(picks, means, np.zeros_like(means), probs, 3)
        drift = max(drift, abs(r.probs.sum() - probs.sum()))
    check.expect(uncovered == 0, f"{uncovered} uncovered modes over 1000 instances")
    check.expect(drift <= 1e-9, f"refinement probability drift {drift:.1e}")


# ----------------------------------------------------------------------------
# 7


@criterion(7, "metrics oracle")
def test_metrics_oracle(check):
    rng = np.random.default_rng(7)
    cfg = MetricsConfig()
    worst = 0.0
    miss_disagree = 0
    brier_err = 0.0
    entries = []
    for _ in range(1000):
        k, T = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        gt = rng.normal(scale=3, size=(T, 2))
        preds = gt[None] + rng.normal(scale=2, size=(k, T, 2))
        probs = rng.dirichlet(np.ones(k))
        others = gt[None] + rng.normal(scale=2, size=(int(rng.integers(0, 4)), T, 2))
        worst = max(worst, abs(min_ade(preds, gt) - oracles.min_ade(preds, gt)),
                    abs(min_fde(preds, gt) - oracles.min_fde(preds, gt)),
                    abs(overlap(preds[0], others, 1.0) - oracles.overlap(preds[0], others, 1.0)))
        miss_disagree += is_miss(preds, gt, 2.0, T) != oracles.miss(preds, gt, 2.0, T)
        best = int(np.argmin(np.linalg.norm(preds[:, -1] - gt[-1], axis=-1)))
        brier_err = max(brier_err, abs(brier_min_fde(preds, probs, gt) - (min_fde(preds, gt) + (1 - probs[best]) ** 2)))
        entries.append((preds, probs, gt, ("straight", "left-turn", "right-turn", "stationary")[rng.integers(4)]))
    map_err = abs(map_metric(entries, cfg) - oracles.map_metric(entries, cfg.k, cfg.map_threshold))
    check.expect(worst <= 1e-9 and miss_disagree == 0,
                 f"minADE/minFDE/Overlap max err {worst:.1e}, MR disagreements {miss_disagree}")
    check.expect(map_err <= 1e-9, f"mAP err {map_err:.1e}")
    check.expect(brier_err <= 1e-12, f"brier-minFDE construction err {brier_err:.1e}")


# ----------------------------------------------------------------------------
# 8


def _pipeline_run(root, cfg_path):
    root.mkdir()
    args = ["--config", str(cfg_path), "--seed", "17"]
    assert main(["generate", *args, "--out", str(root / "train.jsonl")]) == 0
    assert main(["generate", *args, "--split", "eval", "--out", str(root / "eval.jsonl")]) == 0
    assert main(["train", *args, "--scenes", str(root / "train.jsonl"), "--out", str(root / "m.npz")]) == 0
    assert main(["predict", *args, "--scenes", str(root / "eval.jsonl"), "--checkpoint", str(root / "m.npz"),
                 "--out", str(root / "pred.jsonl")]) == 0
    assert main(["eval", *args, "--scenes", str(root / "eval.jsonl"), "--predictions", str(root / "pred.jsonl"),
                 "--out", str(root / "report.txt")]) == 0
    return {name: (root / name).read_bytes() for name in ("pred.jsonl", "report.txt", "report.csv")}


@criterion(8, "determinism")
def test_determinism(check, tmp_path, capsys):
    base = RunConfig()
    enc = dataclasses.replace(base.model.encoder, block=BlockConfig(16, 2, 32))
    cfg = dataclasses.replace(base, data=DataConfig(train_scenes=40, eval_scenes=10),
                              model=dataclasses.replace(base.model, encoder=enc),
                              train=TrainConfig(steps=20, batch_size=16, learning_rate=1e-3))
    save(cfg, tmp_path / "cfg.json")
    a = _pipeline_run(tmp_path / "a", tmp_path / "cfg.json")
    b = _pipeline_run(tmp_path / "b", tmp_path / "cfg.json")
    same = [n for n in a if a[n] == b[n]]
    check.expect(len(same) == len(a), f"byte-identical: {', '.join(same)}")


# ----------------------------------------------------------------------------
# 9


@criterion(9, "permutation invariances")
def test_permutation_invariances(check):
    rng = np.random.default_rng(9)
    from scenefuse.synthdata import GeneratorConfig, generate

    batch = make_batch(generate(GeneratorConfig(seed=9, roadgraph=6, interactions=3), 2))
    block = BlockConfig(hidden=8, heads=2, intermediate=16)
    worst_tok = worst_q = 0.0
    from scenefuse.decoder import DecoderConfig
    from scenefuse.model import ModelConfig

    for fusion in ("early", "late", "hierarchical"):
        for regime in REGIMES:
            for ratio in (None, 0.5):
                cfg = ModelConfig(EncoderConfig(fusion, regime, 2, block, latent_ratio=ratio),
                                  DecoderConfig(modes=4, horizon=8))
                model = ForecastModel(cfg, batch.shapes(), seed=1, dtype=np.float64)
                assert all(not p.data.any() for p in model.positional.values())
                ref = model(batch)[0]
                for m in ("interactions", "roadgraph"):
                    perm = rng.permutation(batch.values[m].shape[2])
                    vals = dict(batch.values, **{m: batch.values[m][:, :, perm]})
                    masks = dict(batch.masks, **{m: batch.masks[m][:, :, perm]})
                    out = model(vals, masks)[0]
                    worst_tok = max(worst_tok, np.abs(out.means.data - ref.means.data).max(),
                                    np.abs(out.logits.data - ref.logits.data).max())
                if regime == "multi_axis":  # any reordering of a modality's T*S tokens
                    v, mk = batch.values["interactions"], batch.masks["interactions"]
                    A, T, S, F = v.shape
                    perm = rng.permutation(T * S)
                    vals = dict(batch.values, interactions=v.reshape(A, T * S, F)[:, perm].reshape(A, T, S, F))
                    masks = dict(batch.masks, interactions=mk.reshape(A, T * S)[:, perm].reshape(A, T, S))
                    out = model(vals, masks)[0]
                    worst_tok = max(worst_tok, np.abs(out.means.data - ref.means.data).max())
                enc = model.encode(batch.values, batch.masks)
                dec = model.decoders[0]
                qp = rng.permutation(4)
                out = dec(enc.z, enc.mask, queries=Tensor(dec.bank.queries.data[qp]))
                worst_q = max(worst_q, np.abs(out.means.data - ref.means.data[:, qp]).max(),
                              np.abs(out.logits.data - ref.logits.data[:, qp]).max(),
                              np.abs(out.logstd.data - ref.logstd.data[:, qp]).max())
    check.expect(worst_tok <= 1e-9, f"token permutation max diff {worst_tok:.1e}")
    check.expect(worst_q <= 1e-9, f"query permutation max diff {worst_q:.1e}")
