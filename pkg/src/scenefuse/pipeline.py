"""Glue between data, model, training, prediction and evaluation."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from scenefuse import numerics as nx
from scenefuse.aggregate import Modes, aggregate_to_k, merge_ensemble
from scenefuse.config import RunConfig
from scenefuse.formats import Prediction
from scenefuse.metrics import MetricsReport, evaluate
from scenefuse.model import Batch, ForecastModel, make_batch
from scenefuse.objective import TrainResult, train
from scenefuse.scene import SceneError, current_pose, inverse_transform_points
from scenefuse.synthdata import bimodal_split, generate


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, generator=dataclasses.replace(cfg.generator, seed=seed),
                               train=dataclasses.replace(cfg.train, seed=seed))


def make_scenes(cfg: RunConfig, split: str = "train", count: int | None = None):
    """Training or held-out scenes for the configured task."""
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    n = count or (cfg.data.train_scenes if split == "train" else cfg.data.eval_scenes)
    start = 0 if split == "train" else cfg.data.eval_offset
    fn = bimodal_split if cfg.data.task == "bimodal" else generate
    return fn(cfg.generator, n, start=start)


def scene_shapes(scenes, modalities) -> dict[str, tuple[int, int]]:
    first = scenes[0]
    return {m: tuple(first[m].values.shape[1:3]) for m in modalities}


def build_model(cfg: RunConfig, shapes) -> ForecastModel:
    return ForecastModel(cfg.model, shapes, seed=cfg.train.seed, dtype=np.dtype(cfg.dtype))


def fit(cfg: RunConfig, scenes, callback=None) -> tuple[ForecastModel, TrainResult]:
    batch = make_batch(scenes, cfg.model.modalities)
    model = build_model(cfg, batch.shapes())
    result = train(model, batch, cfg.train, callback=callback)
    return model, result


def predict_modes(model: ForecastModel, batch: Batch, chunk: int = 256) -> Modes:
    """Merged ensemble modes for every row, still in each agent's frame."""
    parts = []
    for lo in range(0, batch.size, chunk):
        sub = batch.subset(np.arange(lo, min(lo + chunk, batch.size)))
        parts.append(merge_ensemble(model(sub)))
    return Modes(np.concatenate([p.probs for p in parts]),
                 np.concatenate([p.means for p in parts]),
                 np.concatenate([p.logstd for p in parts]))


def to_world(modes: Modes, batch: Batch) -> list[Prediction]:
    """Prediction records with means mapped back to world coordinates.

    Log standard deviations stay axis-aligned in the agent's own frame.
    """
    out = []
    for r in range(batch.size):
        means = inverse_transform_points(modes.means[r], batch.origin[r], batch.heading[r])
        out.append(Prediction(batch.scene_ids[r], int(batch.agent_index[r]), modes.probs[r].copy(),
                              means, modes.logstd[r].copy()))
    return out


def predict(model: ForecastModel, scenes, modalities=None) -> list[Prediction]:
    batch = make_batch(scenes, modalities or model.cfg.modalities)
    return to_world(predict_modes(model, batch), batch)


def aggregate_predictions(preds: list[Prediction], agg_cfg) -> list[Prediction]:
    out = []
    for p in preds:
        m = aggregate_to_k(Modes(p.probabilities[None], p.means[None], p.logstd[None]), agg_cfg)
        out.append(Prediction(p.scene_id, p.agent, m.probs[0], m.means[0], m.logstd[0]))
    return out


def evaluation_records(preds: list[Prediction], scenes):
    """Join predictions to ground truth by (scene id, agent)."""
    by_id = {s.scene_id: s for s in scenes}
    if len(by_id) != len(scenes):
        raise SceneError("duplicate scene ids")
    records = []
    for p in preds:
        sc = by_id.get(p.scene_id)
        if sc is None:
            raise SceneError(f"prediction for unknown scene {p.scene_id!r}")
        if not 0 <= p.agent < sc.num_agents:
            raise SceneError(f"scene {p.scene_id!r} has no agent {p.agent}")
        if p.means.shape[1:] != sc.future.shape[1:]:
            raise SceneError(f"scene {p.scene_id!r}: prediction horizon {p.means.shape[1]} "
                             f"!= ground truth {sc.future.shape[1]}")
        xy, _, _ = current_pose(sc)
        others = np.delete(sc.future, p.agent, axis=0)
        records.append({"preds": p.means, "probs": p.probabilities, "gt": sc.future[p.agent],
                        "start": xy[p.agent], "others": others})
    return records


def evaluate_predictions(preds, scenes, metrics_cfg) -> MetricsReport:
    return evaluate(evaluation_records(preds, scenes), metrics_cfg)


def time_forward(model: ForecastModel, batch: Batch, passes: int = 30) -> tuple[float, int]:
    """Median forward wall-clock (seconds) and counted encoder score entries per agent."""
    with nx.AttentionCounter() as counter:
        model.encode(batch.values, batch.masks)
    scores = counter.total("encoder") // batch.size
    times = []
    for _ in range(passes):
        t0 = time.perf_counter()
        model(batch)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), scores
