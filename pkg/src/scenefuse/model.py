"""Full forecasting model: per-modality projections, encoder, ensemble of decoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scenefuse import numerics as nx
from scenefuse.decoder import DecoderConfig, MixtureTrajectory, TrajectoryDecoder
from scenefuse.fusion import EncoderConfig, SceneEncoder, SceneEncoding
from scenefuse.layers import Linear, Module, param
from scenefuse.scene import FEATURES, MODALITIES, Scene, SceneError, to_agent_frames


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    ensemble: int = 1
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        if self.ensemble < 1:
            raise ValueError("ensemble size must be >= 1")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        unknown = set(self.modalities) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown modalities: {sorted(unknown)}")


@dataclass
class Batch:
    """Agent rows from one or more scenes, each row in its own agent frame."""

    values: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    future: np.ndarray          # [A, T_f, 2] agent frame
    origin: np.ndarray          # [A, 2] world pose of each row
    heading: np.ndarray         # [A]
    scene_ids: list[str]
    agent_index: np.ndarray     # row -> agent index within its scene

    @property
    def size(self) -> int:
        return self.future.shape[0]

    def subset(self, rows) -> "Batch":
        rows = np.asarray(rows)
        return Batch({k: v[rows] for k, v in self.values.items()},
                     {k: m[rows] for k, m in self.masks.items()},
                     self.future[rows], self.origin[rows], self.heading[rows],
                     [self.scene_ids[i] for i in rows], self.agent_index[rows])

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape[1:3] for k, v in self.values.items()}


def make_batch(scenes, modalities=MODALITIES) -> Batch:
    """Stack every agent of every scene as one row in that agent's frame."""
    scenes = list(scenes)
    if not scenes:
        raise SceneError("cannot batch zero scenes")
    parts = []
    for sc in scenes:
        local, xy, heading = to_agent_frames(sc)
        parts.append((sc, local, xy, heading))
    values, masks = {}, {}
    for m in modalities:
        shapes = {p[1][m].values.shape[1:] for p in parts}
        if len(shapes) > 1:
            raise SceneError(f"{m}: scenes have different shapes {sorted(shapes)}")
        values[m] = np.concatenate([p[1][m].values for p in parts])
        masks[m] = np.concatenate([p[1][m].mask for p in parts])
    ids, idx = [], []
    for sc, *_ in parts:
        ids += [sc.scene_id] * sc.num_agents
        idx += list(range(sc.num_agents))
    return Batch(values, masks,
                 np.concatenate([p[1].future for p in parts]),
                 np.concatenate([p[2] for p in parts]),
                 np.concatenate([p[3] for p in parts]),
                 ids, np.asarray(idx, dtype=np.int64))


class ForecastModel(Module):
    def __init__(self, cfg: ModelConfig, shapes: dict[str, tuple[int, int]], seed: int = 0,
                 dtype=np.float64):
        missing = [m for m in cfg.modalities if m not in shapes]
        if missing:
            raise ValueError(f"no shape given for modalities {missing}")
        rng = np.random.default_rng(seed)
        D = cfg.encoder.block.hidden
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.shapes = {m: tuple(shapes[m]) for m in cfg.modalities}
        self.projections = {m: Linear(len(FEATURES[m]), D, rng, dtype) for m in cfg.modalities}
        self.positional = {m: param(np.zeros((T * S, D)), dtype) for m, (T, S) in self.shapes.items()}
        self.encoder = SceneEncoder(cfg.encoder, self.shapes, rng, dtype)
        self.decoders = [TrajectoryDecoder(cfg.decoder, D, rng, dtype) for _ in range(cfg.ensemble)]

    def embed(self, values: dict, masks: dict):
        """Projected, position-tagged grids {m: [A, T, S, D]} with masks."""
        grids, ms = {}, {}
        for m in self.cfg.modalities:
            v = np.asarray(values[m], dtype=self.dtype)
            mk = np.asarray(masks[m], dtype=bool)
            if v.shape[1:3] != self.shapes[m]:
                raise SceneError(f"{m}: expected (T, S) = {self.shapes[m]}, got {v.shape[1:3]}")
            lin = self.projections[m]
            x = nx.relu(nx.linear(nx.Tensor(v), lin.weight, lin.bias))
            T, S = self.shapes[m]
            pos = nx.reshape(self.positional[m], (1, T, S, x.shape[-1]))
            x = nx.mul(nx.add(x, pos), mk[..., None].astype(self.dtype))
            grids[m] = x
            ms[m] = mk
        return grids, ms

    def encode(self, values: dict, masks: dict, rng=None) -> SceneEncoding:
        grids, ms = self.embed(values, masks)
        return self.encoder(grids, ms, rng)

    def __call__(self, batch_or_values, masks=None, rng=None) -> list[MixtureTrajectory]:
        if isinstance(batch_or_values, Batch):
            values, masks = batch_or_values.values, batch_or_values.masks
        else:
            values = batch_or_values
        enc = self.encode(values, masks, rng)
        return [dec(enc.z, enc.mask) for dec in self.decoders]
