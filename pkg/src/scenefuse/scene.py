"""Input modalities, the ego-centric frame, projection and token assembly.

Every modality is a 4-axis array ``[A, T, S, D]`` (agents, time, context
slots, features) with a boolean validity mask ``[A, T, S]``. The last time
index is the current timestep.

Feature layouts
---------------
history / interactions (10)
    x, y, vx, vy, ax, ay, length, width, sin(heading), cos(heading)
roadgraph (9)
    x0, y0, x1, y1, dir_x, dir_y, is_lane, is_edge, is_stop_line
traffic_lights (7)
    x, y, is_red, is_yellow, is_green, is_unknown, confidence
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scenefuse import numerics as nx
from scenefuse.numerics import Tensor

AGENT_FEATURES = ("x", "y", "vx", "vy", "ax", "ay", "length", "width", "sin_heading", "cos_heading")
ROAD_FEATURES = ("x0", "y0", "x1", "y1", "dir_x", "dir_y", "is_lane", "is_edge", "is_stop_line")
LIGHT_FEATURES = ("x", "y", "is_red", "is_yellow", "is_green", "is_unknown", "confidence")

ROAD_TYPES = ("lane", "edge", "stop_line")
LIGHT_STATES = ("red", "yellow", "green", "unknown")

MODALITIES = ("history", "interactions", "roadgraph", "traffic_lights")

FEATURES = {
    "history": AGENT_FEATURES,
    "interactions": AGENT_FEATURES,
    "roadgraph": ROAD_FEATURES,
    "traffic_lights": LIGHT_FEATURES,
}

# (points, vectors, heading sin/cos pair) feature indices per modality
_GEOMETRY = {
    "history": ([(0, 1)], [(2, 3), (4, 5)], (8, 9)),
    "interactions": ([(0, 1)], [(2, 3), (4, 5)], (8, 9)),
    "roadgraph": ([(0, 1), (2, 3)], [(4, 5)], None),
    "traffic_lights": ([(0, 1)], [], None),
}


class SceneError(ValueError):
    pass


@dataclass
class Modality:
    name: str
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 4:
            raise SceneError(f"{self.name}: expected [A, T, S, D], got shape {self.values.shape}")
        if self.mask.shape != self.values.shape[:3]:
            raise SceneError(f"{self.name}: mask shape {self.mask.shape} does not match {self.values.shape[:3]}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def copy(self) -> "Modality":
        return Modality(self.name, self.values.copy(), self.mask.copy())

    def validate(self) -> None:
        A, T, S, D = self.values.shape
        expected = FEATURES.get(self.name)
        if expected is not None and D != len(expected):
            raise SceneError(f"{self.name}: feature size {D}, expected {len(expected)}")
        if self.name == "history" and S != 1:
            raise SceneError(f"history must have a single context slot, got S={S}")
        if self.name == "roadgraph" and T != 1:
            raise SceneError(f"roadgraph has no time axis; expected T=1, got T={T}")
        if self.name in ("history", "interactions"):
            s, c = self.values[..., 8], self.values[..., 9]
            norm = s * s + c * c
            if np.any(np.abs(norm[self.mask] - 1.0) > 1e-6):
                raise SceneError(f"{self.name}: heading sin/cos not normalized")
        if self.name == "traffic_lights":
            conf = self.values[..., 6][self.mask]
            if np.any((conf < 0) | (conf > 1)):
                raise SceneError("traffic light confidence outside [0, 1]")
        if not np.isfinite(self.values).all():
            raise SceneError(f"{self.name}: non-finite values")


@dataclass
class Scene:
    modalities: dict[str, Modality]
    future: np.ndarray
    ego_index: int = 0
    scene_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.future = np.asarray(self.future, dtype=np.float64)
        A = self.num_agents
        for m in self.modalities.values():
            if m.values.shape[0] != A:
                raise SceneError(f"{m.name}: {m.values.shape[0]} agents, history has {A}")
        if self.future.ndim != 3 or self.future.shape[0] != A or self.future.shape[2] != 2:
            raise SceneError(f"future must be [A, T_f, 2] with A={A}, got {self.future.shape}")

    @property
    def num_agents(self) -> int:
        return self.modalities["history"].values.shape[0]

    def __getitem__(self, name: str) -> Modality:
        return self.modalities[name]

    def validate(self) -> None:
        for m in self.modalities.values():
            m.validate()

    def copy(self) -> "Scene":
        return Scene({k: m.copy() for k, m in self.modalities.items()}, self.future.copy(),
                     self.ego_index, self.scene_id, dict(self.meta))

    def select(self, rows) -> "Scene":
        """Scene restricted to the given agent rows."""
        rows = np.asarray(rows)
        mods = {k: Modality(k, m.values[rows], m.mask[rows]) for k, m in self.modalities.items()}
        return Scene(mods, self.future[rows], 0, self.scene_id, dict(self.meta))


# ----------------------------------------------------------------------------
# frame of reference


def current_pose(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(xy [A, 2], heading [A], valid [A]) at the current timestep."""
    h = scene["history"]
    cur = h.values[:, -1, 0]
    return cur[:, :2].copy(), np.arctan2(cur[:, 8], cur[:, 9]), h.mask[:, -1, 0].copy()


def _rotate(vx, vy, c, s):
    return c * vx + s * vy, -s * vx + c * vy


def _transform_values(values: np.ndarray, mask: np.ndarray, name: str,
                      origin: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Translate by -origin then rotate by -theta; origin [A, 2] and theta [A] per row."""
    out = values.copy()
    points, vectors, heading = _GEOMETRY[name]
    c = np.cos(theta)[:, None, None]
    s = np.sin(theta)[:, None, None]
    ox = origin[:, 0][:, None, None]
    oy = origin[:, 1][:, None, None]
    for i, j in points:
        out[..., i], out[..., j] = _rotate(values[..., i] - ox, values[..., j] - oy, c, s)
    for i, j in vectors:
        out[..., i], out[..., j] = _rotate(values[..., i], values[..., j], c, s)
    if heading is not None:
        si, ci = heading
        hs, hc = values[..., si], values[..., ci]
        out[..., si] = hs * c - hc * s
        out[..., ci] = hc * c + hs * s
    return np.where(mask[..., None], out, values)


def transform_points(points: np.ndarray, origin: np.ndarray, theta) -> np.ndarray:
    """World -> local for [..., 2] points with a single pose."""
    c, s = np.cos(theta), np.sin(theta)
    d = points - origin
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def inverse_transform_points(points: np.ndarray, origin: np.ndarray, theta) -> np.ndarray:
    """Local -> world for [..., 2] points with a single pose."""
    c, s = np.cos(theta), np.sin(theta)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x - s * y + origin[0], s * x + c * y + origin[1]], axis=-1)


def _transform_scene(scene: Scene, origin: np.ndarray, theta: np.ndarray) -> Scene:
    mods = {
        k: Modality(k, _transform_values(m.values, m.mask, k, origin, theta), m.mask.copy())
        for k, m in scene.modalities.items()
    }
    c = np.cos(theta)[:, None]
    s = np.sin(theta)[:, None]
    fx = scene.future[..., 0] - origin[:, 0][:, None]
    fy = scene.future[..., 1] - origin[:, 1][:, None]
    future = np.stack(_rotate(fx, fy, c, s), axis=-1)
    return Scene(mods, future, scene.ego_index, scene.scene_id, dict(scene.meta))


def to_ego_frame(scene: Scene, ego_index: int | None = None) -> Scene:
    """Center and rotate the whole scene on one agent's current pose."""
    ego = scene.ego_index if ego_index is None else ego_index
    xy, heading, valid = current_pose(scene)
    if not 0 <= ego < scene.num_agents:
        raise SceneError(f"ego index {ego} out of range for {scene.num_agents} agents")
    if not valid[ego]:
        raise SceneError(f"ego agent {ego} has no valid current state")
    A = scene.num_agents
    origin = np.repeat(xy[ego][None], A, axis=0)
    theta = np.full(A, heading[ego])
    out = _transform_scene(scene, origin, theta)
    out.ego_index = ego
    return out


def to_agent_frames(scene: Scene) -> tuple[Scene, np.ndarray, np.ndarray]:
    """Express row ``a`` of every modality in agent ``a``'s own frame.

    Returns the transformed scene and the per-agent poses (origin [A, 2],
    heading [A]) needed to map predictions back to the world frame.
    """
    xy, heading, valid = current_pose(scene)
    if not valid.all():
        raise SceneError(f"agents {np.flatnonzero(~valid).tolist()} have no valid current state")
    return _transform_scene(scene, xy, heading), xy, heading


# ----------------------------------------------------------------------------
# projection and token assembly


def project(values, weight: Tensor, bias: Tensor, mask=None) -> Tensor:
    """relu(W x + b) over the last axis; masked cells are zeroed."""
    x = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=weight.dtype))
    if x.shape[-1] != weight.shape[1]:
        raise nx.DimensionError(
            f"projection expects feature size {weight.shape[1]}, got input shape {x.shape}")
    out = nx.relu(nx.linear(x, weight, bias))
    if mask is not None:
        out = nx.mul(out, np.asarray(mask, dtype=out.dtype)[..., None])
    return out


@dataclass
class TokenSequence:
    """Flattened tokens [A, L, D] with per-token provenance.

    ``modality``, ``t`` and ``s`` give, for token l, the source modality
    index and the (t, s) cell it came from (shared by all agents).
    """

    tokens: Tensor
    mask: np.ndarray
    modality: np.ndarray
    t: np.ndarray
    s: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class TokenGrid:
    """Tokens on a common [A, T, S, D] grid for factorized attention."""

    tokens: Tensor
    mask: np.ndarray
    modality: np.ndarray
    s: np.ndarray
    names: tuple[str, ...] = ()


def _check_consistent(grids):
    A = {g.shape[0] for _, g, _ in grids}
    D = {g.shape[-1] for _, g, _ in grids}
    if len(A) != 1:
        raise SceneError(f"inconsistent agent counts across modalities: {sorted(A)}")
    if len(D) != 1:
        raise SceneError(f"modalities not projected to a common width: {sorted(D)}")


def concat_modalities(grids, factorized: bool = False):
    """Concatenate projected modalities.

    ``grids`` is a sequence of (name, tokens [A, T_m, S_m, D], mask [A, T_m, S_m]).
    Multi-axis (default) flattens each to T_m*S_m tokens and concatenates along L.
    Factorized tiles T=1 modalities to the common T and concatenates along S.
    """
    grids = list(grids)
    if not grids:
        raise SceneError("no modalities to concatenate")
    _check_consistent(grids)
    names = tuple(n for n, _, _ in grids)
    if not factorized:
        toks, masks, mod, ts, ss = [], [], [], [], []
        for i, (_, g, m) in enumerate(grids):
            A, T, S, D = g.shape
            toks.append(nx.reshape(g, (A, T * S, D)))
            masks.append(np.asarray(m, bool).reshape(A, T * S))
            tt, sv = np.meshgrid(np.arange(T), np.arange(S), indexing="ij")
            mod.append(np.full(T * S, i))
            ts.append(tt.ravel())
            ss.append(sv.ravel())
        tokens = toks[0] if len(toks) == 1 else nx.concat(toks, axis=1)
        return TokenSequence(tokens, np.concatenate(masks, axis=1), np.concatenate(mod),
                             np.concatenate(ts), np.concatenate(ss), names)
    lengths = {g.shape[1] for _, g, _ in grids if g.shape[1] != 1}
    if len(lengths) > 1:
        raise SceneError(f"modalities disagree on temporal length: {sorted(lengths)}")
    T = lengths.pop() if lengths else 1
    toks, masks, mod, ss = [], [], [], []
    for i, (_, g, m) in enumerate(grids):
        A, Tm, S, D = g.shape
        m = np.asarray(m, bool)
        if Tm != T:
            g = nx.broadcast_to(g, (A, T, S, D))
            m = np.broadcast_to(m, (A, T, S))
        toks.append(g)
        masks.append(m)
        mod.append(np.full(S, i))
        ss.append(np.arange(S))
    tokens = toks[0] if len(toks) == 1 else nx.concat(toks, axis=2)
    return TokenGrid(tokens, np.ascontiguousarray(np.concatenate(masks, axis=2)),
                     np.concatenate(mod), np.concatenate(ss), names)


def add_positional(seq: TokenSequence, tables) -> TokenSequence:
    """Add each token's learned embedding, looked up by its (t, s) slot.

    ``tables`` maps modality name to a Tensor [T_m * S_m, D]; row t*S_m + s
    holds the embedding of slot (t, s).
    """
    pieces, offset, index = [], 0, np.empty(seq.length, dtype=np.int64)
    for i, name in enumerate(seq.names):
        table = tables[name]
        sel = seq.modality == i
        S = int(seq.s[sel].max()) + 1 if sel.any() else 1
        rows = seq.t[sel] * S + seq.s[sel]
        if sel.any() and rows.max() >= table.shape[0]:
            raise SceneError(f"positional table for {name} has {table.shape[0]} rows, needs {rows.max() + 1}")
        index[sel] = offset + rows
        pieces.append(table)
        offset += table.shape[0]
    stacked = pieces[0] if len(pieces) == 1 else nx.concat(pieces, axis=0)
    emb = nx.getitem(stacked, index)
    return TokenSequence(nx.add(seq.tokens, emb), seq.mask, seq.modality, seq.t, seq.s, seq.names)
