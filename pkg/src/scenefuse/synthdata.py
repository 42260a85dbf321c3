"""Deterministic synthetic driving scenes built from unicycle kinematics.

Every agent tracks a lane centreline described by arc length: a straight
run, an optional constant-curvature arc, then another straight run. A speed
profile maps time to arc length, so positions, velocities, accelerations and
headings all follow in closed form. Traffic lights and stop lines are placed
on the lane to gate the ``stop`` and ``yield`` scenarios.

Each scene draws from its own generator seeded by ``(seed, scene index)``,
so scene ``i`` is the same however many scenes are requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from scenefuse.scene import (
    AGENT_FEATURES,
    LIGHT_FEATURES,
    ROAD_FEATURES,
    Modality,
    Scene,
    SceneError,
)

SCENARIOS = ("straight", "left-turn", "right-turn", "stop", "yield")
_DEFAULT_MIX = (("straight", 0.4), ("left-turn", 0.2), ("right-turn", 0.2), ("stop", 0.1), ("yield", 0.1))


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    agents: int = 2
    history: int = 5
    future: int = 8
    dt: float = 0.5
    interactions: int = 2
    roadgraph: int = 24
    lights: int = 2
    mix: tuple[tuple[str, float], ...] = _DEFAULT_MIX
    position_noise: float = 0.0
    speed_range: tuple[float, float] = (3.0, 10.0)
    segment_length: float = 4.0
    region: float = 40.0

    def __post_init__(self):
        if self.agents < 1:
            raise ValueError("need at least one agent per scene")
        if self.history < 2:
            raise ValueError("history length must be >= 2")
        if self.future < 1:
            raise ValueError("future length must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.interactions, self.lights) < 1:
            raise ValueError("interaction and light slot counts must be >= 1")
        if self.roadgraph < 1:
            raise ValueError("lane-tracking scenarios need at least one roadgraph slot")
        names = [n for n, _ in self.mix]
        unknown = set(names) - set(SCENARIOS)
        if unknown:
            raise ValueError(f"unknown scenarios {sorted(unknown)}")
        w = np.array([p for _, p in self.mix], dtype=float)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("scenario weights must be non-negative and sum to 1")
        lo, hi = self.speed_range
        if not 0 < lo <= hi <= 15:
            raise ValueError("speed range must lie within (0, 15]")
        if self.position_noise < 0:
            raise ValueError("noise scale must be non-negative")

    @property
    def weights(self) -> dict[str, float]:
        return dict(self.mix)


# ----------------------------------------------------------------------------
# lane geometry by arc length


@dataclass
class Path:
    """Straight, then an arc of curvature ``kappa`` over ``arc`` length, then straight."""

    origin: np.ndarray
    theta0: float
    turn_at: float = math.inf
    kappa: float = 0.0
    arc: float = 0.0

    def pose(self, s):
        """Position [..., 2] and heading [...] at arc length ``s``."""
        s = np.asarray(s, dtype=float)
        x0, y0 = self.origin
        th0 = self.theta0
        pre = np.minimum(s, self.turn_at)
        x = x0 + pre * math.cos(th0)
        y = y0 + pre * math.sin(th0)
        theta = np.full_like(s, th0)
        if self.kappa != 0.0 and math.isfinite(self.turn_at):
            u = np.clip(s - self.turn_at, 0.0, self.arc)
            th = th0 + self.kappa * u
            x = x + (np.sin(th) - math.sin(th0)) / self.kappa
            y = y - (np.cos(th) - math.cos(th0)) / self.kappa
            post = np.maximum(s - self.turn_at - self.arc, 0.0)
            th_end = th0 + self.kappa * self.arc
            x = x + post * math.cos(th_end)
            y = y + post * math.sin(th_end)
            theta = th
        return np.stack([x, y], axis=-1), theta

    def curvature(self, s):
        s = np.asarray(s, dtype=float)
        inside = (s >= self.turn_at) & (s < self.turn_at + self.arc)
        return np.where(inside, self.kappa, 0.0)


@dataclass
class Profile:
    """Arc length s(t) = v0 t - a t^2 / 2, held constant once speed reaches zero."""

    v0: float
    decel: float = 0.0

    def _t(self, t):
        t = np.asarray(t, dtype=float)
        if self.decel > 0:
            return np.minimum(t, self.v0 / self.decel)
        return t

    def s(self, t):
        tc = self._t(t)
        return self.v0 * tc - 0.5 * self.decel * tc * tc

    def v(self, t):
        return self.v0 - self.decel * self._t(t)

    def a(self, t):
        t = np.asarray(t, dtype=float)
        if self.decel > 0:
            return np.where(t < self.v0 / self.decel, -self.decel, 0.0)
        return np.zeros_like(t)


@dataclass
class AgentPlan:
    scenario: str
    path: Path
    profile: Profile
    length: float
    width: float
    lights: list = field(default_factory=list)       # (xy, state)
    stop_lines: list = field(default_factory=list)   # (p0, p1)
    extra_paths: list = field(default_factory=list)  # alternative branches drawn as lanes
    branch: int | None = None
    branch_endpoints: list | None = None


def _states(plan: AgentPlan, t: np.ndarray) -> np.ndarray:
    """Agent feature rows [len(t), 10] at times ``t`` (0 = current)."""
    s = plan.profile.s(t)
    xy, th = plan.path.pose(s)
    v = plan.profile.v(t)
    at = plan.profile.a(t)
    k = plan.path.curvature(s)
    c, sn = np.cos(th), np.sin(th)
    an = v * v * k
    out = np.zeros((len(t), len(AGENT_FEATURES)))
    out[:, 0:2] = xy
    out[:, 2] = v * c
    out[:, 3] = v * sn
    out[:, 4] = at * c - an * sn
    out[:, 5] = at * sn + an * c
    out[:, 6] = plan.length
    out[:, 7] = plan.width
    out[:, 8] = sn
    out[:, 9] = c
    return out


def _turn_path(rng, origin, theta, v, cfg: GeneratorConfig, sign: float,
               onset=(0.0, 0.25), arc=(0.5, 0.8)) -> Path:
    """Quarter turn starting at a fraction ``onset`` of the horizon distance."""
    horizon = v * cfg.future * cfg.dt
    turn_at = rng.uniform(*onset) * horizon
    radius = max(3.0, rng.uniform(*arc) * (horizon - turn_at) / (math.pi / 2))
    return Path(origin, theta, turn_at, sign / radius, radius * math.pi / 2)


def _plan_agent(rng, cfg: GeneratorConfig, scenario: str, origin, theta) -> AgentPlan:
    length = rng.uniform(4.0, 5.0)
    width = rng.uniform(1.8, 2.2)
    lo, hi = cfg.speed_range
    horizon_t = cfg.future * cfg.dt
    if scenario == "straight":
        v = rng.uniform(lo, hi)
        plan = AgentPlan(scenario, Path(origin, theta), Profile(v), length, width)
        light_s = rng.uniform(0.3, 1.0) * v * horizon_t
        plan.lights.append((plan.path.pose(light_s)[0], "green"))
    elif scenario in ("left-turn", "right-turn"):
        v = rng.uniform(max(lo, 3.0), hi)
        path = _turn_path(rng, origin, theta, v, cfg, 1.0 if scenario == "left-turn" else -1.0)
        plan = AgentPlan(scenario, path, Profile(v), length, width)
        plan.lights.append((path.pose(path.turn_at)[0], "green"))
    elif scenario == "stop":
        v0 = rng.uniform(0.5, 2.0)
        a = rng.uniform(1.2, 2.5)
        plan = AgentPlan(scenario, Path(origin, theta), Profile(v0, a), length, width)
        stop_s = v0 * v0 / (2 * a)
        _add_stop_line(plan, stop_s)
        plan.lights.append((plan.path.pose(stop_s)[0], "red"))
    elif scenario == "yield":
        v0 = rng.uniform(max(lo, 4.0), max(hi, 4.0))
        a = rng.uniform(0.2, 0.6) * (v0 - 1.0) / horizon_t
        plan = AgentPlan(scenario, Path(origin, theta), Profile(v0, a), length, width)
        light_s = rng.uniform(0.5, 1.0) * plan.profile.s(horizon_t)
        _add_stop_line(plan, light_s)
        plan.lights.append((plan.path.pose(light_s)[0], "yellow"))
    else:
        raise SceneError(f"unknown scenario {scenario!r}")
    return plan


def _add_stop_line(plan: AgentPlan, s: float) -> None:
    p, th = plan.path.pose(s)
    n = np.array([-math.sin(float(th)), math.cos(float(th))]) * 0.5 * 3.5
    plan.stop_lines.append((p - n, p + n))


def _lane_segments(path: Path, s_lo: float, s_hi: float, step: float) -> list:
    n = max(1, int(math.ceil((s_hi - s_lo) / step)))
    s = np.linspace(s_lo, s_hi, n + 1)
    pts, _ = path.pose(s)
    return [(pts[i], pts[i + 1]) for i in range(n)]


def _segment_row(p0, p1, kind: str) -> np.ndarray:
    row = np.zeros(len(ROAD_FEATURES))
    d = np.asarray(p1) - np.asarray(p0)
    norm = float(np.hypot(d[0], d[1]))
    row[0:2] = p0
    row[2:4] = p1
    if norm > 0:
        row[4:6] = d / norm
    row[{"lane": 6, "edge": 7, "stop_line": 8}[kind]] = 1.0
    return row


def _light_row(xy, state: str) -> np.ndarray:
    row = np.zeros(len(LIGHT_FEATURES))
    row[0:2] = xy
    row[{"red": 2, "yellow": 3, "green": 4, "unknown": 5}[state]] = 1.0
    row[6] = 1.0
    return row


def _closest(rows: np.ndarray, centres: np.ndarray, anchor: np.ndarray, cap: int):
    """Up to ``cap`` rows ordered by distance of ``centres`` to ``anchor`` (stable)."""
    if len(rows) == 0:
        return rows[:0]
    d = np.hypot(centres[:, 0] - anchor[0], centres[:, 1] - anchor[1])
    order = np.argsort(d, kind="stable")[:cap]
    return rows[order]


# ----------------------------------------------------------------------------
# scene assembly


def _scene_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def _place_agents(rng, cfg: GeneratorConfig):
    origins, headings = [], []
    for _ in range(cfg.agents):
        for _attempt in range(100):
            p = rng.uniform(-cfg.region / 2, cfg.region / 2, size=2)
            if all(np.hypot(*(p - q)) > 8.0 for q in origins):
                break
        origins.append(p)
        headings.append(rng.uniform(-math.pi, math.pi))
    return origins, headings


def _assemble(cfg: GeneratorConfig, plans: list[AgentPlan], scene_id: str, rng) -> Scene:
    A, Th, Tf = len(plans), cfg.history, cfg.future
    t_hist = (np.arange(Th) - (Th - 1)) * cfg.dt
    t_fut = np.arange(1, Tf + 1) * cfg.dt
    hist = np.stack([_states(p, t_hist) for p in plans])          # [A, Th, 10]
    fut = np.stack([_states(p, t_fut)[:, :2] for p in plans])      # [A, Tf, 2]
    if cfg.position_noise > 0:
        hist[..., 0:2] += rng.normal(0.0, cfg.position_noise, hist[..., 0:2].shape)
        fut = fut + rng.normal(0.0, cfg.position_noise, fut.shape)
    cur = hist[:, -1, 0:2]

    # roadgraph pool shared by all agents
    road_rows, road_mid = [], []
    for p in plans:
        # lanes run from one segment behind the current pose to past the horizon;
        # a branch lane starts where it leaves the travelled path
        s_hi = float(p.profile.s(t_fut[-1])) + 2 * cfg.segment_length
        spans = [(p.path, -cfg.segment_length)]
        spans += [(path, min(path.turn_at, p.path.turn_at)) for path in p.extra_paths]
        for path, s_lo in spans:
            for a, b in _lane_segments(path, s_lo, s_hi, cfg.segment_length):
                road_rows.append(_segment_row(a, b, "lane"))
                road_mid.append(0.5 * (a + b))
        for a, b in p.stop_lines:
            road_rows.append(_segment_row(a, b, "stop_line"))
            road_mid.append(0.5 * (a + b))
    road_rows = np.array(road_rows)
    road_mid = np.array(road_mid)
    light_rows = np.array([_light_row(xy, st) for p in plans for xy, st in p.lights]).reshape(-1, len(LIGHT_FEATURES))

    Si, Sr, St = cfg.interactions, cfg.roadgraph, cfg.lights
    inter = np.zeros((A, Th, Si, len(AGENT_FEATURES)))
    inter_m = np.zeros((A, Th, Si), dtype=bool)
    road = np.zeros((A, 1, Sr, len(ROAD_FEATURES)))
    road_m = np.zeros((A, 1, Sr), dtype=bool)
    light = np.zeros((A, Th, St, len(LIGHT_FEATURES)))
    light_m = np.zeros((A, Th, St), dtype=bool)
    for a in range(A):
        others = np.array([b for b in range(A) if b != a], dtype=np.int64)
        chosen = _closest(others, cur[others] if len(others) else np.zeros((0, 2)), cur[a], Si)
        for j, b in enumerate(chosen):
            inter[a, :, j] = hist[b]
            inter_m[a, :, j] = True
        idx = _closest(np.arange(len(road_rows)), road_mid, cur[a], Sr)
        road[a, 0, :len(idx)] = road_rows[idx]
        road_m[a, 0, :len(idx)] = True
        idx = _closest(np.arange(len(light_rows)), light_rows[:, 0:2], cur[a], St)
        light[a, :, :len(idx)] = light_rows[idx][None]
        light_m[a, :, :len(idx)] = True

    mods = {
        "history": Modality("history", hist[:, :, None, :], np.ones((A, Th, 1), dtype=bool)),
        "interactions": Modality("interactions", inter, inter_m),
        "roadgraph": Modality("roadgraph", road, road_m),
        "traffic_lights": Modality("traffic_lights", light, light_m),
    }
    meta = {"scenarios": [p.scenario for p in plans]}
    if any(p.branch is not None for p in plans):
        meta["branch"] = [p.branch for p in plans]
        meta["branch_endpoints"] = [p.branch_endpoints for p in plans]
    return Scene(mods, fut, 0, scene_id, meta)


def generate_scene(cfg: GeneratorConfig, index: int) -> Scene:
    rng = _scene_rng(cfg.seed, index)
    names = [n for n, _ in cfg.mix]
    probs = np.array([w for _, w in cfg.mix])
    origins, headings = _place_agents(rng, cfg)
    plans = []
    for a in range(cfg.agents):
        scenario = names[int(rng.choice(len(names), p=probs))]
        plans.append(_plan_agent(rng, cfg, scenario, origins[a], headings[a]))
    return _assemble(cfg, plans, f"{cfg.seed}-{index}", rng)


def generate(cfg: GeneratorConfig, n_scenes: int, start: int = 0) -> list[Scene]:
    """Scenes ``start .. start + n_scenes - 1`` of the stream defined by ``cfg``."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    return [generate_scene(cfg, i) for i in range(start, start + n_scenes)]


# ----------------------------------------------------------------------------
# bimodal fork task


def _fork_plan(rng, cfg: GeneratorConfig, origin, theta, branches: int) -> AgentPlan:
    lo, hi = cfg.speed_range
    v = rng.uniform(max(lo, 3.0), hi)
    straight = Path(origin, theta)
    turn = _turn_path(rng, origin, theta, v, cfg, 1.0, onset=(0.2, 0.2), arc=(0.65, 0.65))
    profile = Profile(v)
    end_s = float(profile.s(cfg.future * cfg.dt))
    ends = [straight.pose(end_s)[0].tolist(), turn.pose(end_s)[0].tolist()]
    if branches == 1:
        plan = AgentPlan("straight", straight, profile, rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.2))
        plan.branch, plan.branch_endpoints = 0, [ends[0], ends[0]]
        return plan
    branch = int(rng.integers(2))
    length, width = rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.2)
    chosen, other = (straight, turn) if branch == 0 else (turn, straight)
    plan = AgentPlan("fork", chosen, profile, length, width, extra_paths=[other])
    plan.lights.append((straight.pose(turn.turn_at)[0], "green"))
    plan.branch, plan.branch_endpoints = branch, ends
    return plan


def bimodal_scene(cfg: GeneratorConfig, index: int, branches: int = 2) -> Scene:
    rng = _scene_rng(cfg.seed, index, stream=1)
    origins, headings = _place_agents(rng, cfg)
    plans = [_fork_plan(rng, cfg, origins[a], headings[a], branches) for a in range(cfg.agents)]
    return _assemble(cfg, plans, f"{cfg.seed}-fork-{index}", rng)


def bimodal_split(cfg: GeneratorConfig, n_scenes: int, start: int = 0, branches: int = 2) -> list[Scene]:
    """Scenes whose agents reach a fork and take the straight or left branch with equal odds.

    ``branches=1`` removes the fork and leaves a plain straight scenario.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if branches not in (1, 2):
        raise ValueError("branches must be 1 or 2")
    return [bimodal_scene(cfg, i, branches) for i in range(start, start + n_scenes)]
