"""Winner-take-all mixture loss, AdamW with linear decay, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from scenefuse import numerics as nx
from scenefuse.decoder import MixtureTrajectory, mixture_log_prob
from scenefuse.numerics import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: str = "linear"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.decay != "linear":
            raise ValueError(f"unsupported decay {self.decay!r}; only 'linear' is available")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


class TrainingError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


def closest_mode(means, gt) -> np.ndarray:
    """Index of the mode whose mean trajectory is closest (average L2) to ``gt``.

    means [A, k, T, 2], gt [A, T, 2]; ties go to the lowest index.
    """
    mu = means.data if isinstance(means, Tensor) else np.asarray(means)
    d = np.linalg.norm(mu - np.asarray(gt)[:, None], axis=-1).mean(axis=-1)
    return np.argmin(d, axis=-1)


@dataclass
class LossTerms:
    total: Tensor
    classification: Tensor
    regression: Tensor
    selected: np.ndarray


def loss(mix: MixtureTrajectory, gt) -> LossTerms:
    """Negative log-likelihood of the closest mode plus its classification term, averaged over agents."""
    gt = np.asarray(gt, dtype=mix.means.dtype)
    sel = closest_mode(mix.means, gt)
    A = gt.shape[0]
    rows = np.arange(A)
    cls = nx.mul(nx.sum_(nx.getitem(nx.log_softmax(mix.logits), (rows, sel))), -1.0 / A)
    reg = nx.mul(nx.sum_(mixture_log_prob(mix, gt, sel)), -1.0 / A)
    return LossTerms(nx.add(cls, reg), cls, reg, sel)


def ensemble_loss(mixes, gt) -> LossTerms:
    """Summed loss over ensemble members sharing one encoder."""
    terms = [loss(m, gt) for m in mixes]
    if len(terms) == 1:
        return terms[0]
    total, cls, reg = terms[0].total, terms[0].classification, terms[0].regression
    for t in terms[1:]:
        total = nx.add(total, t.total)
        cls = nx.add(cls, t.classification)
        reg = nx.add(reg, t.regression)
    return LossTerms(total, cls, reg, np.stack([t.selected for t in terms]))


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """lr_0 * (1 - t / steps), reaching zero at ``steps``."""
    return cfg.learning_rate * (1.0 - step / cfg.steps)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data *= 1.0 - lr * c.weight_decay
            p.data -= (lr * update).astype(p.data.dtype)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    classification: list[float] = field(default_factory=list)
    regression: list[float] = field(default_factory=list)
    logged: list[tuple[int, float]] = field(default_factory=list)


def train(model, batch, cfg: TrainConfig, callback=None) -> TrainResult:
    """Optimise ``model`` on the agent rows of ``batch``; deterministic given ``cfg.seed``."""
    if batch.size == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg)
    result = TrainResult()
    model.train()
    try:
        for step in range(cfg.steps):
            rows = np.sort(rng.choice(batch.size, size=min(cfg.batch_size, batch.size), replace=False))
            sub = batch.subset(rows)
            try:
                with Tape() as tape:
                    mixes = model(sub, rng=rng)
                    terms = ensemble_loss(mixes, sub.future)
                    grads = tape.gradient(terms.total, params)
            except NonFiniteError as exc:
                raise TrainingError(step, f"operation {exc}") from exc
            value = float(terms.total.data)
            if not math.isfinite(value):
                raise TrainingError(step, repr(value))
            result.losses.append(value)
            result.classification.append(float(terms.classification.data))
            result.regression.append(float(terms.regression.data))
            opt.step(grads, learning_rate(step, cfg))
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                result.logged.append((step, value))
                log.info("step %d loss %.4f", step, value)
                if callback is not None:
                    callback(step, value)
    finally:
        model.eval()
    return result
