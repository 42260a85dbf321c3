"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active (and touching at least one tensor that requires
gradients) are recorded on that tape; :meth:`Tape.gradient` then walks the
recorded nodes in reverse order and accumulates gradients.

Outside a tape nothing is recorded, which is the fast inference path.

Every forward op checks its output for NaN/Inf and raises
:class:`NonFiniteError` naming the op that produced it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from scenefuse import _backend

# Tolerances used by gradient checks, one set per precision mode.
TOLERANCES = {
    np.dtype(np.float64): {"fd_step": 1e-5, "rel": 1e-4},
    np.dtype(np.float32): {"fd_step": 1e-2, "rel": 5e-2},
}

MASK_FILL = -1e9


class NumericsError(Exception):
    pass


class DimensionError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"op '{op}' produced non-finite values")
        self.op = op


class DegenerateRowError(NumericsError, ValueError):
    pass


class TapeError(NumericsError, RuntimeError):
    pass


_check_finite = True


def set_check_finite(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf check (on by default)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.node_id = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Records differentiable ops executed inside ``with Tape() as tape:``."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.visits: list[int] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, node: Tensor) -> None:
        node.node_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Returns a dict keyed by ``id(tensor)`` holding gradients of leaves.
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.op != "leaf" and (loss.node_id < 0 or loss.node_id >= len(self.nodes)
                                  or self.nodes[loss.node_id] is not loss):
            raise TapeError("loss was not recorded on this tape")
        self._check_acyclic()
        self.visits = []
        leaf_grads: dict[int, np.ndarray] = {}
        if loss.op == "leaf":
            if loss.requires_grad:
                leaf_grads[id(loss)] = np.ones_like(loss.data)
            return leaf_grads
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            self.visits.append(nid)
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.op == "leaf":
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                else:
                    pid = parent.node_id
                    if pid in grads:
                        grads[pid] = grads[pid] + pg
                    else:
                        grads[pid] = pg
        return leaf_grads

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. each leaf in ``sources``; unused leaves get zeros."""
        leaf_grads = self.backward(loss)
        out = []
        for s in sources:
            g = leaf_grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g)
        return out

    def _check_acyclic(self) -> None:
        for node in self.nodes:
            for p in node.parents:
                if p.op == "leaf" or not p.requires_grad:
                    continue
                if p.node_id >= node.node_id or self.nodes[p.node_id] is not p:
                    raise TapeError(
                        f"cyclic or foreign dependency: node {node.node_id} ({node.op}) "
                        f"depends on node {p.node_id} ({p.op})"
                    )


def _finish(out: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    if _check_finite and not np.isfinite(out).all():
        raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.op = op
    t.name = None
    t.node_id = -1
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = parents
        t.backward_fn = backward_fn
        tape.record(t)
    else:
        t.requires_grad = False
        t.parents = ()
        t.backward_fn = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _finish(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _finish(out, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, "div", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return _finish(out, "relu", (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _finish(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _finish(out, "log", (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    return _finish(out, "square", (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _finish(out, "sqrt", (x,), lambda g: (0.5 * g / out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _finish(out, "clip", (x,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, "where", (a, b), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep
    return _finish(out, "dropout", (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish(out, "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _finish(out, "mean", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _finish(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))
    return _finish(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)
    return _finish(out, "broadcast_to", (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(out, "concat", xs, bw)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _finish(np.array(out, copy=True), "getitem", (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading axes with numpy broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out2 = x2 @ weight.data.T
    if bias is not None:
        out2 = out2 + bias.data
    out = out2.reshape(x.shape[:-1] + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _finish(out, "linear", parents, bw)


# ----------------------------------------------------------------------------
# normalization and probabilities


def _check_mask_rows(mask: np.ndarray) -> None:
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("softmax row has no unmasked element")


def softmax(x: Tensor, mask=None) -> Tensor:
    """Stable softmax over the last axis; masked entries get exactly zero."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        _check_mask_rows(mask)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _finish(p, "softmax", (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _finish(out, "log_softmax", (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _finish(out, "layernorm", (x, gain, bias), bw)


def masked_mean(x: Tensor, mask, axis: int) -> Tensor:
    """Mean of ``x`` over ``axis`` counting only entries where ``mask`` is true.

    ``mask`` has the shape of ``x`` without the trailing feature axis. Slices
    with no valid entry produce zeros.
    """
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    count = m.sum(axis=axis, keepdims=True)
    w = m / np.maximum(count, 1)
    out = (x.data * w).sum(axis=axis)
    return _finish(out, "masked_mean", (x,),
                   lambda g: (np.expand_dims(g, axis) * w,))


# ----------------------------------------------------------------------------
# attention


class AttentionCounter:
    """Counts query-key score entries computed by :func:`attention`, per tag."""

    _active: list["AttentionCounter"] = []

    def __init__(self):
        self.counts: dict[str, int] = {}

    def __enter__(self):
        AttentionCounter._active.append(self)
        return self

    def __exit__(self, *exc):
        AttentionCounter._active.remove(self)

    def add(self, tag: str, n: int) -> None:
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    def total(self, tag: str | None = None) -> int:
        if tag is None:
            return sum(self.counts.values())
        return self.counts.get(tag, 0)


_attention_tag = ["encoder"]


class attention_tag:
    """Context manager labelling attention calls for :class:`AttentionCounter`."""

    def __init__(self, tag: str):
        self.tag = tag

    def __enter__(self):
        _attention_tag.append(self.tag)

    def __exit__(self, *exc):
        _attention_tag.pop()


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None, allow_empty: bool = False,
              heads: int = 1) -> Tensor:
    """Scaled dot-product attention over [B, L, d] inputs.

    ``key_mask`` is boolean [B, Lk]; masked keys get exactly zero weight.
    Rows whose keys are all masked raise unless ``allow_empty``, in which case
    their output (and gradient) is zero. ``heads`` only affects counting: the
    counter records one score per (query, key) pair, not per head.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError(f"attention expects 3-axis inputs, got {q.shape}, {k.shape}, {v.shape}")
    B, Lq, dh = q.shape
    if k.shape[0] != B or k.shape[2] != dh or v.shape[:2] != k.shape[:2]:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    Lk = k.shape[1]
    if key_mask is None:
        km = np.ones((B, Lk), dtype=np.uint8)
    else:
        km = np.ascontiguousarray(np.broadcast_to(key_mask, (B, Lk)), dtype=np.uint8)
        if not allow_empty and not km.any(axis=1).all():
            raise DegenerateRowError("attention row has no unmasked key")
    for counter in AttentionCounter._active:
        counter.add(_attention_tag[-1], (B // heads) * Lq * Lk)
    scale = 1.0 / math.sqrt(dh)
    dt = np.result_type(q.dtype, k.dtype, v.dtype)
    qd = np.ascontiguousarray(q.data, dtype=dt)
    kd = np.ascontiguousarray(k.data, dtype=dt)
    vd = np.ascontiguousarray(v.data, dtype=dt)
    out, probs = _backend.kernels.attention_forward(qd, kd, vd, km, scale)

    def bw(g):
        gq, gk, gv = _backend.kernels.attention_backward(
            np.ascontiguousarray(g, dtype=dt), qd, kd, vd, probs, scale)
        return gq, gk, gv

    return _finish(out, "attention", (q, k, v), bw)


def attention_reference(q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> Tensor:
    """Attention composed from matmul/softmax primitives (no fused kernel)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), scale)
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, :]
    return matmul(softmax(scores, mask), v)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)


# ----------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step: float | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x.data`` (perturbed in place)."""
    h = TOLERANCES[np.dtype(x.dtype)]["fd_step"] if step is None else step
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, floor).

    The floor keeps gradients that are exactly zero in theory (a key bias
    under softmax, say) from being judged against finite-difference noise.
    """
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64))) / scale


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float | None = None) -> float:
    """Largest relative error between tape and finite-difference gradients over ``inputs``."""
    with Tape() as tape:
        out = fn()
        analytic = tape.gradient(out, list(inputs))
    worst = 0.0
    for x, g in zip(inputs, analytic):
        h = TOLERANCES[np.dtype(x.dtype)]["fd_step"] if step is None else step
        # central differences cannot resolve gradients below ~eps*|f|/h
        floor = max(1e-6, 1e5 * np.finfo(x.dtype).eps * max(1.0, abs(float(out.data))) / h)
        worst = max(worst, relative_error(g, numerical_gradient(fn, x, step), floor))
    return worst
