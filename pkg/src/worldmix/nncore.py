"""Reverse-mode tape autodiff over float64 numpy arrays.

Everything downstream (world models, graph processor, losses) is built from
the fixed op set in this module. Each op computes its value eagerly with
numpy and, when a tape is active and gradients are needed, records a
vector-Jacobian callback. backward() walks the tape in reverse execution
order and accumulates d(loss)/d(leaf) into every requires_grad leaf.

The tape is thread-local: concurrent trainers on separate threads never see
each other's records. Ops called with no active tape run as plain numpy
(inference mode).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class Tensor:
    """A float64 array with an optional gradient buffer.

    requires_grad marks trainable leaves. needs_grad is internal: it marks
    tensors through which gradients must flow (leaves and anything computed
    from them under an active tape).
    """

    __slots__ = ("data", "requires_grad", "needs_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.needs_grad = self.requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class ComputeTape:
    """Execution-ordered op records: (output, inputs, vjp callback)."""

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    """The innermost open tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def tape():
    """Open a ComputeTape; ops inside the block record onto it."""
    t = ComputeTape()
    stack = _tape_stack()
    stack.append(t)
    try:
        yield t
    finally:
        stack.pop()


def _make(out_data, inputs, vjp):
    """Wrap an op result, recording it when a tape is active and needed."""
    out = Tensor(out_data)
    t = active_tape()
    if t is not None and any(x.needs_grad for x in inputs):
        out.needs_grad = True
        t.entries.append((out, inputs, vjp))
    return out


def backward(tape_obj: ComputeTape, loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from loss.

    Gradients accumulate into existing .grad buffers; callers zero params
    between steps. loss must be a scalar produced on this tape.
    """
    if not isinstance(tape_obj, ComputeTape):
        raise TypeError("backward expects a ComputeTape as its first argument")
    if len(tape_obj.entries) == 0:
        raise ValueError("backward on an empty tape: no ops were recorded")
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    produced = {id(out) for out, _, _ in tape_obj.entries}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")

    grads = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, vjp in reversed(tape_obj.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.needs_grad:
                continue
            if inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# op set
# ---------------------------------------------------------------------------


def _as2d(name, t):
    if t.data.ndim != 2:
        raise ValueError(f"{name} needs a 2-D tensor, got shape {t.data.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; accepts 2Dx2D, 1Dx2D and 2Dx1D."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ValueError(f"matmul needs 1-D or 2-D tensors, got {ad.shape} and {bd.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise ValueError(f"matmul inner dimensions differ: {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        return g @ bd.T, ad.T @ g

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add needs matching shapes, got {a.data.shape} and {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"hadamard needs matching shapes, got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient into c)."""
    c = float(c)
    return _make(t.data * c, (t,), lambda g: (g * c,))


def transpose(t: Tensor) -> Tensor:
    _as2d("transpose", t)
    return _make(t.data.T.copy(), (t,), lambda g: (g.T,))


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (t,), lambda g: (g * out * (1.0 - out),))


def softplus(t: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; strictly positive for finite x."""
    x = t.data
    out = np.logaddexp(0.0, x)
    # d softplus / dx is the logistic function
    grad = np.empty_like(x)
    pos = x >= 0
    grad[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    grad[~pos] = ex / (1.0 + ex)
    return _make(out, (t,), lambda g: (g * grad,))


def relu(t: Tensor) -> Tensor:
    x = t.data
    mask = x > 0
    return _make(np.where(mask, x, 0.0), (t,), lambda g: (g * mask,))


def log(t: Tensor) -> Tensor:
    x = t.data
    if np.any(x <= 0):
        raise ValueError("log needs strictly positive entries")
    return _make(np.log(x), (t,), lambda g: (g / x,))


def softmax(v: Tensor, temperature: float = 1.0) -> Tensor:
    """Stable softmax of a 1-D tensor at the given temperature (> 0)."""
    if v.data.ndim != 1:
        raise ValueError(f"softmax needs a 1-D tensor, got shape {v.data.shape}")
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    z = v.data / temperature
    z = z - np.max(z)
    e = np.exp(z)
    y = e / e.sum()

    def vjp(g):
        return ((g - np.dot(g, y)) * y / temperature,)

    return _make(y, (v,), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two 1-D vectors; rejects zero-norm inputs."""
    ad, bd = a.data, b.data
    if ad.ndim != 1 or bd.ndim != 1 or ad.shape != bd.shape:
        raise ValueError(f"cosine_similarity needs matching 1-D vectors, got {ad.shape} and {bd.shape}")
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity of a zero-norm vector is undefined")
    s = float(np.dot(ad, bd) / (na * nb))
    out = min(1.0, max(-1.0, s))  # guard fp spill past the unit interval

    def vjp(g):
        ga = g * (bd / (na * nb) - s * ad / (na * na))
        gb = g * (ad / (na * nb) - s * bd / (nb * nb))
        return ga, gb

    return _make(np.float64(out), (a, b), vjp)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target], numerically stable, scalar output."""
    x = logits.data
    if x.ndim != 1:
        raise ValueError(f"cross_entropy needs 1-D logits, got shape {x.shape}")
    target = int(target)
    if not 0 <= target < x.shape[0]:
        raise ValueError(f"cross_entropy target {target} out of range for {x.shape[0]} classes")
    m = float(np.max(x))
    lse = m + math.log(float(np.exp(x - m).sum()))
    loss = lse - float(x[target])

    def vjp(g):
        p = np.exp(x - m)
        p /= p.sum()
        p[target] -= 1.0
        return (g * p,)

    return _make(np.float64(loss), (logits,), vjp)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Summed cross-entropy of each logits row against its target index."""
    x = logits.data
    _as2d("cross_entropy_rows", logits)
    ids = np.asarray(targets, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != x.shape[0]:
        raise ValueError(f"cross_entropy_rows needs one target per row: {x.shape} vs {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise ValueError("cross_entropy_rows target index out of range")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = float((lse - x[np.arange(x.shape[0]), ids]).sum())

    def vjp(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(x.shape[0]), ids] -= 1.0
        return (g * p,)

    return _make(np.float64(loss), (logits,), vjp)


def sum_all(t: Tensor) -> Tensor:
    x = t.data
    return _make(np.float64(x.sum()), (t,), lambda g: (np.full_like(x, float(g)),))


def mean_all(t: Tensor) -> Tensor:
    x = t.data
    n = x.size
    return _make(np.float64(x.mean()), (t,), lambda g: (np.full_like(x, float(g) / n),))


def mean_rows(t: Tensor) -> Tensor:
    """Column means of a 2-D tensor: (n, d) -> (d,)."""
    _as2d("mean_rows", t)
    x = t.data
    n = x.shape[0]
    return _make(x.mean(axis=0), (t,), lambda g: (np.tile(g / n, (n, 1)),))


def add_row(m: Tensor, v: Tensor) -> Tensor:
    """Add a (d,) vector to every row of an (n, d) matrix."""
    _as2d("add_row", m)
    if v.data.ndim != 1 or v.data.shape[0] != m.data.shape[1]:
        raise ValueError(f"add_row needs a (d,) vector matching {m.data.shape}, got {v.data.shape}")
    return _make(m.data + v.data[None, :], (m, v), lambda g: (g, g.sum(axis=0)))


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradient scatter-adds back into it."""
    _as2d("take_rows", table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"take_rows needs a 1-D index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(f"take_rows index out of range for table with {table.data.shape[0]} rows")
    tdata = table.data

    def vjp(g):
        gt = np.zeros_like(tdata)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(tdata[idx].copy(), (table,), vjp)


def stack(scalars) -> Tensor:
    """Pack scalar tensors into a 1-D vector."""
    scalars = list(scalars)
    if not scalars:
        raise ValueError("stack needs at least one scalar")
    for s in scalars:
        if s.data.shape != ():
            raise ValueError(f"stack needs scalar tensors, got shape {s.data.shape}")
    out = np.array([s.data for s in scalars], dtype=np.float64)

    def vjp(g):
        return tuple(np.float64(g[i]) for i in range(len(scalars)))

    return _make(out, tuple(scalars), vjp)


def degree_normalize(e: Tensor) -> Tensor:
    """Symmetric degree normalization D^(-1/2) E D^(-1/2) of a square matrix.

    Every row sum (degree) must be strictly positive; the offending node
    index is named otherwise.
    """
    _as2d("degree_normalize", e)
    x = e.data
    if x.shape[0] != x.shape[1]:
        raise ValueError(f"degree_normalize needs a square matrix, got {x.shape}")
    d = x.sum(axis=1)
    bad = np.where(d <= 0)[0]
    if bad.size:
        raise ValueError(f"degree_normalize: node {int(bad[0])} has non-positive degree {d[bad[0]]!r}")
    dh = 1.0 / np.sqrt(d)
    out = x * dh[:, None] * dh[None, :]

    def vjp(g):
        # o_ab = E_ab d_a^(-1/2) d_b^(-1/2) with d_a = sum_j E_aj. E_xy only
        # moves degree d_x, so both correction terms attach to row x.
        s = g * x
        corr = (s @ dh + s.T @ dh) * d ** -1.5
        return (g * dh[:, None] * dh[None, :] - 0.5 * corr[:, None],)

    return _make(out, (e,), vjp)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def sgd_step(params, lr: float):
    """In-place p -= lr * p.grad for every param with a gradient."""
    if not lr >= 0:
        raise ValueError(f"sgd_step lr must be >= 0, got {lr}")
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def zero_grads(params):
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0, then cosine decay to min_lr.

    lr_at(0) = 0 when warmup_steps > 0; lr_at(warmup_steps) = initial_lr;
    lr_at(total_steps and beyond) = min_lr.
    """

    initial_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if not self.initial_lr >= 0:
            raise ValueError(f"initial_lr must be >= 0, got {self.initial_lr}")
        if not self.min_lr >= 0:
            raise ValueError(f"min_lr must be >= 0, got {self.min_lr}")
        if self.min_lr > self.initial_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds initial_lr {self.initial_lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.total_steps <= self.warmup_steps:
            raise ValueError(
                f"total_steps {self.total_steps} must exceed warmup_steps {self.warmup_steps}"
            )

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        if step < self.warmup_steps:
            return self.initial_lr * step / self.warmup_steps
        if step >= self.total_steps:
            return self.min_lr
        progress = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.min_lr + (self.initial_lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
