"""Small reverse-mode autodiff engine over numpy arrays.

Each op builds a node holding its value, its parents and a closure that
pushes the output gradient back to the parents. ``backward`` walks the
graph in reverse topological order. Ops are coarse (whole matmuls, fused
softmax / layer norm / losses) so Python overhead stays per-op, not
per-element.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_FLOOR = 1e-12
_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 op: str = "leaf", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.data.shape} ({self.op})")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.data.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x, dtype=DEFAULT_DTYPE) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(value: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)

    def bw(g):
        a._accumulate(g * c_arr)

    return _make(a.data * c_arr, (a,), "scale", bw)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    t = np.tanh(dt(_GELU_C) * x * (dt(1.0) + dt(0.044715) * x2))
    out = dt(0.5) * x * (dt(1.0) + t)

    def bw(g):
        dinner = dt(_GELU_C) * (dt(1.0) + dt(3 * 0.044715) * x2)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner
        a._accumulate(g * d)

    return _make(out, (a,), "gelu", bw)


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.data.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), "matmul", bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), "reshape", bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(np.array(out), (a,), "getitem", bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: id outside [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        weight._accumulate(full)

    return _make(weight.data[ids], (weight,), "embedding", bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), "sum", bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a._accumulate(np.full(a.shape, g / n, dtype=a.data.dtype))

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), "mean", bw)


# --------------------------------------------------------------- normalizers

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (a,), "softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs last dim {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), "layer_norm", bw)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _position_weights(mask, lead_shape: tuple[int, ...], dtype) -> tuple[np.ndarray, float]:
    if mask is None:
        w = np.ones(lead_shape, dtype=dtype)
    else:
        w = np.asarray(mask, dtype=dtype)
        if w.shape != lead_shape:
            raise ShapeError(f"mask shape {w.shape} != position shape {lead_shape}")
    count = float(w.sum())
    if count == 0:
        raise ValueError("loss has no contributing positions")
    return w, count


# -------------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets: np.ndarray, mask=None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is set."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    dt = logits.data.dtype
    w, count = _position_weights(mask, targets.shape, dt)
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        logits._accumulate((p - onehot) * (w / count * g)[..., None])

    return _make(np.asarray(loss, dtype=dt), (logits,), "cross_entropy", bw)


def mse(a, b, mask=None) -> Tensor:
    """Mean squared difference over masked positions and the last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    dt = a.data.dtype
    w, count = _position_weights(mask, a.shape[:-1], dt)
    denom = count * a.shape[-1]
    diff = a.data - b.data
    loss = (diff * diff * w[..., None]).sum() / denom

    def bw(g):
        d = diff * (2.0 * g / denom) * w[..., None]
        if a.requires_grad:
            a._accumulate(d.astype(dt))
        if b.requires_grad:
            b._accumulate((-d).astype(dt))

    return _make(np.asarray(loss, dtype=dt), (a, b), "mse", bw)


def kl_div(student: Tensor, teacher, temperature: float = 1.0, mask=None) -> Tensor:
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), averaged over masked positions.

    Gradient flows to ``student`` only; the teacher is treated as a target.
    """
    teacher = _wrap(teacher)
    if student.shape != teacher.shape:
        raise ShapeError(f"kl_div: shapes differ, {student.shape} vs {teacher.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    dt = student.data.dtype
    w, count = _position_weights(mask, student.shape[:-1], dt)
    t = dt.type(temperature)
    log_q = _log_softmax(student.data / t)
    log_p = _log_softmax(teacher.data.astype(dt) / t)
    p = np.exp(log_p)
    # clamp keeps the log finite where the teacher assigns ~0 mass
    log_p_safe = np.maximum(log_p, dt.type(np.log(LOG_FLOOR)))
    per_pos = (p * (log_p_safe - log_q)).sum(axis=-1)
    per_pos = np.maximum(per_pos, 0)
    loss = t * t * (per_pos * w).sum() / count

    def bw(g):
        q = np.exp(log_q)
        student._accumulate(((q - p) * (t * w / count * g)[..., None]).astype(dt))

    return _make(np.asarray(loss, dtype=dt), (student,), "kl_div", bw)


# ------------------------------------------------------------------ backward

def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires grad.

    Leaf gradients add onto whatever is already stored; callers zero them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
