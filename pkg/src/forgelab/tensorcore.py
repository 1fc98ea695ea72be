"""Dense tensors with tape-based reverse-mode autodiff, plus Adam.

Every op returns a new :class:`Tensor`. When any input requires grad, the
output records its parents and a closure mapping the upstream gradient to
input gradients. :func:`backward` orders the recorded nodes into a
:class:`Tape`, walks it once in reverse and then clears it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def bw_scalar(g):
            return (g * s,)

        return _make(a.data * a.dtype.type(s), (a,), bw_scalar, "scale")
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def bw(g):
        return (-g * out * out,)

    return _make(out, (a,), bw, "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), bw, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def bw(g):
        sig = np.exp(-np.logaddexp(0.0, -x))
        return (g * sig,)

    return _make(out, (a,), bw, "softplus")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def take(a: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- linear algebra

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a 2-D ``b`` is shared across batch axes."""
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ _swap(b.data)
        if b.data.ndim == 2 and a.data.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (d_out, d_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------- normalisation

def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_np(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = log_softmax_np(a.data, axis)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, g.shape[-1])
        return gx, (g2 * xhat.reshape(g2.shape)).sum(axis=0), g2.sum(axis=0)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- losses

def cross_entropy_logits(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean token cross-entropy over positions whose target is not ``ignore_id``.

    ``logits`` is (..., V) and ``targets`` has the leading shape.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets length {tgt.shape[0]} does not match logits rows {flat.shape[0]}")
    keep = np.ones_like(tgt, dtype=bool) if ignore_id is None else tgt != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("empty loss support: every position is ignored")
    kept = tgt[keep]
    if kept.min() < 0 or kept.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    logp = log_softmax_np(flat[keep], -1)
    rows = np.arange(n)
    loss = -logp[rows, kept].mean()

    def bw(g):
        grad = np.zeros_like(flat)
        p = np.exp(logp)
        p[rows, kept] -= 1.0
        grad[keep] = p * (g / n)
        return (grad.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Mean over rows of KL(softmax(p) || softmax(q)).

    ``weights`` optionally masks rows (1 keeps, 0 drops); the mean is over kept rows.
    """
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    V = p_logits.shape[-1]
    lp = log_softmax_np(p_logits.data.reshape(-1, V), -1)
    lq = log_softmax_np(q_logits.data.reshape(-1, V), -1)
    w = np.ones(lp.shape[0], dtype=lp.dtype) if weights is None else np.asarray(weights, dtype=lp.dtype).reshape(-1)
    n = float(w.sum())
    if n == 0:
        raise ValueError("empty loss support: every position is ignored")
    pp = np.exp(lp)
    per_row = (pp * (lp - lq)).sum(axis=-1)
    loss = (per_row * w).sum() / n

    def bw(g):
        scale = (g * w / n)[:, None]
        gp = gq = None
        if p_logits.requires_grad:
            d = lp - lq
            gp = (scale * pp * (d - per_row[:, None])).reshape(p_logits.shape)
        if q_logits.requires_grad:
            gq = (scale * (np.exp(lq) - pp)).reshape(q_logits.shape)
        return gp, gq

    return _make(np.asarray(loss, dtype=p_logits.dtype), (p_logits, q_logits), bw, "kl")


# ---------------------------------------------------------------- backward

@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from a loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        return cls(order)

    def clear(self) -> None:
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self.nodes = []


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward called twice on the same graph; run a fresh forward first")
    if not loss.requires_grad:
        return
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        tape.clear()


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ParamTag:
    component: str  # "V", "P" or "L"
    layer: int | None  # selectable unit index inside the component; None for shared params
    unit: str | None = None  # e.g. "vision.block1"


class ParamStore:
    """Path-addressed parameter tensors with component tags."""

    COMPONENTS = ("V", "P", "L")

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, ParamTag] = {}

    def add(self, path: str, value, tag: ParamTag, dtype=DEFAULT_DTYPE) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        if tag.component not in self.COMPONENTS:
            raise ValueError(f"unknown component {tag.component!r} for {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))
        self._params[path] = t
        self._tags[path] = tag
        return t

    def remove(self, path: str) -> None:
        del self._params[path]
        del self._tags[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise KeyError(f"parameter path not found: {path!r}") from None

    def __len__(self) -> int:
        return len(self._params)

    def tag(self, path: str) -> ParamTag:
        return self._tags[path]

    def paths(self, component: str | None = None) -> list[str]:
        return sorted(p for p, t in self._tags.items() if component is None or t.component == component)

    def items(self):
        for p in self.paths():
            yield p, self._params[p]

    def units(self, component: str) -> list[str]:
        """Selectable units of a component ordered by layer index."""
        found = {t.unit: t.layer for t in self._tags.values() if t.component == component and t.unit is not None}
        return sorted(found, key=lambda u: found[u])

    def unit_paths(self, unit: str) -> list[str]:
        return sorted(p for p, t in self._tags.items() if t.unit == unit)

    def set_trainable(self, paths: Iterable[str]) -> None:
        active = set(paths)
        for p, t in self._params.items():
            t.requires_grad = p in active
            t.grad = None

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def clone(self) -> ParamStore:
        other = ParamStore()
        for p in self.paths():
            other.add(p, Tensor(self._params[p].data.copy()), self._tags[p])
        return other

    def state(self) -> dict[str, np.ndarray]:
        return {p: self._params[p].data for p in self.paths()}

    def numel(self, paths: Iterable[str] | None = None) -> int:
        return int(sum(self[p].size for p in (self.paths() if paths is None else paths)))


def flatten_grads(store: ParamStore, paths: Sequence[str]) -> np.ndarray:
    parts = []
    for p in paths:
        g = store[p].grad
        if g is None:
            raise ValueError(f"no gradient populated for {p!r}")
        parts.append(g.reshape(-1))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def scatter_flat(vector: np.ndarray, store: ParamStore, paths: Sequence[str]) -> dict[str, np.ndarray]:
    """Split a flat vector into per-path arrays shaped like the parameters."""
    total = store.numel(paths)
    if vector.shape[0] != total:
        raise DimensionError(f"flat vector has length {vector.shape[0]}, paths need {total}")
    out, offset = {}, 0
    for p in paths:
        t = store[p]
        out[p] = vector[offset : offset + t.size].reshape(t.shape)
        offset += t.size
    return out


def clip_grad_norm(store: ParamStore, paths: Sequence[str], max_norm: float) -> float:
    total = np.sqrt(sum(float((store[p].grad.astype(np.float64) ** 2).sum()) for p in paths if store[p].grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in paths:
            if store[p].grad is not None:
                store[p].grad = store[p].grad * scale
    return total


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, lr: float, active_paths: Iterable[str]) -> None:
    """One bias-corrected Adam update on ``active_paths``; other parameters are untouched."""
    paths = sorted(active_paths)
    for p in paths:
        if store[p].grad is None:
            raise ValueError(f"active path {p!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in paths:
        t = store[p]
        g = t.grad
        m = state.m.get(p)
        if m is None:
            m = np.zeros_like(t.data)
            state.v[p] = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[p] + (1.0 - b2) * g * g
        state.m[p], state.v[p] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = (t.data - update).astype(t.dtype, copy=False)
        _check_finite(new, f"adam_step on {p}")
        t.data = new
