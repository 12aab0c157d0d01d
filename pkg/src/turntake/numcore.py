"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Only the kernels the turn-taking model needs are provided. Each kernel returns
a new Tensor and records a closure mapping the output gradient to one gradient
per parent. ``backward`` replays those closures in decreasing creation index,
which is a valid topological order because a node is always created after its
inputs.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_creation = itertools.count()
_GRAD_ENABLED = True
CHECK_FINITE = True


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_index", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._index = next(_creation)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_scalar(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``out`` as a graph node; ``backward_fn(g)`` returns one grad (or None) per parent."""
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._index = next(_creation)
    t.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# Graph traversal


@dataclass
class ComputeGraph:
    """Nodes reachable from a root, ordered for the backward sweep."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            n = stack.pop()
            if id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(p for p in n._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._index, reverse=True)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def topological_index(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> ComputeGraph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    graph = graph or ComputeGraph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in graph.nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return graph


# ----------------------------------------------------------------------------
# Elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                  "mul")


def pow_scalar(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return record(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return record(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return record(out, (x,), lambda g: (g * inside,), "clip")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ----------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        if b.ndim == 2:
            k, n = b.shape
            da = g @ b.data.T
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return _unbroadcast(da, a.shape), db
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return record(out, (a, b), back, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def back(g):
        z = np.zeros_like(x.data)
        np.add.at(z, key, g)
        return (z,)

    return record(out.copy(), (x,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), back, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# Fused kernels


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) drops positions.

    A row with every position masked yields all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)
    out = out.astype(x.dtype, copy=False)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), back, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gain, bias), back, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-length temporal convolution. x: [B,S,Cin], w: [K,Cin,Cout], b: [Cout]."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"conv1d input {x.shape} does not fit kernel {w.shape}")
    K, cin, cout = w.shape
    if K % 2 == 0:
        raise DimensionError(f"conv1d kernel must be odd for same padding, got {K}")
    B, S, _ = x.shape
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    out = np.broadcast_to(b.data, (B, S, cout)).copy()
    for k in range(K):
        out += xp[:, k:k + S] @ w.data[k]

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w.data)
        g2 = g.reshape(-1, cout)
        for k in range(K):
            dxp[:, k:k + S] += g @ w.data[k].T
            dw[k] = xp[:, k:k + S].reshape(-1, cin).T @ g2
        dx = dxp[:, pad:pad + S] if pad else dxp
        return dx, dw, g2.sum(axis=0)

    return record(out, (x, w, b), back, "conv1d")


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor,
         mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over a padded batch; returns hidden states [B,S,H].

    Gate order along the 4H axis is input, forget, candidate, output. Where
    ``mask`` is False the state is carried unchanged and the output is zero.
    """
    if x.ndim != 3 or x.shape[-1] != w_ih.shape[0]:
        raise DimensionError(f"lstm input {x.shape} does not fit w_ih {w_ih.shape}")
    B, S, I = x.shape
    H = w_hh.shape[0]
    if w_ih.shape[1] != 4 * H or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm weight shapes inconsistent: {w_ih.shape} {w_hh.shape} {b.shape}")
    dt = x.dtype
    m = np.ones((B, S, 1), dt) if mask is None else np.asarray(mask, dt).reshape(B, S, 1)
    xz = (x.data.reshape(-1, I) @ w_ih.data + b.data).reshape(B, S, 4 * H)
    Whh = w_hh.data
    order = range(S - 1, -1, -1) if reverse else range(S)
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    out = np.zeros((B, S, H), dt)
    h_prev = np.empty((B, S, H), dt)
    c_prev = np.empty((B, S, H), dt)
    gates = np.empty((B, S, 4 * H), dt)
    tanh_c = np.empty((B, S, H), dt)
    for t in order:
        z = xz[:, t] + h @ Whh
        a = np.empty_like(z)
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        i, f, gc, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c_new = f * c + i * gc
        th = np.tanh(c_new)
        h_new = o * th
        mt = m[:, t]
        h_prev[:, t] = h
        c_prev[:, t] = c
        gates[:, t] = a
        tanh_c[:, t] = th
        out[:, t] = mt * h_new
        h = mt * h_new + (1 - mt) * h
        c = mt * c_new + (1 - mt) * c

    def back(g):
        dZ = np.zeros((B, S, 4 * H), dt)
        dh = np.zeros((B, H), dt)
        dc = np.zeros((B, H), dt)
        for t in reversed(order):
            mt = m[:, t]
            a = gates[:, t]
            i, f, gc, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            th = tanh_c[:, t]
            dh_new = mt * (dh + g[:, t])
            dc_new = mt * dc + dh_new * o * (1 - th * th)
            dz = dZ[:, t]
            dz[:, :H] = dc_new * gc * i * (1 - i)
            dz[:, H:2 * H] = dc_new * c_prev[:, t] * f * (1 - f)
            dz[:, 2 * H:3 * H] = dc_new * i * (1 - gc * gc)
            dz[:, 3 * H:] = dh_new * th * o * (1 - o)
            dh = dz @ Whh.T + (1 - mt) * dh
            dc = dc_new * f + (1 - mt) * dc
        dZ2 = dZ.reshape(-1, 4 * H)
        dx = (dZ2 @ w_ih.data.T).reshape(B, S, I)
        dw_ih = x.data.reshape(-1, I).T @ dZ2
        dw_hh = h_prev.reshape(-1, H).T @ dZ2
        return dx, dw_ih, dw_hh, dZ2.sum(axis=0)

    return record(out, (x, w_ih, w_hh, b), back, "lstm")


# ----------------------------------------------------------------------------
# Gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5,
               n_probes: int | None = None, rng: np.random.Generator | None = None,
               wrt: Sequence[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. With ``n_probes`` set, that many
    random coordinates per checked input are compared instead of all of them.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = fn(*leaves)
    backward(loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i in wrt:
        base = arrays[i]
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        flat = np.arange(base.size)
        if n_probes is not None and n_probes < base.size:
            flat = rng.choice(base.size, size=n_probes, replace=False)
        for j in flat:
            idx = np.unravel_index(j, base.shape)
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * h
                args = [Tensor(pert if k == i else arrays[k]) for k in range(len(arrays))]
                with no_grad():
                    vals.append(fn(*args).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
