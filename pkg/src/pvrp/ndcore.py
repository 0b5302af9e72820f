"""A small reverse-mode autodiff core on top of numpy.

Tensors record the operation that produced them; ``loss.backward()`` walks
the graph in reverse topological order and accumulates ``.grad`` on every
tensor that requires it.  Only the operations the routing model needs are
provided.  Broadcasting follows numpy; gradients are summed back to the
operand shapes.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e9
LN_EPS = 1e-5

_default_dtype = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    """A softmax row had no unmasked entry."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(np.array(data, dtype=dtype or _default_dtype), requires_grad=True, name=name)


def tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * a.data / b.data**2, b.shape)),
    )


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0).astype(a.data.dtype, copy=False), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# --- reductions and shape ops ----------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(y), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape) -> Tensor:
    a = tensor(a)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, a.shape),))


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [tensor(t) for t in items]
    data = np.concatenate([t.data for t in items], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tuple(items), back)


def index(a, idx) -> Tensor:
    """``a[idx]`` with numpy (basic or advanced) indexing."""
    a = tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def take_along(a, idx: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient scatter-add."""
    a = tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        full_idx = list(np.indices(idx.shape, sparse=True))
        full_idx[axis] = idx
        np.add.at(out, tuple(full_idx), g)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis), (a,), back)


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def linear(x, W, b=None) -> Tensor:
    """y = x W (+ b)."""
    x, W = tensor(x), tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    else:
        y = matmul(x, W)
    return y if b is None else add(y, b)


# --- normalisation / activations --------------------------------------------

def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if not np.broadcast_to(mask, x.shape).any(axis=-1).all():
        raise MaskError("softmax over a fully masked row")
    return np.where(mask, x, MASK_FILL)


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis; masked entries (mask False) come out exactly 0."""
    x = tensor(x)
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def log_softmax_rows(x, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked entries carry no gradient."""
    x = tensor(x)
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = z - np.log(s)
    y = e / s

    def back(g):
        gx = g - y * g.sum(axis=-1, keepdims=True)
        if mask is not None:
            gx = np.where(mask, gx, 0.0)
        return (gx,)

    return _make(out, (x,), back)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def back(g):
        gxhat = g * gain.data
        gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)

    return _make(y, (x, gain, bias), back)


def ffn(x, W1, W2, b1=None, b2=None) -> Tensor:
    """Two-layer perceptron with a ReLU hidden layer."""
    return linear(relu(linear(x, W1, b1)), W2, b2)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    return swapaxes(reshape(x, (*lead, L, heads, d // heads)), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dk = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, L, H * dk))


def attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    dk = Q.shape[-1]
    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / math.sqrt(dk))
    return matmul(softmax_rows(scores, mask), V)


def mha(q, k, v, Wq, Wk, Wv, Wo, heads: int, mask=None) -> Tensor:
    """Multi-head attention; ``mask`` is boolean (..., Lq, Lk), True = attend."""
    q, k, v = tensor(q), tensor(k), tensor(v)
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"embedding width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError("q, k and v must share the embedding width")
    Q = split_heads(matmul(q, Wq), heads)
    K = split_heads(matmul(k, Wk), heads)
    V = split_heads(matmul(v, Wv), heads)
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)  # broadcast over heads
    return matmul(merge_heads(attention(Q, K, V, mask)), Wo)


# --- verification ------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    reference_dtype=None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  The
    error per coordinate is |ga - gn| / max(1e-8, |ga| + |gn|).

    The tape gradient is always taken at the parameters' own precision.  With
    ``reference_dtype`` (e.g. ``np.longdouble``) the finite differences are
    evaluated at that precision instead, which lowers their round-off floor
    well below the size of the smallest gradients of a deep graph.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    saved = [p.data for p in params]
    old_default = get_default_dtype()
    if reference_dtype is not None:
        set_default_dtype(reference_dtype)
        for p in params:
            p.data = p.data.astype(reference_dtype)
    worst = 0.0
    try:
        with no_grad():
            for p, ga_all in zip(params, analytic):
                flat = p.data.reshape(-1)
                ga_flat = ga_all.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = f().data
                    flat[i] = orig - eps
                    down = f().data
                    flat[i] = orig
                    gn = float((up - down) / (2 * eps))
                    ga = float(ga_flat[i])
                    worst = max(worst, abs(ga - gn) / max(1e-8, abs(ga) + abs(gn)))
    finally:
        set_default_dtype(old_default)
        for p, data in zip(params, saved):
            p.data = data
    return worst


# --- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; parameters without a gradient are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "pvrp-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Parameter], meta: dict | None = None) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {
                "shape": list(p.shape),
                "dtype": p.data.dtype.name,
                "values": [float(v) for v in p.data.reshape(-1)],
            }
            for name, p in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record.get('version')}")
    arrays = {
        name: np.array(entry["values"], dtype=entry.get("dtype", "float64")).reshape(entry["shape"])
        for name, entry in record["params"].items()
    }
    return arrays, record.get("meta", {})
