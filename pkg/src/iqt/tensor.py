"""Small dense tensor engine with reverse-mode autodiff.

Values live in numpy arrays. Every differentiable op records its parents and a
closure that maps the output gradient to parent gradients; ``backward`` walks
the recorded graph in reverse topological order.

Leading batch axes are supported by ``matmul`` and the elementwise ops (with
numpy broadcasting), which is all the transformer stacks need.
"""

from __future__ import annotations

import contextlib
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float32
# Debug builds verify every op output is finite.
DEBUG = os.environ.get("IQT_DEBUG", "") not in ("", "0")


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf", parents=(), backward=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def backward(self):
        return backward(self)

    def zero_grad(self):
        self.grad = None

    # operator sugar
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

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, op, parents, backward_fn):
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, dtype=data.dtype, op=op)
    return Tensor(data, requires_grad=True, dtype=data.dtype, op=op, parents=parents, backward=backward_fn)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = as_tensor(b, a.dtype)
    return a, b


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), bw)


# --- reductions / shape ----------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(out, dtype=x.dtype), "sum", (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, "reshape", (x,), bw)


def swap_last(x):
    x = as_tensor(x)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(np.swapaxes(x.data, -1, -2), "transpose", (x,), bw)


def getitem(x, index):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), "getitem", (x,), bw)


def _fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, "concat", tuple(tensors), bw)


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from None

    def bw(g):
        return (_unbroadcast(g, x.shape),)

    return _result(out, "broadcast", (x,), bw)


# --- linear algebra --------------------------------------------------------


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma, x.dtype), as_tensor(beta, x.dtype)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgamma = _unbroadcast(g * xhat, (1,) * (g.ndim - 1) + (d,)).reshape(d)
        dbeta = _unbroadcast(g, (1,) * (g.ndim - 1) + (d,)).reshape(d)
        return dx.astype(x.dtype), dgamma, dbeta

    return _result(out.astype(x.dtype), "layer_norm", (x, gamma, beta), bw)


# --- graph & backward ------------------------------------------------------


@dataclass
class Graph:
    """Nodes reachable from an output, parents before children."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if not n.parents]


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return graph or Graph([])
    graph = graph or Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# --- optimisation ----------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place ADAM update with bias correction. ``params``/``grads`` are name-keyed."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return params, state


def cosine_lr(step, total_steps, lr0=2e-4):
    if total_steps <= 0:
        return lr0
    if step > total_steps:
        warnings.warn(f"step {step} beyond total_steps {total_steps}; learning rate clamped to 0", stacklevel=2)
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
