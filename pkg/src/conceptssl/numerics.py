"""Float64 tensors with a small reverse-mode tape, plus gradient checking.

Primitives are deliberately coarse (a whole multi-head attention is one node)
so the recorded graph for a training step stays short.  Every op accepts
``Tensor`` or array-likes and returns a ``Tensor``; when no input requires a
gradient nothing is recorded, which is how teacher-side passes stay off the
tape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, NumericalFailureError

DTYPE = np.float64
LOG_FLOOR = 1e-300


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise InvalidArgumentError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None) -> "Graph":
        graph = Graph(self)
        graph.backward(seed)
        return graph


class Graph:
    """Nodes reachable from ``output`` that carry gradients, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.backward_fn is None]

    def backward(self, seed=None, visit: Callable[[Tensor], None] | None = None):
        out = self.output
        if seed is None:
            if out.data.size != 1:
                raise InvalidArgumentError("backward without a seed needs a scalar output")
            seed = np.ones_like(out.data)
        for node in self.nodes:
            node.grad = None
        out.grad = np.asarray(seed, dtype=DTYPE)
        for node in reversed(self.nodes):
            if visit is not None:
                visit(node)
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name="") -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _node(data, parents, backward_fn, op) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    a = as_tensor(a)
    x = np.maximum(a.data, floor)
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _node(np.take(a.data, index, axis=axis), (a,), backward, "take")


def concat(items: Sequence, axis: int) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    bounds = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in items], axis=axis), items,
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a, w) -> Tensor:
    """``a[..., k] @ w[k, n]``; ``w`` must be 2-D."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2:
        raise InvalidArgumentError("matmul expects a 2-D right operand")
    if a.shape[-1] != w.shape[0]:
        raise InvalidArgumentError(f"matmul shape mismatch {a.shape} @ {w.shape}")
    k, n = w.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ w.data).reshape(*a.shape[:-1], n)

    def backward(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw

    return _node(out, (a, w), backward, "matmul")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx = g * gamma.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward, "layer_norm")


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(x, w_qkv, heads: int) -> np.ndarray:
    """Attention probabilities ``(..., heads, N, N)`` of ``attention`` (no tape)."""
    x, w_qkv = np.asarray(x, DTYPE), np.asarray(w_qkv, DTYPE)
    q, k, _ = _split_qkv(x @ w_qkv, heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    return _softmax_last(q @ np.swapaxes(k, -1, -2) * scale)


def _split_qkv(qkv, heads):
    *lead, n, three_d = qkv.shape
    d = three_d // 3
    parts = qkv.reshape(*lead, n, 3, heads, d // heads)
    parts = np.moveaxis(parts, -3, 0)          # (3, ..., N, H, dh)
    parts = np.swapaxes(parts, -2, -3)         # (3, ..., H, N, dh)
    return parts[0], parts[1], parts[2]


def _merge_heads(t):
    t = np.swapaxes(t, -2, -3)                 # (..., N, H, dh)
    return t.reshape(*t.shape[:-2], -1)


def attention(x, w_qkv, w_out, heads: int) -> Tensor:
    """Multi-head self-attention across axis -2 of ``x`` (bias-free projections)."""
    x, w_qkv, w_out = as_tensor(x), as_tensor(w_qkv), as_tensor(w_out)
    d = x.shape[-1]
    if d % heads:
        raise InvalidArgumentError(f"width {d} not divisible by {heads} heads")
    if w_qkv.shape != (d, 3 * d) or w_out.shape != (d, d):
        raise InvalidArgumentError("attention weight shapes do not match the input width")
    xd = x.data
    x2 = xd.reshape(-1, d)
    qkv = (x2 @ w_qkv.data).reshape(*xd.shape[:-1], 3 * d)
    q, k, v = _split_qkv(qkv, heads)
    scale = 1.0 / math.sqrt(d // heads)
    a = _softmax_last(q @ np.swapaxes(k, -1, -2) * scale)
    o = _merge_heads(a @ v)
    o2 = o.reshape(-1, d)
    out = (o2 @ w_out.data).reshape(xd.shape)

    def backward(g):
        g2 = g.reshape(-1, d)
        g_wout = o2.T @ g2
        go = (g2 @ w_out.data.T).reshape(o.shape)
        go = np.swapaxes(go.reshape(*o.shape[:-1], heads, d // heads), -2, -3)
        ga = go @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(a, -1, -2) @ go
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        gqkv = np.concatenate([_merge_heads(gq), _merge_heads(gk), _merge_heads(gv)], axis=-1)
        gqkv2 = gqkv.reshape(-1, 3 * d)
        g_wqkv = x2.T @ gqkv2
        gx = (gqkv2 @ w_qkv.data.T).reshape(xd.shape)
        return gx, g_wqkv, g_wout

    return _node(out, (x, w_qkv, w_out), backward, "attention")


# ---------------------------------------------------------------- distributions

def _check_temperature(v: Tensor, lam: float):
    if not lam > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {lam}")
    if v.data.ndim == 0 or v.data.shape[-1] == 0:
        raise InvalidArgumentError("softmax of an empty vector")


def softmax_temp(v, lam: float) -> Tensor:
    """Softmax of ``v / lam`` along the last axis, max-subtracted."""
    v = as_tensor(v)
    _check_temperature(v, lam)
    p = _softmax_last(v.data / lam)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / lam,)

    return _node(p, (v,), backward, "softmax")


def log_softmax_temp(v, lam: float) -> Tensor:
    v = as_tensor(v)
    _check_temperature(v, lam)
    z = v.data / lam
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / lam,)

    return _node(out, (v,), backward, "log_softmax")


def l2_normalize(v) -> Tensor:
    """Scale to unit Euclidean norm along the last axis."""
    v = as_tensor(v)
    if v.data.size == 0:
        raise InvalidArgumentError("cannot normalize an empty vector")
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateInputError("cannot normalize a zero (or non-finite) vector")
    y = v.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(y, (v,), backward, "l2_normalize")


def entropy(p) -> float:
    p = np.asarray(p, DTYPE)
    return float(-(p * np.log(np.maximum(p, LOG_FLOOR))).sum())


# ---------------------------------------------------------------- rng

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox counter-based generator; the same (seed, keys) always gives the same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ---------------------------------------------------------------- gradient checking

def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               eps: float = 1e-6, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` maps a dict of tensors to a scalar tensor.  Relative error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``max_coords`` checks a random subset of coordinates per parameter.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidArgumentError(f"eps {eps} outside [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    leaves = {k: parameter(v, k) for k, v in base.items()}
    out = f(leaves)
    if not np.isfinite(out.data).all():
        raise NumericalFailureError("non-finite function value at the check point")
    out.backward()
    rng = rng if rng is not None else make_rng(0)

    def evaluate(name, flat_index, delta):
        arr = base[name].copy()
        arr.reshape(-1)[flat_index] += delta
        args = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        val = f(args).item()
        if not math.isfinite(val):
            raise NumericalFailureError(f"non-finite value perturbing {name}[{flat_index}]")
        return val

    worst = 0.0
    for name, value in base.items():
        grad = leaves[name].grad
        grad = np.zeros(value.size) if grad is None else grad.reshape(-1)
        coords: Iterable[int] = range(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = rng.choice(value.size, size=max_coords, replace=False)
        for i in coords:
            numeric = (evaluate(name, i, eps) - evaluate(name, i, -eps)) / (2 * eps)
            analytic = grad[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
