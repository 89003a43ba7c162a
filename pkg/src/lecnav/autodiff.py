"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only what the navigation networks need: dense layers (optionally stacked per
agent along a leading axis), a gated recurrent cell, softmax/KL utilities and
an Adam optimizer.  Graphs are built eagerly while gradients are enabled and
torn down by :meth:`Tensor.backward`.
"""
from __future__ import annotations

import contextlib
import json
from pathlib import Path

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph=False):
        """Populate ``.grad`` of every reachable tensor that requires grad.

        Gradients accumulate across calls until zeroed.  Unless
        ``retain_graph`` is set, the graph is released afterwards.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
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
        if not retain_graph:
            for node in order:
                if node._parents:
                    node._parents = ()
                    node._backward = None

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def _topo_order(root):
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
    return order


def graph_size(t):
    """Number of graph nodes reachable from ``t`` (leaves included)."""
    return len(_topo_order(t)) if t.requires_grad else 0


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(fn, a, b, op):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _make(out, (a, b), backward, "mul")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def power(a, p):
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (p * ad ** (p - 1) * g,), "power")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((1.0 - out * out) * g,), "tanh")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (out * (1.0 - out) * g,), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (out * g,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product with numpy semantics (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {ad.shape} and {bd.shape}")
    k_a = ad.shape[-1]
    k_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {ad.shape} and {bd.shape}")
    out = ad @ bd
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(ad.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(a, idx):
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "slice")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


# ---------------------------------------------------------------- probability

def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def kld(p_logits, q_probs):
    """KL(softmax(p_logits) || q_probs) along the last axis.

    Returns one value per row (a scalar tensor for 1-D input).  ``q_probs``
    is a constant and must be strictly positive.
    """
    q = np.asarray(q_probs.data if isinstance(q_probs, Tensor) else q_probs, dtype=np.float64)
    if q.shape[-1] != p_logits.shape[-1]:
        raise ShapeError(f"kld: shapes {p_logits.shape} and {q.shape} differ")
    if np.any(q <= 0):
        raise ValueError("kld: q_probs has non-positive entries; smooth it first")
    z = p_logits.data - p_logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    diff = logp - np.log(q)
    out = (p * diff).sum(axis=-1)

    def backward(g):
        return (np.expand_dims(g, -1) * p * (diff - np.expand_dims(out, -1)),)

    return _make(out, (p_logits,), backward, "kld")


# ---------------------------------------------------------------- parameters & layers

class ParamSet:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, data):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = parameter(data)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def num_params(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def clone(self):
        """Independent copy of values (optimizer state reset)."""
        out = ParamSet()
        for name, t in self.tensors.items():
            out.add(name, t.data.copy())
        return out

    def load_values(self, other):
        for name, t in self.tensors.items():
            t.data = other.tensors[name].data.copy()

    def state(self):
        return {name: t.data for name, t in self.tensors.items()}

    def save(self, path):
        blob = {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for name, t in self.tensors.items()}
        Path(path).write_text(json.dumps(blob))

    @classmethod
    def load(cls, path):
        blob = json.loads(Path(path).read_text())
        out = cls()
        for name, rec in blob.items():
            out.add(name, np.array(rec["data"], dtype=np.float64).reshape(rec["shape"]))
        return out


def adam_step(params: ParamSet, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    params.step += 1
    bc1 = 1.0 - beta1 ** params.step
    bc2 = 1.0 - beta2 ** params.step
    for name, t in params.tensors.items():
        if t.grad is None:
            g = np.zeros_like(t.data)
        else:
            g = t.grad
        m = params.m[name] = beta1 * params.m[name] + (1 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1 - beta2) * g * g
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.zero_grad()


def glorot(rng, shape):
    fan_in, fan_out = shape[-2], shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def dense(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def gru_cell(x, h, wx, wh, bx, bh):
    """Gated recurrent update.

    ``wx``: (..., in, 3H), ``wh``: (..., H, 3H), biases broadcastable to
    (..., 3H).  Gate blocks are ordered update, reset, candidate.
    """
    hd = h.shape[-1]
    gx = dense(x, wx, bx)
    gh = dense(h, wh, bh)
    z = sigmoid(gx[..., :hd] + gh[..., :hd])
    r = sigmoid(gx[..., hd:2 * hd] + gh[..., hd:2 * hd])
    n = tanh(gx[..., 2 * hd:] + r * gh[..., 2 * hd:])
    return n + z * (h - n)


def add_gru_params(params, prefix, rng, in_dim, hidden, lead=()):
    params.add(f"{prefix}.wx", glorot(rng, (*lead, in_dim, 3 * hidden)))
    params.add(f"{prefix}.wh", glorot(rng, (*lead, hidden, 3 * hidden)))
    params.add(f"{prefix}.bx", np.zeros((*lead, 1, 3 * hidden)))
    params.add(f"{prefix}.bh", np.zeros((*lead, 1, 3 * hidden)))


def gru(params, prefix, x, h):
    return gru_cell(x, h, params[f"{prefix}.wx"], params[f"{prefix}.wh"],
                    params[f"{prefix}.bx"], params[f"{prefix}.bh"])
