"""Dense float32 tensors with reverse-mode automatic differentiation.

Every op builds an output :class:`Tensor` holding references to its parents
and a closure mapping the upstream gradient to one gradient per parent.
:meth:`Tensor.backward` orders the recorded graph topologically into a
:class:`Tape` and replays it in reverse, summing gradients on shared nodes.

Quantizers attach an integer-valued ``qcode`` and a float32 ``qscale`` to
their outputs (``data == qcode * qscale``).  :func:`matmul` uses them to
compute ``(code_a @ code_b) * (scale_a * scale_b)``, which is exact in
float32 and therefore bit-identical to the packed inference kernels.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, TrainingError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher / eval forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "qcode", "qscale",
                 "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.qcode = None
        self.qscale = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operators
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
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self, grad=None):
        return backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out.qcode = None
    out.qscale = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _topo_order(root: Tensor) -> Tape:
    tape = Tape()
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.entries.append(TapeEntry(node._op, node, node._parents))
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return tape


def backward(root: Tensor, grad=None) -> Tape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if not root.requires_grad:
        raise ContractError("backward() called on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise ContractError("backward() without an explicit gradient needs a scalar output")
        grad = np.ones_like(root.data)
    tape = _topo_order(root)
    grads = {id(root): np.asarray(grad, dtype=DTYPE).reshape(root.shape)}
    for entry in reversed(tape.entries):
        node = entry.output
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        if len(pgrads) != len(node._parents):
            raise ContractError(
                f"op {node._op!r} returned {len(pgrads)} gradients for {len(node._parents)} inputs")
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != p.shape:
                pg = _unbroadcast(pg, p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {sa} and {sb}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {sa} and {sb}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = DTYPE(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {sa} and {sb}") from exc
    ad, bd = a.data, b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, DTYPE(0)), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- shape ops

def _carry_code(out, x, fn):
    if x.qcode is not None:
        out.qcode = fn(x.qcode)
        out.qscale = x.qscale
    return out


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")
    return _carry_code(out, x, lambda c: c.reshape(shape))


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")
    return _carry_code(out, x, lambda c: np.ascontiguousarray(c.transpose(axes)))


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """``x`` indexed at a single position along ``axis`` (axis is dropped)."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=axis), (x,), bw, "select")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(dtype=DTYPE)), (x,),
                 lambda g: (np.broadcast_to(g, shape),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean(dtype=DTYPE)), (x,),
                 lambda g: (np.broadcast_to(g / DTYPE(n), shape),), "mean")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    When both operands carry quantization codes the product is computed on
    the codes and multiplied by the combined scale once.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.qcode is not None and b.qcode is not None:
        scale = DTYPE(a.qscale) * DTYPE(b.qscale)
        out = np.matmul(a.qcode, b.qcode) * scale
    else:
        out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        if ga is not None and ga.shape != sa:
            ga = _unbroadcast(ga, sa)
        if gb is not None and gb.shape != sb:
            gb = _unbroadcast(gb, sb)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- nonlinear

def _softmax_np(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learnable gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding_lookup: id out of range [0, {vocab})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    p = _softmax_np(logits.data, 1)

    def bw(g):
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / DTYPE(n)),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- custom gradients

def custom_grad(forward_fn: Callable, backward_fn: Callable, *inputs, op="custom") -> Tensor:
    """Record ``forward_fn(*arrays)`` with a user-supplied backward rule.

    ``backward_fn(g, *arrays)`` must return one gradient (or None) per input;
    anything else raises :class:`ContractError` during backward.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = tuple(t.data for t in inputs)
    out = forward_fn(*arrays)

    def bw(g):
        grads = backward_fn(g, *arrays)
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        if len(grads) != len(inputs):
            raise ContractError(
                f"custom_grad: backward returned {len(grads)} gradients for {len(inputs)} inputs")
        return tuple(grads)

    return _make(out, inputs, bw, op)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
              no_decay: Sequence[str] = (), lr_scale: dict | None = None) -> dict:
    """Adam with decoupled weight decay; updates ``params[name].data`` in place.

    Parameters whose name is in ``no_decay`` skip the decay term;
    ``lr_scale`` maps names to learning-rate multipliers.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    skip = set(no_decay)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if np.shape(g) != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"optimizer state for {name!r} has shape {m.shape}, expected {p.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.m[name] = m
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        plr = lr * lr_scale.get(name, 1.0) if lr_scale else lr
        if weight_decay and name not in skip:
            p.data -= DTYPE(plr * weight_decay) * p.data
        p.data -= (DTYPE(plr) * update).astype(DTYPE)
    return params
