"""Differentiable array kernel: tape-based reverse-mode gradients and Adam.

Supports vectors and matrices only (rows = samples). A Tape is rebuilt per
minibatch (define-by-run); backward walks the node list in reverse creation
order, which is a topological order by construction, so gradients are
deterministic bit-for-bit for identical tapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NumericsError(ValueError):
    """Raised on shape mismatches, non-finite gradients, or misuse of the tape."""


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameters stored in one flat vector.

    Weights initialize to Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases and
    layers registered with init="zeros" start at zero (used for every output
    layer so freshly built models start as the identity map).
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.Generator(np.random.PCG64(self.rng_seed))
        self.values = np.zeros(0, dtype=np.float64)
        self.shapes: list[tuple[str, tuple[int, ...]]] = []
        self._index: dict[str, tuple[int, tuple[int, ...]]] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "zeros") -> None:
        if name in self._index:
            raise NumericsError(f"duplicate parameter name {name!r}")
        size = int(np.prod(shape)) if shape else 1
        if init == "zeros":
            block = np.zeros(size)
        elif init == "fan_in_uniform":
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            bound = 1.0 / math.sqrt(max(1, fan_in))
            block = self._rng.uniform(-bound, bound, size)
        else:
            raise NumericsError(f"unknown init {init!r}")
        offset = self.values.size
        self.values = np.concatenate([self.values, block])
        self.shapes.append((name, shape))
        self._index[name] = (offset, shape)

    def view(self, name: str) -> np.ndarray:
        try:
            offset, shape = self._index[name]
        except KeyError:
            raise NumericsError(f"unknown parameter {name!r}") from None
        size = int(np.prod(shape)) if shape else 1
        return self.values[offset : offset + size].reshape(shape)

    def slot(self, name: str) -> tuple[int, int]:
        offset, shape = self._index[name]
        return offset, int(np.prod(shape)) if shape else 1

    def name_at(self, flat_index: int) -> str:
        for name, _ in self.shapes:
            offset, size = self.slot(name)
            if offset <= flat_index < offset + size:
                return name
        return "<unknown>"

    @property
    def size(self) -> int:
        return self.values.size


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("id", "op", "parents", "value", "vjp", "leaf_slot")

    def __init__(self, id, op, parents, value, vjp, leaf_slot=None):
        self.id = id
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.leaf_slot = leaf_slot


class Tape:
    """Append-only record of primitive ops; inputs always precede consumers."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op, parents, value, vjp, leaf_slot=None) -> Node:
        node = Node(len(self.nodes), op, parents, value, vjp, leaf_slot)
        self.nodes.append(node)
        return node


class Var:
    """Value plus optional tape node; ops on Vars without a tape run eagerly."""

    __slots__ = ("value", "node", "tape", "name")

    def __init__(self, value, node=None, tape=None, name=None):
        self.value = value
        self.node = node
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _tape_of(*vs: Var):
    tape = None
    for v in vs:
        if v.tape is not None:
            if tape is not None and tape is not v.tape:
                raise NumericsError("operands live on different tapes")
            tape = v.tape
    return tape


def _make(tape, op, parent_vars, value, vjp_builder):
    """Record a node when a tape is present; otherwise return an eager Var."""
    if tape is None:
        return Var(value)
    parents = tuple(v.node.id if v.node is not None else -1 for v in parent_vars)
    node = tape.record(op, parents, value, vjp_builder)
    return Var(value, node, tape)


def constant(value, tape=None, name=None) -> Var:
    arr = np.asarray(value, dtype=np.float64)
    if tape is None:
        return Var(arr, name=name)
    node = tape.record("const", (), arr, None)
    return Var(arr, node, tape, name=name)


def leaf(params: ParamStore, name: str, tape) -> Var:
    """Parameter leaf; backward() accumulates its gradient into the flat layout."""
    value = params.view(name)
    if tape is None:
        return Var(value, name=name)
    node = tape.record("leaf", (), value, None, leaf_slot=params.slot(name))
    return Var(value, node, tape, name=name)


def _coerce(x, like: Var) -> Var:
    if isinstance(x, Var):
        return x
    return constant(x, like.tape)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def masked_linear(x: Var, weight: Var, bias: Var, mask: np.ndarray | None, tape=None) -> Var:
    """(weight * mask) @ x + bias, batched over rows when x is a matrix.

    x: [n] or [B, n]; weight: [m, n]; mask: binary [m, n] or None; bias: [m].
    """
    tape = tape if tape is not None else _tape_of(x, weight, bias)
    w = weight.value
    wname = weight.name or "weight"
    if w.ndim != 2:
        raise NumericsError(f"{wname}: weight must be a matrix, got shape {w.shape}")
    m, n = w.shape
    if mask is not None:
        if mask.shape != w.shape:
            raise NumericsError(
                f"{wname}: mask shape {mask.shape} does not match weight shape {w.shape}"
            )
        k = w * mask
    else:
        k = w
    if bias.value.shape != (m,):
        raise NumericsError(
            f"{bias.name or 'bias'}: expected shape ({m},), got {bias.value.shape}"
        )
    single = x.value.ndim == 1
    xv = x.value[None, :] if single else x.value
    if xv.ndim != 2 or xv.shape[1] != n:
        raise NumericsError(
            f"input: expected trailing dimension {n} for {wname}, got shape {x.value.shape}"
        )
    out = xv @ k.T + bias.value
    value = out[0] if single else out

    def vjp(g):
        gv = g[None, :] if single else g
        dx = gv @ k
        dw = gv.T @ xv
        if mask is not None:
            dw = dw * mask
        db = gv.sum(axis=0)
        return (dx[0] if single else dx, dw, db)

    return _make(tape, "masked_linear", (x, weight, bias), value, vjp)


def add(a: Var, b) -> Var:
    b = _coerce(b, a)
    value = a.value + b.value
    return _make(_tape_of(a, b), "add", (a, b), value, lambda g: (g, _unbroadcast(g, a.value)))


def _unbroadcast(g, ref):
    # scalar constants broadcast against arrays; fold the gradient back down
    if np.ndim(ref) == 0:
        return np.sum(g)
    return g


def sub(a: Var, b) -> Var:
    b = _coerce(b, a)
    value = a.value - b.value
    return _make(_tape_of(a, b), "sub", (a, b), value, lambda g: (g, _unbroadcast(-g, b.value)))


def mul(a: Var, b) -> Var:
    b = _coerce(b, a)
    av, bv = a.value, b.value
    value = av * bv
    return _make(
        _tape_of(a, b),
        "mul",
        (a, b),
        value,
        lambda g: (_unbroadcast(g * bv, av), _unbroadcast(g * av, bv)),
    )


def div(a: Var, b) -> Var:
    b = _coerce(b, a)
    av, bv = a.value, b.value
    value = av / bv
    return _make(
        _tape_of(a, b),
        "div",
        (a, b),
        value,
        lambda g: (_unbroadcast(g / bv, av), _unbroadcast(-g * av / (bv * bv), bv)),
    )


def neg(x: Var) -> Var:
    return _make(_tape_of(x), "neg", (x,), -x.value, lambda g: (-g,))


def exp(x: Var) -> Var:
    value = np.exp(x.value)
    return _make(_tape_of(x), "exp", (x,), value, lambda g: (g * value,))


def log(x: Var) -> Var:
    xv = x.value
    return _make(_tape_of(x), "log", (x,), np.log(xv), lambda g: (g / xv,))


def tanh(x: Var) -> Var:
    value = np.tanh(x.value)
    return _make(_tape_of(x), "tanh", (x,), value, lambda g: (g * (1.0 - value * value),))


def sigmoid(x: Var) -> Var:
    # expit via tanh keeps both tails accurate
    value = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(
        _tape_of(x), "sigmoid", (x,), value, lambda g: (g * value * (1.0 - value),)
    )


def square(x: Var) -> Var:
    xv = x.value
    return _make(_tape_of(x), "square", (x,), xv * xv, lambda g: (g * 2.0 * xv,))


def clamp(x: Var, lo: float, hi: float) -> Var:
    xv = x.value
    value = np.clip(xv, lo, hi)
    inside = ((xv >= lo) & (xv <= hi)).astype(np.float64)
    return _make(_tape_of(x), "clamp", (x,), value, lambda g: (g * inside,))


def total_sum(x: Var) -> Var:
    xv = x.value
    return _make(
        _tape_of(x), "sum", (x,), np.sum(xv), lambda g: (np.full_like(xv, g),)
    )


def mean(x: Var) -> Var:
    xv = x.value
    n = xv.size
    return _make(
        _tape_of(x), "mean", (x,), np.sum(xv) / n, lambda g: (np.full_like(xv, g / n),)
    )


def row_sum(x: Var) -> Var:
    xv = x.value
    if xv.ndim != 2:
        raise NumericsError(f"row_sum needs a matrix, got shape {xv.shape}")
    cols = xv.shape[1]
    return _make(
        _tape_of(x),
        "row_sum",
        (x,),
        xv.sum(axis=1),
        lambda g: (np.repeat(g[:, None], cols, axis=1),),
    )


def col_slice(x: Var, start: int, stop: int) -> Var:
    xv = x.value
    if xv.ndim != 2:
        raise NumericsError(f"col_slice needs a matrix, got shape {xv.shape}")
    value = xv[:, start:stop]

    def vjp(g):
        out = np.zeros_like(xv)
        out[:, start:stop] = g
        return (out,)

    return _make(_tape_of(x), "col_slice", (x,), value, vjp)


def permute_cols(x: Var, perm: np.ndarray) -> Var:
    xv = x.value
    inv = np.argsort(perm)
    if xv.ndim == 1:
        value = xv[perm]
        return _make(_tape_of(x), "permute", (x,), value, lambda g: (g[inv],))
    value = xv[:, perm]
    return _make(_tape_of(x), "permute", (x,), value, lambda g: (g[:, inv],))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Var, params: ParamStore) -> np.ndarray:
    """Reverse-mode gradients of a scalar loss, in flat ParamStore layout."""
    if loss.node is None or loss.tape is not tape:
        raise NumericsError("loss was not recorded on this tape")
    if np.ndim(loss.value) != 0:
        raise NumericsError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    grads: list = [None] * len(tape.nodes)
    grads[loss.node.id] = np.float64(1.0)
    out = np.zeros(params.size)
    for node in reversed(tape.nodes):
        g = grads[node.id]
        if g is None:
            continue
        if node.leaf_slot is not None:
            offset, size = node.leaf_slot
            out[offset : offset + size] += np.asarray(g).ravel()
            continue
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid < 0:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
        grads[node.id] = None  # free as we go
    return out


def finite_difference_grad(f, params: ParamStore, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of f() over every entry of params.values."""
    grad = np.zeros(params.size)
    for i in range(params.size):
        orig = params.values[i]
        params.values[i] = orig + step
        hi = f()
        params.values[i] = orig - step
        lo = f()
        params.values[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 1e-4) -> "AdamState":
        return cls(m=np.zeros(params.size), v=np.zeros(params.size), lr=lr)


def adam_step(params: ParamStore, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update; mutates params/state in place."""
    if grads.shape != params.values.shape:
        raise NumericsError(
            f"gradient length {grads.size} does not match parameter length {params.size}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericsError(f"non-finite gradient for parameter {params.name_at(bad)!r}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
