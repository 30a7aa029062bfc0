"""Tape-based reverse-mode differentiation over dense numpy tensors.

A :class:`Tape` records a dynamic acyclic graph of :class:`Node` values as
the forward pass runs; ``backward`` replays it in reverse, accumulating
exact gradients into every node (so two backward passes without zeroing
give exactly twice the gradient).  The op set is the minimum a small
transformer denoiser needs; each op's backward rule is validated against
central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-5


class Node:
    __slots__ = ("value", "parents", "kind", "grad", "index", "_backward")

    def __init__(self, value, parents=(), kind="const", backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.kind = kind
        self.grad = None
        self.index = -1
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _require_same_shape(kind, a, b):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{kind}: shape mismatch {a.value.shape} vs {b.value.shape}")


# Each builder maps input nodes (+ attributes) to (value, backward), where
# backward takes the output gradient and returns one gradient per parent.

def _build_add(a, b):
    _require_same_shape("add", a, b)
    return a.value + b.value, lambda g: (g, g)


def _build_sub(a, b):
    _require_same_shape("sub", a, b)
    return a.value - b.value, lambda g: (g, -g)


def _build_mul(a, b):
    _require_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return av * bv, lambda g: (g * bv, g * av)


def _build_matmul(a, b, transpose_a=False, transpose_b=False):
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {av.shape} and {bv.shape}")
    lhs = av.T if transpose_a else av
    rhs = bv.T if transpose_b else bv
    if lhs.shape[1] != rhs.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {av.shape} x {bv.shape}")

    def backward(g):
        da = g @ rhs.T
        db = lhs.T @ g
        if transpose_a:
            da = da.T
        if transpose_b:
            db = db.T
        return da, db

    return lhs @ rhs, backward


def _build_broadcast(a, shape=None):
    shape = tuple(shape)
    value = np.broadcast_to(a.value, shape).copy()
    src_shape = a.value.shape
    return value, lambda g: (_unbroadcast(g, src_shape),)


def _build_sum(a, axis=None, keepdims=False):
    value = a.value.sum(axis=axis, keepdims=keepdims)
    src = a.value.shape

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return value, backward


def _build_mean(a, axis=None, keepdims=False):
    value = a.value.mean(axis=axis, keepdims=keepdims)
    src = a.value.shape
    count = a.value.size if axis is None else src[axis]

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy() / count,)

    return value, backward


def _build_softmax(a, axis=-1):
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return y, backward


def _build_layer_norm(a, eps=LAYER_NORM_EPS):
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - y * gy),)

    return y, backward


def _build_tanh(a):
    y = np.tanh(a.value)
    return y, lambda g: (g * (1.0 - y * y),)


def _build_silu(a):
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, lambda g: (g * sig * (1.0 + x * (1.0 - sig)),)


def _build_slice(a, start=0, stop=None):
    n = a.value.shape[0]
    stop = n if stop is None else stop
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice: bad frame range [{start}:{stop}] for {n} rows")
    value = a.value[start:stop].copy()
    src = a.value.shape

    def backward(g):
        out = np.zeros(src)
        out[start:stop] = g
        return (out,)

    return value, backward


def _build_concat(*nodes):
    if not nodes:
        raise ValueError("concat: needs at least one input")
    value = np.concatenate([n.value for n in nodes], axis=0)
    sizes = [n.value.shape[0] for n in nodes]

    def backward(g):
        grads, offset = [], 0
        for s in sizes:
            grads.append(g[offset:offset + s])
            offset += s
        return tuple(grads)

    return value, backward


def _build_scale(a, factor=1.0):
    factor = float(factor)
    return a.value * factor, lambda g: (g * factor,)


def _build_cmul(a, const=None):
    const = np.asarray(const, dtype=np.float64)
    value = a.value * const
    if value.shape != a.value.shape:
        raise ValueError("cmul: constant must broadcast to the input shape")
    return value, lambda g: (g * const,)


OP_BUILDERS = {
    "add": _build_add,
    "sub": _build_sub,
    "mul": _build_mul,
    "matmul": _build_matmul,
    "broadcast": _build_broadcast,
    "sum": _build_sum,
    "mean": _build_mean,
    "softmax": _build_softmax,
    "layer_norm": _build_layer_norm,
    "tanh": _build_tanh,
    "silu": _build_silu,
    "slice": _build_slice,
    "concat": _build_concat,
    "scale": _build_scale,
    "cmul": _build_cmul,
}


class Tape:
    """Ordered record of one forward pass; rebuilt from scratch every step."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}

    def _append(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._append(Node(value, kind="const"))

    def parameter(self, name: str, value) -> Node:
        if name in self.parameters:
            raise ValueError(f"duplicate parameter {name!r}")
        node = self._append(Node(value, kind="param"))
        self.parameters[name] = node
        return node

    def record(self, kind: str, *inputs: Node, **attrs) -> Node:
        builder = OP_BUILDERS.get(kind)
        if builder is None:
            raise ValueError(f"unknown op-kind {kind!r}")
        for node in inputs:
            if node.index < 0 or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
                raise ValueError(f"{kind}: input node is not on this tape")
        value, backward = builder(*inputs, **attrs)
        return self._append(Node(value, parents=inputs, kind=kind, backward=backward))

    # Thin spellings used throughout the model code.
    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def matmul(self, a, b, transpose_a=False, transpose_b=False):
        return self.record("matmul", a, b, transpose_a=transpose_a, transpose_b=transpose_b)

    def broadcast(self, a, shape):
        return self.record("broadcast", a, shape=shape)

    def mean(self, a, axis=None, keepdims=False):
        return self.record("mean", a, axis=axis, keepdims=keepdims)

    def softmax(self, a, axis=-1):
        return self.record("softmax", a, axis=axis)

    def layer_norm(self, a):
        return self.record("layer_norm", a)

    def silu(self, a):
        return self.record("silu", a)

    def scale(self, a, factor):
        return self.record("scale", a, factor=factor)

    def cmul(self, a, const):
        return self.record("cmul", a, const=const)

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(node) into every node; return parameter grads."""
        if loss.index < 0 or self.nodes[loss.index] is not loss:
            raise ValueError("loss is not a node on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        flows: list[np.ndarray | None] = [None] * len(self.nodes)
        flows[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            g = flows[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node._backward is not None:
                for parent, pg in zip(node.parents, node._backward(g)):
                    if flows[parent.index] is None:
                        flows[parent.index] = np.array(pg, dtype=np.float64)
                    else:
                        flows[parent.index] += pg
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        return {name: node.grad.copy() if node.grad is not None else np.zeros_like(node.value)
                for name, node in self.parameters.items()}


@dataclass
class GradCheckReport:
    """Per-parameter comparison of reverse-mode vs central-difference grads."""

    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float
    checked_entries: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_error < self.tolerance


def grad_check(build_loss, params: dict[str, np.ndarray], tolerance: float,
               h: float = 1e-5, max_entries_per_param: int | None = None,
               subsample_seed: int = 0) -> GradCheckReport:
    """Validate reverse-mode gradients of a scalar loss against central differences.

    ``build_loss(tape, nodes)`` must construct the loss node from parameter
    nodes keyed like ``params`` and be deterministic: it is evaluated twice
    and any value mismatch is rejected.  With ``max_entries_per_param`` set,
    only a deterministic subsample of coordinates per tensor is probed
    (every tensor is still covered).
    """

    def evaluate(values: dict[str, np.ndarray]) -> float:
        tape = Tape()
        nodes = {name: tape.parameter(name, v) for name, v in values.items()}
        return float(build_loss(tape, nodes).value)

    first, second = evaluate(params), evaluate(params)
    if first != second:
        raise ValueError("grad_check: loss builder is not deterministic "
                         f"({first!r} != {second!r})")

    tape = Tape()
    nodes = {name: tape.parameter(name, v) for name, v in params.items()}
    loss = build_loss(tape, nodes)
    analytic = tape.backward(loss)

    picker = np.random.Generator(np.random.Philox(key=np.array([subsample_seed, 0xAD], dtype=np.uint64)))
    per_param: dict[str, float] = {}
    checked = 0
    for name, value in params.items():
        flat = value.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = np.sort(picker.choice(n, size=max_entries_per_param, replace=False))
        else:
            idx = np.arange(n)
        worst = 0.0
        grad_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate(params)
            flat[i] = orig - h
            down = evaluate(params)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            ad = grad_flat[i]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            worst = max(worst, rel)
            checked += 1
        per_param[name] = worst
    overall = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(overall, per_param, tolerance, checked)
