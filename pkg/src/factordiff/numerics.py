"""Small reverse-mode autodiff engine over numpy arrays, plus Adam.

Every value is a float64 ndarray. A :class:`Graph` records operations in
creation order (which is a topological order), and :func:`backward` walks
that tape in reverse accumulating adjoints.

GELU is the exact Gaussian-CDF form ``0.5 * x * (1 + erf(x / sqrt(2)))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """A non-finite value escaped an operation."""


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "is_param", "index", "name")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, is_param=False, name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or (self.vjp.__name__ if self.vjp else "leaf")
        return f"Node({label}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def softmax_value(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm_value(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


class Graph:
    """Tape of operations.

    With ``record=False`` the graph only evaluates values; no closures or
    parent links are kept, so large inference batches do not pin memory.
    Recorded graphs reject non-finite values at every node.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    # -- construction helpers ------------------------------------------------

    def _push(self, node: Node) -> Node:
        # inference graphs are checked once at the output by their callers
        if self.record and not np.all(np.isfinite(node.value)):
            label = node.name or (node.vjp.__name__ if node.vjp else "leaf")
            raise NumericalError(f"non-finite value produced by {label}")
        if self.record:
            node.index = len(self.nodes)
            self.nodes.append(node)
        return node

    def _op(self, value, parents, vjp, name) -> Node:
        if not self.record:
            return self._push(Node(value, name=name))
        req = any(p.requires_grad for p in parents)
        return self._push(Node(value, tuple(parents), vjp if req else None, req, name=name))

    def param(self, value, name: str | None = None) -> Node:
        """A differentiable leaf."""
        v = np.asarray(value, dtype=np.float64)
        return self._push(Node(v, requires_grad=self.record, is_param=True, name=name))

    def const(self, value, name: str | None = None) -> Node:
        v = np.asarray(value, dtype=np.float64)
        return self._push(Node(v, name=name))

    @property
    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.is_param]

    # -- kernels ---------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape

        def add_vjp(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._op(a.value + b.value, (a, b), add_vjp, "add")

    def sub(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape

        def sub_vjp(g):
            return _unbroadcast(g, sa), -_unbroadcast(g, sb)

        return self._op(a.value - b.value, (a, b), sub_vjp, "sub")

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value

        def mul_vjp(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

        return self._op(av * bv, (a, b), mul_vjp, "mul")

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)

        def scale_vjp(g):
            return (g * c,)

        return self._op(a.value * c, (a,), scale_vjp, "scale")

    def matmul(self, a: Node, b: Node) -> Node:
        """``a @ b`` with numpy batching semantics (both operands >= 2-D)."""
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def matmul_vjp(g):
            if bv.ndim == 2:
                ga = g @ bv.T
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            return ga, gb

        return self._op(av @ bv, (a, b), matmul_vjp, "matmul")

    def layer_norm(self, a: Node, eps: float = LN_EPS) -> Node:
        """Normalize over the last axis, no learned affine."""
        x = a.value
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        y = xc * inv

        def layer_norm_vjp(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gy),)

        return self._op(y, (a,), layer_norm_vjp, "layer_norm")

    def gelu(self, a: Node) -> Node:
        x = a.value

        def gelu_vjp(g):
            return (g * gelu_grad(x),)

        return self._op(gelu_value(x), (a,), gelu_vjp, "gelu")

    def softmax(self, a: Node, axis: int = -1) -> Node:
        y = softmax_value(a.value, axis)

        def softmax_vjp(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return self._op(y, (a,), softmax_vjp, "softmax")

    def transpose(self, a: Node, axes: Sequence[int]) -> Node:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def transpose_vjp(g):
            return (np.transpose(g, inverse),)

        return self._op(np.transpose(a.value, axes), (a,), transpose_vjp, "transpose")

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        old = a.shape

        def reshape_vjp(g):
            return (g.reshape(old),)

        return self._op(a.value.reshape(tuple(shape)), (a,), reshape_vjp, "reshape")

    def concat(self, nodes: Sequence[Node], axis: int = -1) -> Node:
        sizes = [n.shape[axis] for n in nodes]
        cuts = np.cumsum(sizes)[:-1]

        def concat_vjp(g):
            return tuple(np.split(g, cuts, axis=axis))

        return self._op(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), concat_vjp, "concat")

    def slice(self, a: Node, start: int, stop: int, axis: int = -1) -> Node:
        """Contiguous slice ``[start:stop]`` along ``axis``."""
        shape = a.shape
        index = [slice(None)] * len(shape)
        index[axis] = slice(start, stop)
        index = tuple(index)

        def slice_vjp(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)

        return self._op(a.value[index], (a,), slice_vjp, "slice")

    def sum(self, a: Node, axis=None, keepdims: bool = False) -> Node:
        shape = a.shape

        def sum_vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._op(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), sum_vjp, "sum")

    def mean(self, a: Node, axis=None, keepdims: bool = False) -> Node:
        count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

    def sq_error(self, pred: Node, target: Node) -> Node:
        """Scalar ``sum((pred - target)**2)``."""
        diff = pred.value - target.value

        def sq_error_vjp(g):
            gd = 2.0 * g * diff
            return _unbroadcast(gd, pred.shape), -_unbroadcast(gd, target.shape)

        return self._op(np.asarray((diff * diff).sum()), (pred, target), sq_error_vjp, "sq_error")


def backward(graph: Graph, loss: Node) -> dict[Node, np.ndarray]:
    """Adjoints of ``loss`` with respect to every parameter leaf of ``graph``.

    Leaves that ``loss`` does not depend on get zero arrays.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.record or loss.index < 0 or graph.nodes[loss.index] is not loss:
        raise ValueError("loss node does not belong to this recorded graph")
    adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss.index + 1]):
        g = adj.get(node.index)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            prev = adj.get(parent.index)
            adj[parent.index] = pg if prev is None else prev + pg
    return {n: adj.get(n.index, np.zeros_like(n.value)) for n in graph.params}


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    step: float = 1e-5,
    grad: np.ndarray | None = None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    The error at coordinate i is ``|g_i - fd_i| / max(1, |fd_i|)``. Supply
    either ``grad`` (already evaluated at ``point``) or ``grad_fn``.
    ``coords`` restricts the comparison to a subset of coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    if grad is None:
        if grad_fn is None:
            raise ValueError("need grad or grad_fn")
        grad = grad_fn(point)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    idx = range(point.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        x = point.copy().ravel()
        x[i] += step
        fp = float(f(x.reshape(point.shape)))
        x[i] -= 2 * step
        fm = float(f(x.reshape(point.shape)))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite function value near coordinate {i}")
        fd = (fp - fm) / (2 * step)
        worst = max(worst, abs(grad[i] - fd) / max(1.0, abs(fd)))
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 0.003, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumericalError(f"non-finite gradient at index {int(bad[0])}")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
