"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op records its parents and a closure that routes the output gradient
back to them; ``backward`` on a scalar walks the recorded graph once in
reverse topological order. All arithmetic stays in float64 and all
reductions run in a fixed order, so identical seeds and inputs reproduce
forward and backward results bitwise.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class WindowTooLargeError(ShapeError):
    """Sliding window is wider than the sequence it slides over."""


class NoTapeError(RuntimeError):
    """backward was called on a tensor with no recorded computation."""


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate it.

    ``parents`` and ``grad_fn`` are set by ops; leaves have neither.
    Gradients accumulate across backward passes until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "parents", "grad_fn", "frozen_rows")

    def __init__(self, data, parents: tuple = (), grad_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.grad_fn = grad_fn
        self.frozen_rows: tuple[int, ...] = ()

    # -- housekeeping -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        """Reset gradient accumulation."""
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no recorded history."""
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Each recorded node is visited exactly once, parents after
        children, so gradients over shared subgraphs accumulate
        correctly.
        """
        if self.grad_fn is None and not self.parents:
            raise NoTapeError("tensor has no recorded computation to differentiate")
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(_topo_order(self)):
            if node.grad_fn is not None:
                node.grad_fn(node.grad)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return dot(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative postorder: parents land in the list before their children
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse gradient of a broadcast operand back to its own shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ops ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out.grad_fn = grad_fn
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out.grad_fn = grad_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out.grad_fn = grad_fn
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain float constant."""
    c = float(c)
    out = Tensor(a.data * c, parents=(a,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    out.grad_fn = grad_fn
    return out


def relu(x: Tensor) -> Tensor:
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(x.data.copy())
    out = Tensor(np.maximum(x.data, 0.0), parents=(x,))
    mask = x.data > 0.0

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    out.grad_fn = grad_fn
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g * (1.0 - y * y))

    out.grad_fn = grad_fn
    return out


# -- linear algebra ------------------------------------------------------


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for the 1-D and 2-D operand combinations."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"dot supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"dot inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def grad_fn(g: np.ndarray) -> None:
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            _accumulate(a, g * bd)
            _accumulate(b, g * ad)
        elif ad.ndim == 2 and bd.ndim == 1:
            _accumulate(a, np.outer(g, bd))
            _accumulate(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _accumulate(a, bd @ g)
            _accumulate(b, np.outer(ad, g))
        else:
            _accumulate(a, g @ bd.T)
            _accumulate(b, ad.T @ g)

    out.grad_fn = grad_fn
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    out.grad_fn = grad_fn
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(x.data.sum(), parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, np.full_like(x.data, float(g)))

    out.grad_fn = grad_fn
    return out


def add_n(ts: Sequence[Tensor]) -> Tensor:
    """Sum a list of same-shaped tensors in fixed left-to-right order."""
    if not ts:
        raise ShapeError("add_n needs at least one tensor")
    acc = ts[0].data.copy()
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"add_n shapes differ: {t.shape} vs {ts[0].shape}")
        acc += t.data
    out = Tensor(acc, parents=tuple(ts))

    def grad_fn(g: np.ndarray) -> None:
        for t in ts:
            _accumulate(t, g)

    out.grad_fn = grad_fn
    return out


def concat(vs: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    for v in vs:
        if v.data.ndim != 1:
            raise ShapeError(f"concat needs 1-D tensors, got shape {v.shape}")
    out = Tensor(np.concatenate([v.data for v in vs]), parents=tuple(vs))
    sizes = [v.data.size for v in vs]

    def grad_fn(g: np.ndarray) -> None:
        start = 0
        for v, n in zip(vs, sizes):
            _accumulate(v, g[start : start + n])
            start += n

    out.grad_fn = grad_fn
    return out


def take_rows(x: Tensor, n: int) -> Tensor:
    """First ``n`` rows of a 2-D tensor; gradient zero-pads the rest."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got shape {x.shape}")
    if not 0 < n <= x.shape[0]:
        raise ShapeError(f"cannot take {n} rows from shape {x.shape}")
    out = Tensor(x.data[:n], parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:n] = g
        _accumulate(x, full)

    out.grad_fn = grad_fn
    return out


def unfold(x: Tensor, m: int) -> Tensor:
    """Stack the ``m``-row sliding windows of an L x k matrix as rows.

    Output is (L - m + 1) x (m * k); window ``i`` is rows i..i+m-1
    flattened.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"unfold needs a 2-D tensor, got shape {x.shape}")
    L, k = x.shape
    if m < 1:
        raise ShapeError(f"window width must be positive, got {m}")
    if m > L:
        raise WindowTooLargeError(f"window {m} exceeds sequence length {L}")
    T = L - m + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (m, k))
    out = Tensor(windows.reshape(T, m * k).copy(), parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        gw = g.reshape(T, m, k)
        gx = np.zeros_like(x.data)
        for j in range(m):
            gx[j : j + T] += gw[:, j, :]
        _accumulate(x, gx)

    out.grad_fn = grad_fn
    return out


def conv_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution of full-width filter ``w`` over ``x``, plus relu.

    ``x`` is L x k, ``w`` is m x k, ``b`` is a scalar; output ``i`` is
    relu(sum(w * x[i:i+m]) + b), length L - m + 1.
    """
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"conv_valid needs 2-D input and filter, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"filter columns {w.shape[1]} != input columns {x.shape[1]}")
    if b.data.size != 1:
        raise ShapeError(f"bias must be a scalar, got shape {b.shape}")
    m = w.shape[0]
    windows = unfold(x, m)
    flat = reshape(w, (m * x.shape[1],))
    return relu(add(dot(windows, flat), b))


def lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table; gradient scatter-adds back."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"lookup table must be 2-D, got shape {table.shape}")
    if ids.ndim != 1:
        raise ShapeError(f"ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids], parents=(table,))

    def grad_fn(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    out.grad_fn = grad_fn
    return out


def max_rows(x: Tensor) -> Tensor:
    """Column-wise max over the rows of a 2-D tensor.

    Gradient flows to the first maximal row of each column.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"max_rows needs a 2-D tensor, got shape {x.shape}")
    idx = np.argmax(x.data, axis=0)
    out = Tensor(x.data[idx, np.arange(x.shape[1])], parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[idx, np.arange(x.shape[1])] = g
        _accumulate(x, gx)

    out.grad_fn = grad_fn
    return out


# -- probabilistic ops ---------------------------------------------------


def softmax(v: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D tensor."""
    if v.data.ndim != 1 or v.data.size == 0:
        raise ShapeError(f"softmax needs a nonempty 1-D tensor, got shape {v.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    y = e / e.sum()
    out = Tensor(y, parents=(v,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(v, y * (g - float(g @ y)))

    out.grad_fn = grad_fn
    return out


def cross_entropy(probs: Tensor, label: int, clamp: float = 1e-12) -> Tensor:
    """Negative log-likelihood of ``label`` under a probability vector.

    The picked probability is clamped below at ``clamp`` so the loss
    stays finite.
    """
    if probs.data.ndim != 1:
        raise ShapeError(f"cross_entropy needs a 1-D tensor, got shape {probs.shape}")
    if not 0 <= label < probs.data.size:
        raise IndexError(f"label {label} out of range for {probs.data.size} classes")
    p = float(probs.data[label])
    # np.maximum propagates NaN, so a poisoned forward pass stays visible
    out = Tensor(-np.log(np.maximum(p, clamp)), parents=(probs,))

    def grad_fn(g: np.ndarray) -> None:
        gp = np.zeros_like(probs.data)
        if p > clamp:
            gp[label] = -float(g) / p
        _accumulate(probs, gp)

    out.grad_fn = grad_fn
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability ``p``, rescale rest."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask, parents=(x,))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    out.grad_fn = grad_fn
    return out


# -- gradient checking ---------------------------------------------------

_RELU_TRACE: list[np.ndarray] | None = None


@contextmanager
def record_relu_inputs():
    """Collect every relu pre-activation array evaluated in the block."""
    global _RELU_TRACE
    prev = _RELU_TRACE
    _RELU_TRACE = []
    try:
        yield _RELU_TRACE
    finally:
        _RELU_TRACE = prev


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""

    max_rel_error: float
    checked: int
    excluded: list[tuple[int, int]] = field(default_factory=list)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` rebuilds the scalar loss from ``params`` on every call. The
    relative error per coordinate is |analytic - numeric| /
    max(1, |analytic|, |numeric|). A coordinate is excluded when its
    perturbation drives some relu pre-activation within 10 * eps of the
    kink, or flips a relu gate between the two perturbed passes: the
    central difference is unreliable there.
    """
    loss = f()
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_err = 0.0
    checked = 0
    excluded: list[tuple[int, int]] = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + eps
            with record_relu_inputs() as trace_hi:
                y_hi = f().item()
            hi = np.concatenate([t.reshape(-1) for t in trace_hi]) if trace_hi else np.empty(0)
            flat[ci] = orig - eps
            with record_relu_inputs() as trace_lo:
                y_lo = f().item()
            lo = np.concatenate([t.reshape(-1) for t in trace_lo]) if trace_lo else np.empty(0)
            flat[ci] = orig

            if hi.size != lo.size:
                raise RuntimeError("f must evaluate the same relu units on every call")
            influenced = hi != lo
            near_kink = np.minimum(np.abs(hi), np.abs(lo)) < 10.0 * eps
            gate_flip = (hi > 0.0) != (lo > 0.0)
            if np.any(gate_flip | (influenced & near_kink)):
                excluded.append((pi, ci))
                continue

            numeric = (y_hi - y_lo) / (2.0 * eps)
            a = float(analytic[pi].reshape(-1)[ci])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_err = max(max_err, err)
            checked += 1

    return GradCheckReport(max_rel_error=max_err, checked=checked, excluded=excluded)
