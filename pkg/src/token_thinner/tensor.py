"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the encoder computes lives in rank-1 or rank-2 arrays, stored
row-major and contiguous; no views are handed out and no op mutates its
inputs, so a tensor is immutable after construction except for gradient
accumulation during backward().

Matmul work can be measured with the `count_macs` context manager, which
tallies one multiply-accumulate per scalar product term. Only true matrix
products are counted; normalizations, activations and elementwise work are
deliberately excluded so the tally lines up with the analytical cost model.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import DimensionError, ParameterError, TokenIndexError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class MacCounter:
    """Running total of multiply-accumulate operations."""

    def __init__(self) -> None:
        self.total = 0


_active_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    """Count matmul MACs executed inside the block.

    Counters nest; each active counter sees every matmul, including the
    ones run during backward() if it is called inside the block.
    """
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record_macs(n: int) -> None:
    if _active_counters:
        for c in _active_counters:
            c.total += n


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    Interior nodes of a computation remember their parents and a backward
    rule; calling backward() on a scalar result replays those rules in
    reverse topological order exactly once per node.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise DimensionError(f"backward() starts from a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Operator sugar for the common arithmetic.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_sum_to(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_sum_to(g, b.data.shape))
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data - b.data, (a, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_sum_to(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_sum_to(-g, b.data.shape))
        out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_sum_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_sum_to(g * a.data, b.data.shape))
        out._backward = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data / b.data, (a, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_sum_to(g / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_sum_to(-g * a.data / (b.data * b.data), b.data.shape))
        out._backward = backward
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a plain python scalar (no gradient for the scalar)."""
    out = _result(a.data * factor, (a,))
    if out.requires_grad:
        def backward():
            a.accumulate_grad(out.grad * factor)
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs (m,k) by (k,n) operands, got {a.data.shape} and {b.data.shape}"
        )
    _record_macs(a.data.shape[0] * a.data.shape[1] * b.data.shape[1])
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                _record_macs(g.shape[0] * g.shape[1] * b.data.shape[0])
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                _record_macs(a.data.shape[1] * a.data.shape[0] * g.shape[1])
                b.accumulate_grad(a.data.T @ g)
        out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 operand, got shape {a.data.shape}")
    out = _result(np.ascontiguousarray(a.data.T), (a,))
    if out.requires_grad:
        def backward():
            a.accumulate_grad(np.ascontiguousarray(out.grad.T))
        out._backward = backward
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if x.data.ndim < 1 or x.data.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s, (x,))
    if out.requires_grad:
        def backward():
            g = out.grad
            dot = (g * s).sum(axis=-1, keepdims=True)
            x.accumulate_grad(s * (g - dot))
        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = _result(normed * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def backward():
            g = out.grad
            if gain.requires_grad:
                gain.accumulate_grad(_sum_to(g * normed, gain.data.shape))
            if bias.requires_grad:
                bias.accumulate_grad(_sum_to(g, bias.data.shape))
            if x.requires_grad:
                gn = g * gain.data
                mean_gn = gn.mean(axis=-1, keepdims=True)
                mean_gn_normed = (gn * normed).mean(axis=-1, keepdims=True)
                x.accumulate_grad(inv * (gn - mean_gn - normed * mean_gn_normed))
        out._backward = backward
    return out


def _check_row_indices(indices: Sequence[int], n_rows: int, strict: bool) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise TokenIndexError(f"row indices must be one-dimensional, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise TokenIndexError(f"row index out of range for {n_rows} rows: {indices}")
    if strict and idx.size > 1 and not np.all(np.diff(idx) > 0):
        raise TokenIndexError(f"row indices must be strictly increasing, got {indices}")
    return idx


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows by strictly increasing indices; backward scatters."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a rank-2 operand, got shape {x.data.shape}")
    idx = _check_row_indices(indices, x.data.shape[0], strict=True)
    out = _result(x.data[idx].copy(), (x,))
    if out.requires_grad:
        def backward():
            full = np.zeros_like(x.data)
            full[idx] = out.grad
            x.accumulate_grad(full)
        out._backward = backward
    return out


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Row lookup allowing repeats and arbitrary order (embedding tables)."""
    if x.data.ndim != 2:
        raise DimensionError(f"take_rows needs a rank-2 operand, got shape {x.data.shape}")
    idx = _check_row_indices(indices, x.data.shape[0], strict=False)
    out = _result(x.data[idx].copy(), (x,))
    if out.requires_grad:
        def backward():
            full = np.zeros_like(x.data)
            np.add.at(full, idx, out.grad)
            x.accumulate_grad(full)
        out._backward = backward
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ParameterError("concat_rows needs at least one operand")
    out = _result(np.concatenate([p.data for p in parts], axis=0), parts)
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
        def backward():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate_grad(out.grad[lo:hi])
        out._backward = backward
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ParameterError("concat_cols needs at least one operand")
    out = _result(np.concatenate([p.data for p in parts], axis=1), parts)
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
        def backward():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate_grad(out.grad[:, lo:hi])
        out._backward = backward
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Arithmetic mean over the row axis of a (tokens, features) tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a rank-2 operand, got shape {x.data.shape}")
    n = x.data.shape[0]
    if n == 0:
        raise DimensionError("mean_rows needs at least one row")
    out = _result(x.data.mean(axis=0, keepdims=True), (x,))
    if out.requires_grad:
        def backward():
            x.accumulate_grad(np.repeat(out.grad / n, n, axis=0))
        out._backward = backward
    return out


def sum_rows(x: Tensor) -> Tensor:
    """Row sums with keepdims: (m, n) -> (m, 1)."""
    if x.data.ndim != 2:
        raise DimensionError(f"sum_rows needs a rank-2 operand, got shape {x.data.shape}")
    out = _result(x.data.sum(axis=1, keepdims=True), (x,))
    if out.requires_grad:
        def backward():
            x.accumulate_grad(np.broadcast_to(out.grad, x.data.shape).copy())
        out._backward = backward
    return out


def mean_all(x: Tensor) -> Tensor:
    out = _result(np.array([[x.data.mean()]]), (x,))
    if out.requires_grad:
        size = x.data.size
        def backward():
            x.accumulate_grad(np.full_like(x.data, out.grad[0, 0] / size))
        out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _result(x.data * cdf, (x,))
    if out.requires_grad:
        def backward():
            pdf_term = x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x.accumulate_grad(out.grad * (cdf + pdf_term))
        out._backward = backward
    return out


def clamp_min(x: Tensor, floor_value: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes where x >= floor."""
    out = _result(np.maximum(x.data, floor_value), (x,))
    if out.requires_grad:
        mask = (x.data >= floor_value).astype(np.float64)
        def backward():
            x.accumulate_grad(out.grad * mask)
        out._backward = backward
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; only invoked when a config explicitly enables it."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = _result(x.data * mask, (x,))
    if out.requires_grad:
        def backward():
            x.accumulate_grad(out.grad * mask)
        out._backward = backward
    return out


def hard_assign_columns(sim: Tensor) -> Tensor:
    """Column-wise one-hot argmax with a straight-through gradient.

    Forward: each column keeps a single 1 at its max row (ties resolved to
    the lowest row index). Backward: the incoming gradient is passed to
    `sim` unchanged, exactly as if the op were the identity.
    """
    if sim.data.ndim != 2 or sim.data.shape[0] == 0:
        raise DimensionError(f"hard_assign needs a non-empty rank-2 operand, got shape {sim.data.shape}")
    winners = np.argmax(sim.data, axis=0)
    hard = np.zeros_like(sim.data)
    hard[winners, np.arange(sim.data.shape[1])] = 1.0
    out = _result(hard, (sim,))
    if out.requires_grad:
        def backward():
            sim.accumulate_grad(out.grad)
        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ weight (+ bias)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def cross_entropy_with_logits(logits: Tensor, target: int) -> Tensor:
    """Stable cross entropy of a single (1, C) logit row against a class id."""
    if logits.data.ndim != 2 or logits.data.shape[0] != 1:
        raise DimensionError(f"cross entropy expects a (1, C) logit row, got shape {logits.data.shape}")
    n_classes = logits.data.shape[1]
    if not 0 <= target < n_classes:
        raise ParameterError(f"target class {target} out of range for {n_classes} classes")
    z = logits.data[0]
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    out = _result(np.array([[lse - z[target]]]), (logits,))
    if out.requires_grad:
        def backward():
            p = np.exp(z - m)
            p /= p.sum()
            p[target] -= 1.0
            logits.accumulate_grad(out.grad[0, 0] * p.reshape(1, -1))
        out._backward = backward
    return out
