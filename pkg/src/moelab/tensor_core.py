"""Minimal reverse-mode autodiff over float64 numpy arrays.

Supports rank 0..2 tensors and only the operations the MoE block needs:
matmul, elementwise add/sub/mul/div, relu, row softmax, sums, row scaling,
and row/element gather-scatter. No general broadcasting; the two places a
row vector meets a matrix (scale_rows, sum_rows backward) are dedicated ops
so every gradient rule stays explicit.

Graphs are built eagerly: each result tensor records its parents and a
closure that routes the output gradient to them. ``Tensor.backward`` walks
the graph once in reverse topological order. Everything is single-threaded
and deterministic: the same inputs produce bitwise-identical outputs and
gradients on every run.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


# Test hook: gradcheck's negative control scales one backward rule so a
# deliberately wrong gradient is detectable end to end. 1.0 means off.
_MATMUL_GRAD_FAULT = 1.0


def set_matmul_grad_fault(scale: float) -> None:
    global _MATMUL_GRAD_FAULT
    _MATMUL_GRAD_FAULT = float(scale)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are rank 0..2, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = ()):
        self.data = _as_array(data)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of self into every reachable parent.

        ``seed`` defaults to ones, so calling backward on a scalar loss
        yields plain d(loss)/d(param) in each ``grad``.
        """
        graph = ComputeGraph.from_output(self)
        # np.asarray keeps 0-d grads as writable arrays, not numpy scalars
        self.grad = np.asarray(self.grad + (np.ones_like(self.data)
                                            if seed is None
                                            else _as_array(seed)))
        graph.run_backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class ComputeGraph:
    """Reverse topological ordering of the tensors reachable from an output.

    Built once per backward pass; ``run_backward`` visits each recorded
    node exactly once, parents strictly after children.
    """

    def __init__(self, ordered: list[Tensor]):
        self.ordered = ordered

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        ordered: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                ordered.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        ordered.reverse()  # children before parents
        return cls(ordered)

    def run_backward(self) -> None:
        for node in self.ordered:
            if node._backward_fn is not None:
                node._backward_fn()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def const(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _unite(*parents: Tensor) -> tuple[bool, tuple]:
    rg = any(p.requires_grad for p in parents)
    return rg, (parents if rg else ())


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    rg, parents = _unite(a, b)
    out = Tensor(a.data @ b.data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            if a.requires_grad:
                a.grad += (out.grad @ b.data.T) * _MATMUL_GRAD_FAULT
            if b.requires_grad:
                b.grad += a.data.T @ out.grad
        out._backward_fn = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    rg, parents = _unite(a, b)
    out = Tensor(a.data + b.data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        out._backward_fn = _backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    rg, parents = _unite(a, b)
    out = Tensor(a.data - b.data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad -= out.grad
        out._backward_fn = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    rg, parents = _unite(a, b)
    out = Tensor(a.data * b.data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            if a.requires_grad:
                a.grad += out.grad * b.data
            if b.requires_grad:
                b.grad += out.grad * a.data
        out._backward_fn = _backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    rg, parents = _unite(a, b)
    out = Tensor(a.data / b.data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            if a.requires_grad:
                a.grad += out.grad / b.data
            if b.requires_grad:
                b.grad -= out.grad * a.data / (b.data * b.data)
        out._backward_fn = _backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    rg, parents = _unite(a)
    out = Tensor(a.data * c, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            a.grad += out.grad * c
        out._backward_fn = _backward
    return out


def relu(a: Tensor) -> Tensor:
    rg, parents = _unite(a)
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=rg, _parents=parents)
    if rg:
        mask = a.data > 0.0  # derivative at exactly 0 is taken as 0
        def _backward() -> None:
            a.grad += out.grad * mask
        out._backward_fn = _backward
    return out


def softmax_rows_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax on a plain array.

    Shared by the autodiff op and by plan construction so both paths
    produce bitwise-identical probabilities.
    """
    shifted = x - x.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got {a.shape}")
    rg, parents = _unite(a)
    y = softmax_rows_np(a.data)
    out = Tensor(y, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            g = out.grad
            inner = (g * y).sum(axis=1, keepdims=True)
            a.grad += y * (g - inner)
        out._backward_fn = _backward
    return out


def sum_all(a: Tensor) -> Tensor:
    rg, parents = _unite(a)
    out = Tensor(a.data.sum(), requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            a.grad += out.grad  # scalar broadcast
        out._backward_fn = _backward
    return out


def sum_rows(a: Tensor) -> Tensor:
    """Row sums as an n x 1 column."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected a matrix, got {a.shape}")
    rg, parents = _unite(a)
    out = Tensor(a.data.sum(axis=1, keepdims=True), requires_grad=rg,
                 _parents=parents)
    if rg:
        def _backward() -> None:
            a.grad += out.grad  # n x 1 broadcast over columns
        out._backward_fn = _backward
    return out


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of ``a`` by scalar s[i]; ``s`` must be n x 1."""
    if a.data.ndim != 2 or s.data.shape != (a.shape[0], 1):
        raise ShapeError(f"scale_rows: matrix {a.shape} needs scales "
                         f"({a.shape[0] if a.data.ndim == 2 else '?'}, 1), "
                         f"got {s.shape}")
    rg, parents = _unite(a, s)
    out = Tensor(a.data * s.data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            if a.requires_grad:
                a.grad += out.grad * s.data
            if s.requires_grad:
                s.grad += (out.grad * a.data).sum(axis=1, keepdims=True)
        out._backward_fn = _backward
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows a[idx]; duplicate indices are allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: matrix {a.shape} with index vector, "
                         f"got index shape {idx.shape}")
    rg, parents = _unite(a)
    out = Tensor(a.data[idx], requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            np.add.at(a.grad, idx, out.grad)
        out._backward_fn = _backward
    return out


def scatter_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Accumulate ``rows`` into an n_rows-tall zero matrix at ``idx``.

    Duplicate destinations sum, which is exactly the combine step of an
    MoE layer.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if rows.data.ndim != 2 or idx.shape != (rows.shape[0],):
        raise ShapeError(f"scatter_rows: rows {rows.shape} need one index "
                         f"each, got index shape {idx.shape}")
    rg, parents = _unite(rows)
    data = np.zeros((n_rows, rows.shape[1]), dtype=np.float64)
    np.add.at(data, idx, rows.data)
    out = Tensor(data, requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            rows.grad += out.grad[idx]
        out._backward_fn = _backward
    return out


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """out[i, j] = a[i, cols[i, j]] for an n x k integer column map."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or cols.ndim != 2 or cols.shape[0] != a.shape[0]:
        raise ShapeError(f"take_per_row: matrix {a.shape} with per-row "
                         f"columns, got {cols.shape}")
    rows = np.arange(a.shape[0])[:, None]
    rg, parents = _unite(a)
    out = Tensor(a.data[rows, cols], requires_grad=rg, _parents=parents)
    if rg:
        def _backward() -> None:
            np.add.at(a.grad, (rows, cols), out.grad)
        out._backward_fn = _backward
    return out


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select scalar entries a[rows[i], cols[i]] as an m x 1 column."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError(f"take_pairs: matrix {a.shape} with matching index "
                         f"vectors, got {rows.shape} and {cols.shape}")
    rg, parents = _unite(a)
    out = Tensor(a.data[rows, cols][:, None], requires_grad=rg,
                 _parents=parents)
    if rg:
        def _backward() -> None:
            np.add.at(a.grad, (rows, cols), out.grad[:, 0])
        out._backward_fn = _backward
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x`` is perturbed in place one element at a time and restored, so ``f``
    may simply close over the same array (for example a parameter tensor's
    ``.data``) and rerun a forward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x))
        flat[i] = orig - eps
        f_minus = float(f(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative difference, floored to ignore noise
    where both values are essentially zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def collect_rel_errors(pairs: Iterable[tuple[np.ndarray, np.ndarray]],
                       floor: float = 1e-6) -> float:
    """Worst max_rel_error across a sequence of (autodiff, numeric) pairs."""
    worst = 0.0
    for a, b in pairs:
        worst = max(worst, max_rel_error(a, b, floor=floor))
    return worst
