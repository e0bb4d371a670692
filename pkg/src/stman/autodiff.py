"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D numpy array (row-major, 64-bit). Operations wrap
results in Node objects and record them on the active Tape; Tape.backward
replays the records in reverse creation order, which is always a valid
topological order because parents are created before children.

One tape belongs to one single-threaded run. The active-tape stack is
thread-local, so independent runs may proceed concurrently on disjoint
tapes. Ops executed with no active tape still compute values but cannot
be differentiated (useful for cheap evaluation-only passes).
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Node",
    "Tape",
    "leaf",
    "constant",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "sigmoid",
    "tanh",
    "scale",
    "softmax_rows",
    "masked_softmax",
    "concat",
    "hconcat",
    "hstack",
    "add_bias",
    "scale_columns",
    "sum_all",
    "log_clamped",
    "gather_rows",
    "slice_rows",
    "slice_cols",
    "dropout",
    "LOG_EPS",
]

# Clamp for log arguments; keeps cross-entropy finite on collapsed softmax rows.
LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Node:
    """One value in the computation graph.

    ``grad`` stays None until backward first reaches the node. A node
    created as a constant (requires_grad=False) never accumulates
    gradient.
    """

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad")

    def __init__(self, value, parents=(), backward_rule=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_ACTIVE = _TapeStack()

_ONE = np.ones((1, 1))


class Tape:
    """Creation-ordered record of the differentiable nodes of one run."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _ACTIVE.stack.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def backward(self, loss: Node) -> None:
        """Populate gradients of every node reachable from ``loss``.

        A node feeding several consumers accumulates one contribution
        per consumer. Gradients must be clear when this is called (fresh
        tape, or zero_grads first): replay re-propagates whatever grad a
        node already holds, so stacking calls compounds stale values.
        """
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.value.shape}")
        if not loss.requires_grad:
            return
        _acc_copy(loss, _ONE)
        for node in reversed(self.nodes):
            if node.backward_rule is not None and node.grad is not None:
                node.backward_rule()

    def zero_grads(self) -> None:
        for node in self.nodes:
            node.grad = None
            for parent in node.parents:
                parent.grad = None


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix must be non-empty, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def leaf(data) -> Node:
    """Trainable input node; shares memory with ``data`` when possible."""
    return Node(_as_matrix(data), (), None, True)


def constant(data) -> Node:
    """Non-trainable input node; never accumulates gradient."""
    return Node(_as_matrix(data), (), None, False)


def _record(value: np.ndarray, parents: tuple) -> tuple[Node, bool]:
    stack = _ACTIVE.stack
    if stack:
        for p in parents:
            if p.requires_grad:
                node = Node(value, parents, None, True)
                stack[-1].nodes.append(node)
                return node, True
    return Node(value), False


def _acc(node: Node, g: np.ndarray) -> None:
    # g is a fresh array the node may take ownership of
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g
    else:
        node.grad += g


def _acc_copy(node: Node, g: np.ndarray) -> None:
    # g is a view or shared buffer; copy before taking ownership
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {av.shape} vs {bv.shape}")
    out, rec = _record(av @ bv, (a, b))
    if rec:

        def rule():
            g = out.grad
            if a.requires_grad:
                _acc(a, g @ bv.T)
            if b.requires_grad:
                _acc(b, av.T @ g)

        out.backward_rule = rule
    return out


def _check_same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes disagree: {a.value.shape} vs {b.value.shape}")


def add(a: Node, b: Node) -> Node:
    _check_same_shape("add", a, b)
    out, rec = _record(a.value + b.value, (a, b))
    if rec:

        def rule():
            g = out.grad
            _acc_copy(a, g)
            _acc_copy(b, g)

        out.backward_rule = rule
    return out


def sub(a: Node, b: Node) -> Node:
    _check_same_shape("sub", a, b)
    out, rec = _record(a.value - b.value, (a, b))
    if rec:

        def rule():
            g = out.grad
            _acc_copy(a, g)
            if b.requires_grad:
                _acc(b, -g)

        out.backward_rule = rule
    return out


def hadamard(a: Node, b: Node) -> Node:
    _check_same_shape("hadamard", a, b)
    out, rec = _record(a.value * b.value, (a, b))
    if rec:

        def rule():
            g = out.grad
            if a.requires_grad:
                _acc(a, g * b.value)
            if b.requires_grad:
                _acc(b, g * a.value)

        out.backward_rule = rule
    return out


def sigmoid(x: Node) -> Node:
    # tanh form avoids exp overflow for large negative inputs
    y = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    out, rec = _record(y, (x,))
    if rec:

        def rule():
            _acc(x, out.grad * (y * (1.0 - y)))

        out.backward_rule = rule
    return out


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    out, rec = _record(y, (x,))
    if rec:

        def rule():
            _acc(x, out.grad * (1.0 - y * y))

        out.backward_rule = rule
    return out


def scale(x: Node, c: float) -> Node:
    c = float(c)
    out, rec = _record(x.value * c, (x,))
    if rec:

        def rule():
            _acc(x, out.grad * c)

        out.backward_rule = rule
    return out


def softmax_rows(x: Node) -> Node:
    # max-subtraction per row for stability
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out, rec = _record(y, (x,))
    if rec:

        def rule():
            g = out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            _acc(x, y * (g - dot))

        out.backward_rule = rule
    return out


def masked_softmax(scores: Node, keep) -> Node:
    """Softmax over rows restricted to ``keep`` positions.

    Excluded positions are exactly zero in the output (exclusion from the
    normalization set, not a large-negative approximation). A row with no
    kept position yields an all-zero row.
    """
    k = np.asarray(keep, dtype=bool)
    if k.ndim == 1:
        k = k.reshape(1, -1)
    if k.shape != scores.value.shape:
        raise ShapeError(f"masked_softmax: mask shape {k.shape} vs scores {scores.value.shape}")
    x = scores.value
    masked = np.where(k, x, -np.inf)
    rowmax = masked.max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(k, np.exp(np.where(k, x - rowmax, 0.0)), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)
    out, rec = _record(y, (scores,))
    if rec:

        def rule():
            g = out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            _acc(scores, y * (g - dot))

        out.backward_rule = rule
    return out


def hconcat(a: Node, b: Node) -> Node:
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(f"hconcat: row counts disagree: {a.value.shape} vs {b.value.shape}")
    na = a.value.shape[1]
    out, rec = _record(np.hstack((a.value, b.value)), (a, b))
    if rec:

        def rule():
            g = out.grad
            _acc_copy(a, g[:, :na])
            _acc_copy(b, g[:, na:])

        out.backward_rule = rule
    return out


def concat(a: Node, b: Node) -> Node:
    """Juxtapose two row vectors into one; backward splits by range."""
    if a.value.shape[0] != 1 or b.value.shape[0] != 1:
        raise ShapeError(
            f"concat: expects row vectors, got {a.value.shape} and {b.value.shape}"
        )
    return hconcat(a, b)


def hstack(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ShapeError("hstack: needs at least one part")
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise ShapeError("hstack: row counts disagree")
    widths = [p.value.shape[1] for p in parts]
    out, rec = _record(np.hstack([p.value for p in parts]), tuple(parts))
    if rec:
        offsets = np.cumsum([0] + widths)

        def rule():
            g = out.grad
            for i, p in enumerate(parts):
                _acc_copy(p, g[:, offsets[i] : offsets[i + 1]])

        out.backward_rule = rule
    return out


def add_bias(x: Node, b: Node) -> Node:
    """Broadcast-add a 1xN bias row over every row of x."""
    if b.value.shape[0] != 1 or b.value.shape[1] != x.value.shape[1]:
        raise ShapeError(f"add_bias: bias {b.value.shape} vs operand {x.value.shape}")
    out, rec = _record(x.value + b.value, (x, b))
    if rec:

        def rule():
            g = out.grad
            _acc_copy(x, g)
            if b.requires_grad:
                _acc(b, g.sum(axis=0, keepdims=True))

        out.backward_rule = rule
    return out


def scale_columns(x: Node, c: Node) -> Node:
    """Multiply every row of x by the matching scalar in the Mx1 column c."""
    if c.value.shape != (x.value.shape[0], 1):
        raise ShapeError(f"scale_columns: column {c.value.shape} vs operand {x.value.shape}")
    out, rec = _record(x.value * c.value, (x, c))
    if rec:

        def rule():
            g = out.grad
            if x.requires_grad:
                _acc(x, g * c.value)
            if c.requires_grad:
                _acc(c, (g * x.value).sum(axis=1, keepdims=True))

        out.backward_rule = rule
    return out


def sum_all(x: Node) -> Node:
    out, rec = _record(np.array([[x.value.sum()]]), (x,))
    if rec:

        def rule():
            _acc(x, np.full(x.value.shape, out.grad[0, 0]))

        out.backward_rule = rule
    return out


def log_clamped(x: Node, eps: float = LOG_EPS) -> Node:
    """Natural log with the argument clamped below at eps."""
    out, rec = _record(np.log(np.maximum(x.value, eps)), (x,))
    if rec:

        def rule():
            # clamped region is constant, so its derivative is zero
            g = np.zeros_like(x.value)
            np.divide(out.grad, x.value, out=g, where=x.value > eps)
            _acc(x, g)

        out.backward_rule = rule
    return out


def gather_rows(table: Node, ids) -> Node:
    """Select rows of ``table`` by integer index; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp).reshape(-1)
    if idx.size < 1:
        raise ShapeError("gather_rows: needs at least one index")
    if idx.min() < 0 or idx.max() >= table.value.shape[0]:
        raise ShapeError(
            f"gather_rows: index out of range for table with {table.value.shape[0]} rows"
        )
    out, rec = _record(table.value[idx], (table,))
    if rec:

        def rule():
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, idx, out.grad)

        out.backward_rule = rule
    return out


def slice_rows(x: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= x.value.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {x.value.shape}")
    out, rec = _record(x.value[start:stop].copy(), (x,))
    if rec:

        def rule():
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            x.grad[start:stop] += out.grad

        out.backward_rule = rule
    return out


def slice_cols(x: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= x.value.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {x.value.shape}")
    out, rec = _record(np.ascontiguousarray(x.value[:, start:stop]), (x,))
    if rec:

        def rule():
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            x.grad[:, start:stop] += out.grad

        out.backward_rule = rule
    return out


def dropout(x: Node, rate: float, rng: np.random.Generator) -> Node:
    """Inverted dropout; kept entries scale by 1/(1-rate) so evaluation
    needs no rescaling. Identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return hadamard(x, constant(mask))
