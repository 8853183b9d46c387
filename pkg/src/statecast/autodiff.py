"""Reverse-mode automatic differentiation over dense float tensors.

Values are numpy arrays, float32 by default; ``use_dtype`` switches the
working precision (float64 is used inside finite-difference oracles).
Every primitive validates operand shapes, rejects NaN/Inf outputs, and --
when a Tape is active -- records a backward rule so gradients can be
accumulated by replaying the tape in exact reverse order. Outside a Tape,
primitives run eagerly with no graph bookkeeping.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np


class ContractError(ValueError):
    """An operation was called with operands that violate its contract."""


class NumericError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """The computation graph and the tape disagree."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def default_dtype() -> np.dtype:
    return getattr(_tls, "dtype", np.dtype(np.float32))


@contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype of newly created constants and leaves."""
    prev = default_dtype()
    _tls.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _tls.dtype = prev


class Node:
    """One value in the computation graph.

    ``parents`` pairs each parent node with a local backward rule mapping the
    output gradient to that parent's gradient contribution. Leaves have no
    parents; their ``grad`` persists across tapes and accumulates.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value: np.ndarray, parents=(), requires_grad: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def detach(self) -> np.ndarray:
        """A copy of the value with no graph attached."""
        return np.array(self.value, copy=True)

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item: expected scalar, got shape {self.value.shape}")
        return float(self.value.reshape(-1)[0])

    # Operator sugar; everything maps to the module-level primitives.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Topologically ordered record of the nodes created in one forward pass.

    Nodes are appended in creation order, which is a valid topological order
    because an operation's parents always exist before its output.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise GraphError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def backward(self, root: Node) -> None:
        """Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.

        Interior node gradients are recomputed from scratch on every call;
        leaf gradients (nodes not on this tape, e.g. parameters) accumulate
        across calls until explicitly zeroed.
        """
        if root.value.size != 1:
            raise ContractError(
                f"backward: root must be scalar-shaped, got shape {root.value.shape}"
            )
        on_tape = {id(n) for n in self.nodes}
        if id(root) not in on_tape and root.parents:
            raise GraphError("backward: root node is not on this tape")

        for node in self.nodes:
            node.grad = None
        seed = np.ones_like(root.value)
        if id(root) in on_tape:
            root.grad = seed
        else:
            root.grad = seed if root.grad is None else root.grad + seed
            return

        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, rule in node.parents:
                if not parent.requires_grad:
                    continue
                contrib = rule(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def constant(x, dtype=None) -> Node:
    """A graph leaf that never receives gradients."""
    arr = np.asarray(x, dtype=dtype or default_dtype())
    return Node(arr)


def leaf(x, dtype=None) -> Node:
    """A graph leaf that accumulates gradients across backward calls."""
    arr = np.array(x, dtype=dtype or default_dtype())
    return Node(arr, (), True)


def _finite_or_raise(value: np.ndarray, name: str) -> None:
    # A finite sum implies every entry is finite (any NaN/Inf propagates).
    if not math.isfinite(value.sum()):
        raise NumericError(f"{name}: non-finite output")


def _record(value: np.ndarray, parents, name: str) -> Node:
    _finite_or_raise(value, name)
    tape = active_tape()
    if tape is None:
        return Node(value)
    req = any(p.requires_grad for p, _ in parents)
    node = Node(value, tuple(parents) if req else (), req)
    tape.nodes.append(node)
    return node


def _record_moved(value: np.ndarray, parents, name: str) -> Node:
    """Record an op that only rearranges finite inputs; no finiteness check."""
    tape = active_tape()
    if tape is None:
        return Node(value)
    req = any(p.requires_grad for p, _ in parents)
    node = Node(value, tuple(parents) if req else (), req)
    tape.nodes.append(node)
    return node


def _shapes(name: str, *nodes: Node) -> str:
    return f"{name}: shapes " + " and ".join(str(n.value.shape) for n in nodes)


# ---------------------------------------------------------------------------
# Elementwise and arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; also supports the bias-add broadcast (T, d) + (d,)."""
    va, vb = a.value, b.value
    if va.shape == vb.shape:
        return _record(va + vb, [(a, lambda g: g), (b, lambda g: g)], "add")
    if va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
        return _record(
            va + vb, [(a, lambda g: g), (b, lambda g: g.sum(axis=0))], "add"
        )
    raise ContractError(_shapes("add", a, b) + " do not conform")


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ContractError(_shapes("sub", a, b) + " do not conform")
    return _record(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)], "sub")


def neg(a: Node) -> Node:
    return _record_moved(-a.value, [(a, lambda g: -g)], "neg")


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ContractError(_shapes("mul", a, b) + " do not conform")
    va, vb = a.value, b.value
    return _record(va * vb, [(a, lambda g: g * vb), (b, lambda g: g * va)], "mul")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _record(a.value * c, [(a, lambda g: g * c)], "scale")


def add_const(a: Node, c: float) -> Node:
    c = float(c)
    return _record(a.value + c, [(a, lambda g: g)], "add_const")


def square(a: Node) -> Node:
    va = a.value
    return _record(va * va, [(a, lambda g: g * (2.0 * va))], "square")


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _record(t, [(a, lambda g: g * (1.0 - t * t))], "tanh")


def sigmoid(a: Node) -> Node:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.value))
    return _record(s, [(a, lambda g: g * s * (1.0 - s))], "sigmoid")


def relu(a: Node) -> Node:
    va = a.value
    return _record_moved(np.maximum(va, 0.0), [(a, lambda g: g * (va > 0))], "relu")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return _record(e, [(a, lambda g: g * e)], "exp")


def log(a: Node) -> Node:
    va = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(va)
    return _record(out, [(a, lambda g: g / va)], "log")


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; gradient passes through inside the interval."""
    va = a.value
    mask = (va >= lo) & (va <= hi)
    return _record(np.clip(va, lo, hi), [(a, lambda g: g * mask)], "clamp")


def maximum_scalar(a: Node, c: float) -> Node:
    """max(a, c) elementwise; gradient flows only where a > c."""
    va = a.value
    mask = va > c
    return _record(np.maximum(va, c), [(a, lambda g: g * mask)], "maximum_scalar")


# ---------------------------------------------------------------------------
# Linear algebra and shape primitives
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    va, vb = a.value, b.value
    if va.ndim == 2 and vb.ndim == 2:
        if va.shape[1] != vb.shape[0]:
            raise ContractError(_shapes("matmul", a, b) + " do not conform")
        out = va @ vb
        return _record(out, [(a, lambda g: g @ vb.T), (b, lambda g: va.T @ g)], "matmul")
    if va.ndim == 2 and vb.ndim == 1:
        if va.shape[1] != vb.shape[0]:
            raise ContractError(_shapes("matmul", a, b) + " do not conform")
        out = va @ vb
        return _record(
            out, [(a, lambda g: np.outer(g, vb)), (b, lambda g: va.T @ g)], "matmul"
        )
    if va.ndim == 1 and vb.ndim == 2:
        if va.shape[0] != vb.shape[0]:
            raise ContractError(_shapes("matmul", a, b) + " do not conform")
        out = va @ vb
        return _record(
            out, [(a, lambda g: vb @ g), (b, lambda g: np.outer(va, g))], "matmul"
        )
    raise ContractError(_shapes("matmul", a, b) + " are not supported ranks")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ContractError(f"transpose: expected a matrix, got shape {a.value.shape}")
    return _record_moved(a.value.T, [(a, lambda g: g.T)], "transpose")


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.value.size:
        raise ContractError(
            f"reshape: cannot reshape {a.value.shape} into {shape}"
        )
    old = a.value.shape
    return _record_moved(
        a.value.reshape(shape), [(a, lambda g: g.reshape(old))], "reshape"
    )


def concat(nodes: list[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ContractError("concat: empty input list")
    ndim = nodes[0].value.ndim
    if axis >= ndim or any(n.value.ndim != ndim for n in nodes):
        raise ContractError(
            "concat: shapes " + ", ".join(str(n.value.shape) for n in nodes)
            + f" do not conform along axis {axis}"
        )
    out = np.concatenate([n.value for n in nodes], axis=axis)
    parents = []
    offset = 0
    for n in nodes:
        width = n.value.shape[axis]
        sl = [slice(None)] * ndim
        sl[axis] = slice(offset, offset + width)
        sl = tuple(sl)
        parents.append((n, lambda g, sl=sl: g[sl]))
        offset += width
    return _record_moved(out, parents, "concat")


def slice_rows(a: Node, start: int, stop: int) -> Node:
    """a[start:stop] along axis 0 (elements of a vector, rows of a matrix)."""
    va = a.value
    if not (0 <= start <= stop <= va.shape[0]):
        raise ContractError(
            f"slice_rows: [{start}:{stop}] out of range for shape {va.shape}"
        )

    def rule(g):
        full = np.zeros_like(va)
        full[start:stop] = g
        return full

    return _record_moved(va[start:stop], [(a, rule)], "slice_rows")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    """a[:, start:stop] for matrices."""
    va = a.value
    if va.ndim != 2:
        raise ContractError(f"slice_cols: expected a matrix, got shape {va.shape}")
    if not (0 <= start <= stop <= va.shape[1]):
        raise ContractError(
            f"slice_cols: [{start}:{stop}] out of range for shape {va.shape}"
        )

    def rule(g):
        full = np.zeros_like(va)
        full[:, start:stop] = g
        return full

    return _record_moved(va[:, start:stop], [(a, rule)], "slice_cols")


def gather_rows(table: Node, ids) -> Node:
    """Row gather table[ids]; duplicate ids accumulate gradient on backward."""
    ids = np.asarray(ids, dtype=np.int64)
    vt = table.value
    if vt.ndim != 2:
        raise ContractError(f"gather_rows: expected a matrix, got shape {vt.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vt.shape[0]):
        raise ContractError(
            f"gather_rows: index out of range for table shape {vt.shape}"
        )

    def rule(g):
        full = np.zeros_like(vt)
        np.add.at(full, ids, g)
        return full

    return _record_moved(vt[ids], [(table, rule)], "gather_rows")


def pick(a: Node, cols) -> Node:
    """out[i] = a[i, cols[i]] for a matrix a; used for per-token likelihoods."""
    cols = np.asarray(cols, dtype=np.int64)
    va = a.value
    if va.ndim != 2 or cols.shape != (va.shape[0],):
        raise ContractError(
            f"pick: shapes {va.shape} and {cols.shape} do not conform"
        )
    if cols.size and (cols.min() < 0 or cols.max() >= va.shape[1]):
        raise ContractError(f"pick: column index out of range for shape {va.shape}")
    rows = np.arange(va.shape[0])

    def rule(g):
        full = np.zeros_like(va)
        full[rows, cols] = g
        return full

    return _record_moved(va[rows, cols], [(a, rule)], "pick")


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------


def total(a: Node) -> Node:
    """Sum of all entries, as a scalar node."""
    shape = a.value.shape
    out = np.asarray(a.value.sum(), dtype=a.value.dtype)
    return _record(out, [(a, lambda g: np.broadcast_to(g, shape).copy())], "sum")


def mean(a: Node) -> Node:
    """Mean of all entries, as a scalar node."""
    shape = a.value.shape
    n = a.value.size
    out = np.asarray(a.value.mean(), dtype=a.value.dtype)
    return _record(
        out, [(a, lambda g: np.broadcast_to(g / n, shape).copy())], "mean"
    )


def softmax(a: Node) -> Node:
    """Softmax over the last axis, computed with max-subtraction."""
    va = a.value
    shifted = va - va.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - dot)

    return _record(s, [(a, rule)], "softmax")


def log_softmax(a: Node) -> Node:
    """Log-softmax over the last axis, computed with max-subtraction."""
    va = a.value
    shifted = va - va.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def rule(g):
        return g - sm * g.sum(axis=-1, keepdims=True)

    return _record(out, [(a, rule)], "log_softmax")


_RMSNORM_EPS = 1e-5


def rmsnorm(a: Node) -> Node:
    """Scale each row (last axis) of a to unit root-mean-square."""
    va = a.value
    n = va.shape[-1]
    ms = (va * va).mean(axis=-1, keepdims=True) + _RMSNORM_EPS
    s = ms ** -0.5
    out = va * s

    def rule(g):
        dot = (va * g).sum(axis=-1, keepdims=True)
        return s * (g - va * dot * (s * s) / n)

    return _record(out, [(a, rule)], "rmsnorm")
