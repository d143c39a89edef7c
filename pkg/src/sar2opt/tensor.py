"""Dense float tensors with define-by-run reverse-mode differentiation.

Values are plain row-major numpy arrays (float32 unless a wider precision
is active, see :func:`precision`).  A :class:`Node` wraps one value and
remembers how it was produced, so calling :func:`backward` on a scalar
node walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "Node",
    "abs_",
    "add",
    "backward",
    "clamp_min",
    "constant",
    "detach",
    "get_dtype",
    "grad_check",
    "kink_crossings",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "note_kink",
    "precision",
    "record_kinks",
    "reshape",
    "sub",
    "sum_",
    "unary",
]

_DTYPE_STACK = [np.dtype(np.float32)]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def get_dtype() -> np.dtype:
    return _DTYPE_STACK[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new leaf nodes are created with.

    Results of operations follow numpy promotion, so a float64 leaf mixed
    with float32 parameters yields float64 results.
    """
    _DTYPE_STACK.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """Graph vertex: a value, its gradient slot and the producing operation."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "op", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(value, dtype=get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        self.value: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple["Node", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = name or "leaf"

    @classmethod
    def _result(cls, value: np.ndarray, parents: Sequence["Node"], backward_fn: BackwardFn, op: str) -> "Node":
        node = cls.__new__(cls)
        value = np.asarray(value)
        if value.ndim == 0:
            value = value.reshape(1)
        node.value = value
        node.grad = None
        node.op = op
        node.requires_grad = any(p.requires_grad for p in parents)
        if node.requires_grad:
            node.parents = tuple(parents)
            node._backward = backward_fn
        else:
            node.parents = ()
            node._backward = None
        return node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


Operand = Union[Node, float, int, np.ndarray]


def _check_shape(shape: Tuple[int, ...]) -> None:
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise DimensionError(f"tensor shape must be non-empty with every dimension >= 1, got {shape}")


def constant(value) -> Node:
    return Node(value, requires_grad=False, name="const")


def _as_node(x: Operand, like: Optional[Node] = None) -> Node:
    if isinstance(x, Node):
        return x
    if like is not None and np.ndim(x) == 0:
        # python scalars adopt the partner's dtype
        arr = np.asarray(x, dtype=like.value.dtype).reshape(1)
        node = Node.__new__(Node)
        node.value, node.grad, node.requires_grad = arr, None, False
        node.parents, node._backward, node.op = (), None, "const"
        return node
    return constant(x)


def detach(x: Node) -> Node:
    """Same value, cut from the graph."""
    out = Node.__new__(Node)
    out.value, out.grad, out.requires_grad = x.value, None, False
    out.parents, out._backward, out.op = (), None, "detach"
    return out


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def add(a: Operand, b: Operand) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Node._result(a.value + b.value, (a, b), bw, "add")


def sub(a: Operand, b: Operand) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Node._result(a.value - b.value, (a, b), bw, "sub")


def mul(a: Operand, b: Operand) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Node._result(av * bv, (a, b), bw, "mul")


def _binary_operands(a: Operand, b: Operand) -> Tuple[Node, Node]:
    if isinstance(a, Node):
        return a, _as_node(b, like=a)
    if isinstance(b, Node):
        return _as_node(a, like=b), b
    return constant(a), constant(b)


def neg(a: Node) -> Node:
    return Node._result(-a.value, (a,), lambda g: (-g,), "neg")


_KINK_LOGS: list = []


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the arguments of piecewise ops (offset so the kink sits at 0)."""
    log_: list = []
    _KINK_LOGS.append(log_)
    try:
        yield log_
    finally:
        _KINK_LOGS.pop()


def note_kink(values: np.ndarray) -> None:
    if _KINK_LOGS:
        _KINK_LOGS[-1].append(values)


def unary(a: Node, value: np.ndarray, dvalue: Callable[[], np.ndarray], op: str) -> Node:
    """Elementwise op with local derivative ``dvalue()`` evaluated lazily."""
    return Node._result(value, (a,), lambda g: (g * dvalue(),), op)


def log(a: Node) -> Node:
    av = a.value
    return unary(a, np.log(av), lambda: 1.0 / av, "log")


def abs_(a: Node) -> Node:
    av = a.value
    note_kink(av)
    return unary(a, np.abs(av), lambda: np.sign(av), "abs")


def clamp_min(a: Node, floor: float) -> Node:
    av = a.value
    note_kink(av - floor)
    return unary(a, np.maximum(av, floor), lambda: (av >= floor).astype(av.dtype), "clamp_min")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return Node._result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _check_axis(a: Node, axis: Optional[int]) -> None:
    if axis is not None and not (-a.value.ndim <= axis < a.value.ndim):
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")


def sum_(a: Node, axis: Optional[int] = None) -> Node:
    _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        return Node._result(a.value.sum(), (a,), lambda g: (np.broadcast_to(g.reshape(()), shape),), "sum")
    ax = axis % a.value.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(_drop(shape, ax)), ax), shape),)

    return Node._result(a.value.sum(axis=ax), (a,), bw, "sum")


def mean(a: Node, axis: Optional[int] = None) -> Node:
    _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        n = a.value.size
        return Node._result(a.value.mean(), (a,), lambda g: (np.broadcast_to(g.reshape(()) / n, shape),), "mean")
    ax = axis % a.value.ndim
    n = shape[ax]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(_drop(shape, ax)), ax) / n, shape),)

    return Node._result(a.value.mean(axis=ax), (a,), bw, "mean")


def _drop(shape: Tuple[int, ...], ax: int) -> Tuple[int, ...]:
    out = shape[:ax] + shape[ax + 1:]
    return out if out else (1,)


def matmul(a: Node, b: Node) -> Node:
    a, b = _binary_operands(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Node._result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def _topological(root: Node) -> list:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> Dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) for every ``requires_grad`` ancestor.

    Leaves also get the result stored in ``.grad`` (overwritten, not summed
    across calls).  Returns the full gradient map.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    out: Dict[Node, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        out[node] = g
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.value.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg.copy() if prev is None else prev + pg
    return out


def _sign_pattern(f: Callable[[Node], Node], x: np.ndarray) -> np.ndarray:
    with record_kinks() as seen:
        f(Node(x))
    if not seen:
        return np.zeros(0, dtype=bool)
    return np.concatenate([np.asarray(v).reshape(-1) > 0 for v in seen])


def kink_crossings(f: Callable[[Node], Node], x, eps: float = 1e-3) -> list:
    """Elements whose +/-eps probes flip the side of some relu/abs/clamp kink.

    :func:`grad_check` is only meaningful on inputs where this is empty.
    """
    base = np.array(x, dtype=get_dtype()).astype(np.float64)
    with precision(np.float64):
        ref = _sign_pattern(f, base)
        bad = []
        for i in range(base.size):
            for step in (eps, -eps):
                probe = base.copy()
                probe.flat[i] += step
                if not np.array_equal(_sign_pattern(f, probe), ref):
                    bad.append(i)
                    break
    return bad


def grad_check(f: Callable[[Node], Node], x, eps: float = 1e-3) -> float:
    """Max relative error between autodiff and a float64 central difference.

    ``f`` maps a node to a scalar node.  The autodiff side runs at the
    default precision; every finite-difference probe runs under float64.
    Inputs within ``eps`` of a kink are the caller's responsibility.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x32 = np.array(x, dtype=get_dtype())
    xn = Node(x32, requires_grad=True)
    out = f(xn)
    if out.value.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    analytic = backward(out).get(xn)
    analytic = np.zeros(x32.shape) if analytic is None else analytic.astype(np.float64)

    base = x32.astype(np.float64)
    numeric = np.empty(base.size)
    with precision(np.float64):
        for i in range(base.size):
            probe = base.copy()
            probe.flat[i] += eps
            fp = float(f(Node(probe)).value.reshape(-1)[0])
            probe.flat[i] -= 2 * eps
            fm = float(f(Node(probe)).value.reshape(-1)[0])
            numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
