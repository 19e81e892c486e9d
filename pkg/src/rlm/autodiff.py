"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation returns a new :class:`Tensor` and, when any
input requires a gradient, records a :class:`Node` holding the inputs and a
backward rule.  Node ids come from one global counter, so creation order is a
valid topological order; :func:`backward` walks the reachable nodes in reverse
id order and visits each exactly once.

Broadcasting is deliberately limited to scalar-with-tensor.  Row-wise bias
addition has its own operation (:func:`add_row`).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_ids = itertools.count()


class _Mode:
    grad_enabled = True
    check_finite = False
    tape: "Tape | None" = None


class Node:
    """One recorded operation: inputs, output id and backward rule."""

    __slots__ = ("id", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the nodes created while the tape is active.

    Use as a context manager; one tape per truncated-BPTT segment.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _Mode.tape
        _Mode.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _Mode.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        seen: set[int] = set()
        for node in self.nodes:
            for p in node.parents:
                if p.node is not None and p.node.id not in seen:
                    return False
            seen.add(node.id)
        return True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _Mode.grad_enabled
    _Mode.grad_enabled = False
    try:
        yield
    finally:
        _Mode.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool = True) -> Iterator[None]:
    """Raise ``FloatingPointError`` when an op turns finite inputs non-finite."""
    prev = _Mode.check_finite
    _Mode.check_finite = enabled
    try:
        yield
    finally:
        _Mode.check_finite = prev


def is_grad_enabled() -> bool:
    return _Mode.grad_enabled


class Tensor:
    """Dense array plus optional gradient and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # shape helpers -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.id

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, data={self.data!r})"

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return apply_binary("add", self, other)

    def __radd__(self, other):
        return apply_binary("add", other, self)

    def __sub__(self, other):
        return apply_binary("sub", self, other)

    def __rsub__(self, other):
        return apply_binary("sub", other, self)

    def __mul__(self, other):
        return apply_binary("mul", self, other)

    def __rmul__(self, other):
        return apply_binary("mul", other, self)

    def __neg__(self):
        return apply_binary("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    if _Mode.check_finite and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if _Mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
        if _Mode.tape is not None:
            _Mode.tape.nodes.append(out.node)
    return out


def tensor_from(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False,
                dtype=np.float64) -> Tensor:
    """Build a tensor from a shape and a flat row-major value sequence."""
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    if _is_scalar(target) and grad.ndim > 0:
        return np.asarray(grad.sum())
    return grad


def apply_binary(kind: str, a, b) -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul``; shapes must match unless one side is a scalar."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data
    if kind == "add":
        out = x + y

        def bw(g):
            return _reduce_to(g, a), _reduce_to(g, b)
    elif kind == "sub":
        out = x - y

        def bw(g):
            return _reduce_to(g, a), _reduce_to(-g, b)
    elif kind == "mul":
        out = x * y

        def bw(g):
            return _reduce_to(g * y, a), _reduce_to(g * x, b)
    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _make(out, kind, (a, b), bw)


def add(a, b) -> Tensor:
    return apply_binary("add", a, b)


def sub(a, b) -> Tensor:
    return apply_binary("sub", a, b)


def mul(a, b) -> Tensor:
    return apply_binary("mul", a, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_log(x: np.ndarray) -> None:
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")


# name -> (forward, backward(x, y, g)); backward rules are looked up at call
# time so a test can swap one out.
UNARY_RULES: dict[str, tuple[Callable, Callable]] = {
    "sigmoid": (_sigmoid, lambda x, y, g: g * y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y, g: g * (1.0 - y * y)),
    "exp": (np.exp, lambda x, y, g: g * y),
    "log": (np.log, lambda x, y, g: g / x),
}


def apply_unary(kind: str, x) -> Tensor:
    """Elementwise ``sigmoid``, ``tanh``, ``exp`` or ``log``."""
    x = _as_tensor(x)
    if kind not in UNARY_RULES:
        raise ValueError(f"unknown unary op {kind!r}")
    if kind == "log":
        _check_log(x.data)
    fwd = UNARY_RULES[kind][0]
    y = fwd(x.data)

    def bw(g):
        return (UNARY_RULES[kind][1](x.data, y, g),)

    return _make(y, kind, (x,), bw)


def sigmoid(x) -> Tensor:
    return apply_unary("sigmoid", x)


def tanh(x) -> Tensor:
    return apply_unary("tanh", x)


def exp(x) -> Tensor:
    return apply_unary("exp", x)


def log(x) -> Tensor:
    return apply_unary("log", x)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        ga = g @ y.T if a.requires_grad else None
        gb = x.T @ g if b.requires_grad else None
        return ga, gb

    return _make(x @ y, "matmul", (a, b), bw)


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D ``bias`` to every row of ``x`` along its last axis."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_row: bias {bias.shape} does not fit {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        return g, g.sum(axis=lead) if lead else g

    return _make(x.data + bias.data, "add_row", (x, bias), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make(x.data.T, "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _make(data, "reshape", (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, index: int) -> Tensor:
    """Select ``x[index]`` along the first axis."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index], "take", (x,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], "slice_rows", (x,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]`` along the last axis."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], "slice_cols", (x,), bw)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("stack: tensors differ in shape")
    parents = tuple(tensors)
    return _make(np.stack([t.data for t in parents]), "stack", parents,
                 lambda g: tuple(g[i] for i in range(len(parents))))


def gather_rows(weights: Tensor, ids) -> Tensor:
    """Row lookup ``weights[ids]``; the backward pass scatters into used rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    if weights.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D weight matrix")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.shape[0]):
        raise IndexError(f"id out of range [0, {weights.shape[0]})")
    shape, dtype = weights.shape, weights.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(weights.data[ids], "gather_rows", (weights,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), "mean", (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# norms and losses
# ---------------------------------------------------------------------------

def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at exactly zero is zero."""
    if x.size == 0:
        raise ShapeError("l2_norm of an empty tensor")
    n = np.sqrt(np.sum(x.data * x.data))

    def bw(g):
        if n == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / n,)

    return _make(np.asarray(n), "l2_norm", (x,), bw)


def vector_norms(x: Tensor) -> Tensor:
    """Euclidean norm along the last axis; zero vectors get zero gradient."""
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def bw(g):
        safe = np.where(n == 0, 1.0, n)
        scale = np.where(n == 0, 0.0, g / safe)
        return (scale[..., None] * x.data,)

    return _make(n, "vector_norms", (x,), bw)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis (plain numpy)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {targets.size} targets")
    n, v = logits.shape
    if n < 1:
        raise ShapeError("cross_entropy needs at least one row")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, targets])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _reachable(loss: Tensor) -> dict[int, Node]:
    nodes: dict[int, Node] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        n = t.node
        if n is None or n.id in nodes:
            continue
        nodes[n.id] = n
        stack_.extend(p for p in n.parents if p.node is not None)
    return nodes


def _dfs_order(loss: Tensor) -> list[Node]:
    # reverse postorder of a DFS from the loss: another valid topological order
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(loss.node, False)]
    while stack_:
        n, done = stack_.pop()
        if done:
            order.append(n)
            continue
        if n.id in seen:
            continue
        seen.add(n.id)
        stack_.append((n, True))
        for p in reversed(n.parents):
            if p.node is not None and p.node.id not in seen:
                stack_.append((p.node, False))
    return order[::-1]


def backward(loss: Tensor, order: str = "id") -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``order`` selects the traversal: ``"id"`` (reverse creation order) or
    ``"dfs"`` (reverse DFS postorder).  Both are topological.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if order == "id":
        reach = _reachable(loss)
        nodes = [reach[k] for k in sorted(reach, reverse=True)]
    elif order == "dfs":
        nodes = _dfs_order(loss)
    else:
        raise ValueError(f"unknown traversal order {order!r}")

    grads: dict[int, np.ndarray] = {loss.node.id: seed}
    for node in nodes:
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = np.array(pg, dtype=parent.dtype) if parent.grad is None else parent.grad + pg
            else:
                key = parent.node.id
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x``."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments and must return a scalar tensor built
    from ``x`` (a leaf tensor or a sequence of them).  It must be
    deterministic, so re-seed any dropout generator inside ``f``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    backward(f())
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(f, t, eps)))
    return worst
