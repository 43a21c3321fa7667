"""Reverse-mode automatic differentiation on small dense float64 tensors.

The backward pass emits ordinary graph nodes instead of raw arrays, so a
gradient is itself a differentiable expression.  Calling :func:`backward` on a
function of a gradient yields second-order derivatives; this is what lets an
inner SGD step stay differentiable with respect to loss parameters.

Shape discipline is strict: elementwise ops require identical shapes, except
that a scalar (shape ()) may combine with any tensor.  There is no other
broadcasting.  matmul is 2-D only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Tensor",
    "Node",
    "leaf",
    "constant",
    "detach",
    "add",
    "sub",
    "mul",
    "matmul",
    "scalar_mul",
    "transpose",
    "repeat_rows",
    "reduce_sum",
    "reduce_mean",
    "square",
    "relu",
    "softplus",
    "sigmoid",
    "tanh",
    "sin",
    "cos",
    "concat",
    "narrow",
    "backward",
]


class GraphError(Exception):
    """Raised for malformed graph construction or backward calls."""


class ShapeError(GraphError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense float64 array in row-major order.

    Construction validates that every entry is finite; NaN and Inf are
    rejected so that divergence is caught where data enters a graph, not
    deep inside a training loop.
    """

    __slots__ = ("array",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor requires finite values, got NaN or Inf")
        self.array = arr

    @property
    def shape(self) -> tuple:
        return self.array.shape

    def tolist(self):
        return self.array.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.array.shape})"


def _tensor(arr: np.ndarray) -> Tensor:
    # Internal fast path: wraps an array we already trust without the
    # finiteness scan.  Op results can overflow to inf (e.g. exp in a
    # diverging run); the training-level guards are responsible for those.
    t = Tensor.__new__(Tensor)
    t.array = arr
    return t


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("value", "op", "parents", "requires_grad", "meta")

    def __init__(self, value: Tensor, op: str, parents: tuple, requires_grad: bool, meta=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.meta = meta

    @property
    def shape(self) -> tuple:
        return self.value.array.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def item(self) -> float:
        return float(self.value.array)

    def sum(self, axis=None) -> "Node":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Node":
        return reduce_mean(self, axis)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(data, requires_grad: bool = False) -> Node:
    """Wrap data as a graph input."""
    value = data if isinstance(data, Tensor) else Tensor(data)
    return Node(value, "leaf", (), requires_grad)


def constant(data) -> Node:
    return leaf(data, requires_grad=False)


def _const_arr(arr: np.ndarray) -> Node:
    return Node(_tensor(arr), "leaf", (), False)


def detach(node: Node) -> Node:
    """Cut a node out of the graph, keeping its value."""
    return Node(node.value, "leaf", (), False)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    raise GraphError(f"expected a Node, got {type(x).__name__}")


def _binary_shapes(op: str, a: Node, b: Node) -> tuple:
    sa, sb = a.value.array.shape, b.value.array.shape
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("add", a, b)
    return Node(_tensor(a.value.array + b.value.array), "add", (a, b),
                a.requires_grad or b.requires_grad)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("sub", a, b)
    return Node(_tensor(a.value.array - b.value.array), "sub", (a, b),
                a.requires_grad or b.requires_grad)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("mul", a, b)
    return Node(_tensor(a.value.array * b.value.array), "mul", (a, b),
                a.requires_grad or b.requires_grad)


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.value.array.shape, b.value.array.shape
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    return Node(_tensor(a.value.array @ b.value.array), "matmul", (a, b),
                a.requires_grad or b.requires_grad)


def scalar_mul(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return Node(_tensor(a.value.array * c), "scalar_mul", (a,), a.requires_grad, c)


def transpose(a) -> Node:
    a = _as_node(a)
    if a.value.array.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.value.array.shape}")
    return Node(_tensor(np.ascontiguousarray(a.value.array.T)), "transpose", (a,),
                a.requires_grad)


def repeat_rows(v, n: int) -> Node:
    """Tile a vector of shape (k,) into an (n, k) matrix."""
    v = _as_node(v)
    if v.value.array.ndim != 1:
        raise ShapeError(f"repeat_rows: expected 1-D, got shape {v.value.array.shape}")
    out = np.broadcast_to(v.value.array, (n, v.value.array.shape[0]))
    return Node(_tensor(np.ascontiguousarray(out)), "repeat_rows", (v,), v.requires_grad, n)


def reduce_sum(a, axis=None) -> Node:
    a = _as_node(a)
    arr = a.value.array
    if axis is None:
        out = np.sum(arr)
    else:
        if arr.ndim != 2 or axis not in (0, 1):
            raise ShapeError(f"reduce_sum: axis {axis} invalid for shape {arr.shape}")
        out = np.sum(arr, axis=axis)
    return Node(_tensor(np.asarray(out)), "sum", (a,), a.requires_grad, axis)


def reduce_mean(a, axis=None) -> Node:
    a = _as_node(a)
    n = a.value.array.size if axis is None else a.value.array.shape[axis]
    if n == 0:
        raise ShapeError("reduce_mean over empty axis")
    return scalar_mul(reduce_sum(a, axis), 1.0 / n)


def square(a) -> Node:
    a = _as_node(a)
    return Node(_tensor(a.value.array * a.value.array), "square", (a,), a.requires_grad)


def relu(a) -> Node:
    a = _as_node(a)
    return Node(_tensor(np.maximum(a.value.array, 0.0)), "relu", (a,), a.requires_grad)


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Node:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    a = _as_node(a)
    x = a.value.array
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Node(_tensor(out), "softplus", (a,), a.requires_grad)


def sigmoid(a) -> Node:
    a = _as_node(a)
    return Node(_tensor(_sigmoid_value(a.value.array)), "sigmoid", (a,), a.requires_grad)


def tanh(a) -> Node:
    a = _as_node(a)
    return Node(_tensor(np.tanh(a.value.array)), "tanh", (a,), a.requires_grad)


def sin(a) -> Node:
    a = _as_node(a)
    return Node(_tensor(np.sin(a.value.array)), "sin", (a,), a.requires_grad)


def cos(a) -> Node:
    a = _as_node(a)
    return Node(_tensor(np.cos(a.value.array)), "cos", (a,), a.requires_grad)


def concat(nodes, axis: int = 0) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    if not nodes:
        raise GraphError("concat of an empty sequence")
    ndim = nodes[0].value.array.ndim
    for n in nodes[1:]:
        if n.value.array.ndim != ndim:
            raise ShapeError(
                f"concat: rank mismatch {nodes[0].value.array.shape} and {n.value.array.shape}")
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} invalid for rank {ndim}")
    for n in nodes[1:]:
        sa = list(nodes[0].value.array.shape)
        sb = list(n.value.array.shape)
        sa.pop(axis)
        sb.pop(axis)
        if sa != sb:
            raise ShapeError(
                f"concat: incompatible shapes {nodes[0].value.array.shape} and {n.value.array.shape}")
    out = np.concatenate([n.value.array for n in nodes], axis=axis)
    return Node(_tensor(out), "concat", nodes, any(n.requires_grad for n in nodes), axis)


def narrow(a, axis: int, start: int, stop: int) -> Node:
    """Contiguous slice [start:stop) along one axis."""
    a = _as_node(a)
    arr = a.value.array
    if not 0 <= axis < arr.ndim:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {arr.shape}")
    if not 0 <= start < stop <= arr.shape[axis]:
        raise ShapeError(f"narrow: bounds [{start}, {stop}) invalid for shape {arr.shape}")
    idx = tuple(slice(start, stop) if d == axis else slice(None) for d in range(arr.ndim))
    return Node(_tensor(np.ascontiguousarray(arr[idx])), "narrow", (a,), a.requires_grad,
                (axis, start, stop))


def _embed(g: Node, shape: tuple, axis: int, start: int, stop: int) -> Node:
    # Adjoint of narrow: place g into a zero tensor of the parent's shape.
    out = np.zeros(shape)
    idx = tuple(slice(start, stop) if d == axis else slice(None) for d in range(len(shape)))
    out[idx] = g.value.array
    return Node(_tensor(out), "embed", (g,), g.requires_grad, (axis, start, stop))


# ---------------------------------------------------------------------------
# backward rules: each returns per-parent gradient nodes, built from the
# primitives above so the result is differentiable again.


def _sum_to_scalar(g: Node) -> Node:
    return g if g.value.array.shape == () else reduce_sum(g)


def _grad_for_side(g: Node, side: Node) -> Node:
    # Handles the scalar-with-tensor broadcast case of add/sub/mul.
    if side.value.array.shape == () and g.value.array.shape != ():
        return _sum_to_scalar(g)
    return g


def _vjp_add(node, g):
    a, b = node.parents
    return _grad_for_side(g, a), _grad_for_side(g, b)


def _vjp_sub(node, g):
    a, b = node.parents
    ga = _grad_for_side(g, a)
    gb = _grad_for_side(g, b)
    return ga, scalar_mul(gb, -1.0)


def _vjp_mul(node, g):
    a, b = node.parents
    ga = mul(g, b)
    gb = mul(g, a)
    if a.value.array.shape == () and g.value.array.shape != ():
        ga = _sum_to_scalar(ga)
    if b.value.array.shape == () and g.value.array.shape != ():
        gb = _sum_to_scalar(gb)
    return ga, gb


def _vjp_matmul(node, g):
    a, b = node.parents
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_scalar_mul(node, g):
    return (scalar_mul(g, node.meta),)


def _vjp_transpose(node, g):
    return (transpose(g),)


def _vjp_repeat_rows(node, g):
    return (reduce_sum(g, axis=0),)


def _vjp_sum(node, g):
    (a,) = node.parents
    shape = a.value.array.shape
    axis = node.meta
    if axis is None:
        if shape == ():
            return (g,)
        return (mul(g, _const_arr(np.ones(shape))),)
    if axis == 0:
        return (repeat_rows(g, shape[0]),)
    return (transpose(repeat_rows(g, shape[1])),)


def _vjp_square(node, g):
    (a,) = node.parents
    return (scalar_mul(mul(g, a), 2.0),)


def _vjp_relu(node, g):
    (a,) = node.parents
    mask = (a.value.array > 0.0).astype(np.float64)
    return (mul(g, _const_arr(mask)),)


def _vjp_softplus(node, g):
    (a,) = node.parents
    return (mul(g, sigmoid(a)),)


def _vjp_sigmoid(node, g):
    (a,) = node.parents
    s = sigmoid(a)
    one = _const_arr(np.ones(s.value.array.shape))
    return (mul(mul(g, s), sub(one, s)),)


def _vjp_tanh(node, g):
    (a,) = node.parents
    y = tanh(a)
    one = _const_arr(np.ones(y.value.array.shape))
    return (mul(g, sub(one, square(y))),)


def _vjp_sin(node, g):
    (a,) = node.parents
    return (mul(g, cos(a)),)


def _vjp_cos(node, g):
    (a,) = node.parents
    return (scalar_mul(mul(g, sin(a)), -1.0),)


def _vjp_concat(node, g):
    axis = node.meta
    grads = []
    offset = 0
    for p in node.parents:
        size = p.value.array.shape[axis]
        grads.append(narrow(g, axis, offset, offset + size))
        offset += size
    return tuple(grads)


def _vjp_narrow(node, g):
    (a,) = node.parents
    axis, start, stop = node.meta
    return (_embed(g, a.value.array.shape, axis, start, stop),)


def _vjp_embed(node, g):
    axis, start, stop = node.meta
    return (narrow(g, axis, start, stop),)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "scalar_mul": _vjp_scalar_mul,
    "transpose": _vjp_transpose,
    "repeat_rows": _vjp_repeat_rows,
    "sum": _vjp_sum,
    "square": _vjp_square,
    "relu": _vjp_relu,
    "softplus": _vjp_softplus,
    "sigmoid": _vjp_sigmoid,
    "tanh": _vjp_tanh,
    "sin": _vjp_sin,
    "cos": _vjp_cos,
    "concat": _vjp_concat,
    "narrow": _vjp_narrow,
    "embed": _vjp_embed,
}


def backward(root: Node, wrt, create_graph: bool = False) -> list:
    """Gradients of a scalar root with respect to each node in wrt.

    Returns one gradient node per entry of wrt, shaped like that entry.
    With create_graph=True the gradients remain connected to the original
    graph, so they can be differentiated again; otherwise they are detached
    constants.  A wrt node the root does not depend on gets a zero gradient.
    """
    root = _as_node(root)
    wrt = [_as_node(w) for w in wrt]
    if root.value.array.shape != ():
        raise GraphError(f"backward root must be scalar, got shape {root.value.array.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise GraphError("backward target does not require grad")

    # Post-order over the requires_grad subgraph: parents precede dependents.
    order = []
    state = {}  # id -> 0 discovered, 1 done
    stack = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        mark = state.get(nid)
        if mark is None:
            state[nid] = 0
            for p in node.parents:
                if p.requires_grad and state.get(id(p)) is None:
                    stack.append(p)
        elif mark == 0:
            state[nid] = 1
            order.append(node)
            stack.pop()
        else:
            stack.pop()

    grads = {id(root): _const_arr(np.asarray(1.0))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.op == "leaf":
            continue
        for parent, pg in zip(node.parents, _VJPS[node.op](node, g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            held = grads.get(pid)
            grads[pid] = pg if held is None else add(held, pg)

    results = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = _const_arr(np.zeros(w.value.array.shape))
        elif not create_graph:
            g = detach(g)
        results.append(g)
    return results
