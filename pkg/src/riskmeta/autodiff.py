"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op's backward rule is itself written with recorded ops, so a gradient
computed with ``create_graph=True`` is an ordinary node that can be
differentiated again.  This is what lets the outer update see through the
unrolled inner SGD steps.

    tape = Tape()
    x = tape.variable(3.0)
    (dx,) = backward(x * x * x, [x], create_graph=True)
    (ddx,) = backward(dx, [x])        # 6 * x = 18
"""

import itertools
from contextlib import contextmanager

import numpy as np

from . import _kernels

__all__ = [
    "ShapeError",
    "GraphError",
    "Tape",
    "Node",
    "record",
    "backward",
    "sort_desc",
    "detach",
    "OPS",
    "relu",
    "log",
    "exp",
    "square",
    "sqrt",
    "sum",
    "mean",
    "softmax",
    "logsumexp",
    "gather",
    "dot",
]

_tape_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    """Raised for non-scalar roots, foreign or detached ``wrt`` nodes, and severed paths."""


class Node:
    __slots__ = ("value", "parents", "op", "attrs", "requires_grad", "tape", "__weakref__")

    def __init__(self, value, tape, parents=(), op=None, attrs=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.op = op
        self.attrs = attrs
        self.requires_grad = requires_grad

    @property
    def graph_id(self):
        return self.tape.id

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return self.value.shape[0]

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value

    # arithmetic sugar
    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return record("add", [self._lift(other), self])

    def __sub__(self, other):
        return record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return record("sub", [self._lift(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return record("smul", [self], {"c": float(other)})
        return record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return record("smul", [self], {"c": float(other)})
        return record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return record("smul", [self], {"c": 1.0 / float(other)})
        return record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return record("div", [self._lift(other), self])

    def __neg__(self):
        return record("smul", [self], {"c": -1.0})

    def __matmul__(self, other):
        return record("matmul", [self, self._lift(other)])

    def __getitem__(self, index):
        # scalar element access for convenience; recorded as a gather on the flattened vector
        if self.value.ndim != 1:
            raise ShapeError(f"indexing supports vectors only, got shape {self.value.shape}")
        idx = np.atleast_1d(np.arange(self.value.shape[0])[index])
        out = record("gather", [self], {"index": idx})
        return out

    @property
    def T(self):
        return record("transpose", [self])


class Tape:
    """Append-only record of the nodes produced in one graph.

    ``mode`` is ``"higher_order"`` (default) or ``"first_order"``; only a
    higher-order tape accepts ``backward(..., create_graph=True)``.
    """

    def __init__(self, mode="higher_order"):
        if mode not in ("first_order", "higher_order"):
            raise ValueError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.id = next(_tape_ids)
        self.nodes = []
        self._recording = True

    def __repr__(self):
        return f"Tape(id={self.id}, mode={self.mode}, nodes={len(self.nodes)})"

    @property
    def recording(self):
        return self._recording

    @contextmanager
    def no_record(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    @contextmanager
    def _set_recording(self, flag):
        prev = self._recording
        self._recording = flag
        try:
            yield
        finally:
            self._recording = prev

    def variable(self, value, requires_grad=True):
        node = Node(_as_f64(value), self, requires_grad=requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return Node(_as_f64(value), self)

    def replay(self):
        """Recompute every recorded node from its parents, in order.

        Returns the list of recomputed values, aligned with ``self.nodes``.
        """
        fresh = {}
        out = []
        for node in self.nodes:
            if node.op is None:
                val = node.value
            else:
                args = [fresh.get(id(p), p.value) for p in node.parents]
                val = OPS[node.op].forward(args, node.attrs)
            fresh[id(node)] = val
            out.append(val)
        return out


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    # own the buffer: no in-place aliasing into recorded regions
    return arr.copy() if arr.base is not None or not arr.flags.writeable else arr


# --------------------------------------------------------------------------- op table

class _Op:
    __slots__ = ("forward", "vjp")

    def __init__(self, forward, vjp):
        self.forward = forward
        self.vjp = vjp


OPS = {}


def _register(kind):
    def wrap(cls):
        OPS[kind] = _Op(cls.forward, cls.vjp)
        return cls
    return wrap


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def sum_to(g, shape):
    if g.value.shape == tuple(shape):
        return g
    return record("sum_to", [g], {"shape": tuple(shape)})


def broadcast_to(x, shape):
    if x.value.shape == tuple(shape):
        return x
    return record("broadcast_to", [x], {"shape": tuple(shape)})


def reshape(x, shape):
    if x.value.shape == tuple(shape):
        return x
    return record("reshape", [x], {"shape": tuple(shape)})


@_register("add")
class _Add:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape("add", v[0], v[1])
        return v[0] + v[1]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        a, b = inputs
        return [sum_to(g, a.shape), sum_to(g, b.shape)]


@_register("sub")
class _Sub:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape("sub", v[0], v[1])
        return v[0] - v[1]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        a, b = inputs
        return [sum_to(g, a.shape), sum_to(-g, b.shape) if b.requires_grad else None]


@_register("mul")
class _Mul:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape("mul", v[0], v[1])
        return v[0] * v[1]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        a, b = inputs
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return [ga, gb]


@_register("div")
class _Div:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape("div", v[0], v[1])
        return v[0] / v[1]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        a, b = inputs
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-(g * out) / b, b.shape) if b.requires_grad else None
        return [ga, gb]


@_register("smul")
class _ScalarMul:
    @staticmethod
    def forward(v, attrs):
        return v[0] * attrs["c"]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [g * attrs["c"]]


@_register("matmul")
class _MatMul:
    @staticmethod
    def forward(v, attrs):
        a, b = v
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    @staticmethod
    def vjp(g, inputs, out, attrs):
        a, b = inputs
        ga = g @ b.T if a.requires_grad else None
        gb = a.T @ g if b.requires_grad else None
        return [ga, gb]


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(v, attrs):
        return np.ascontiguousarray(v[0].T)

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [g.T]


@_register("relu")
class _Relu:
    @staticmethod
    def forward(v, attrs):
        return np.maximum(v[0], 0.0)

    @staticmethod
    def vjp(g, inputs, out, attrs):
        mask = (inputs[0].value > 0.0).astype(np.float64)
        return [g * g.tape.constant(mask)]


@_register("log")
class _Log:
    @staticmethod
    def forward(v, attrs):
        return np.log(v[0])

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [g / inputs[0]]


@_register("exp")
class _Exp:
    @staticmethod
    def forward(v, attrs):
        return np.exp(v[0])

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [g * out]


@_register("square")
class _Square:
    @staticmethod
    def forward(v, attrs):
        return v[0] * v[0]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [g * (inputs[0] * 2.0)]


@_register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(v, attrs):
        return np.sqrt(v[0])

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [(g * 0.5) / out]


def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    ax = axis % len(shape)
    return tuple(1 if i == ax else s for i, s in enumerate(shape))


@_register("sum")
class _Sum:
    @staticmethod
    def forward(v, attrs):
        return np.sum(v[0], axis=attrs["axis"])

    @staticmethod
    def vjp(g, inputs, out, attrs):
        x = inputs[0]
        g2 = reshape(g, _kept_shape(x.shape, attrs["axis"]))
        return [broadcast_to(g2, x.shape)]


@_register("mean")
class _Mean:
    @staticmethod
    def forward(v, attrs):
        return np.mean(v[0], axis=attrs["axis"])

    @staticmethod
    def vjp(g, inputs, out, attrs):
        x = inputs[0]
        axis = attrs["axis"]
        n = x.value.size if axis is None else x.shape[axis]
        g2 = reshape(g * (1.0 / n), _kept_shape(x.shape, axis))
        return [broadcast_to(g2, x.shape)]


@_register("softmax")
class _Softmax:
    """Softmax along the last axis."""

    @staticmethod
    def forward(v, attrs):
        x = v[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @staticmethod
    def vjp(g, inputs, out, attrs):
        kept = _kept_shape(out.shape, -1)
        inner = reshape(record("sum", [g * out], {"axis": -1}), kept)
        return [out * (g - inner)]


@_register("logsumexp")
class _LogSumExp:
    """Row-wise log-sum-exp of a 2-d array, giving a vector."""

    @staticmethod
    def forward(v, attrs):
        if v[0].ndim != 2:
            raise ShapeError(f"logsumexp: expected a 2-d input, got shape {v[0].shape}")
        return _kernels.logsumexp_rows(v[0])

    @staticmethod
    def vjp(g, inputs, out, attrs):
        x = inputs[0]
        col = (x.shape[0], 1)
        probs = record("exp", [x - reshape(out, col)])
        return [probs * reshape(g, col)]


@_register("gather")
class _Gather:
    """Index a vector by an integer array; a permutation when the indices are one."""

    @staticmethod
    def forward(v, attrs):
        x = v[0]
        if x.ndim != 1:
            raise ShapeError(f"gather: expected a vector, got shape {x.shape}")
        return x[attrs["index"]]

    @staticmethod
    def vjp(g, inputs, out, attrs):
        n = inputs[0].shape[0]
        idx = attrs["index"]
        if idx.shape[0] == n:
            inv = np.empty_like(idx)
            inv[idx] = np.arange(n)
            if np.array_equal(np.sort(idx), np.arange(n)):
                return [record("gather", [g], {"index": inv})]
        return [record("scatter", [g], {"index": idx, "n": n})]


@_register("scatter")
class _Scatter:
    @staticmethod
    def forward(v, attrs):
        out = np.zeros(attrs["n"])
        np.add.at(out, attrs["index"], v[0])
        return out

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [record("gather", [g], {"index": attrs["index"]})]


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(v, attrs):
        try:
            return v[0].reshape(attrs["shape"])
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {v[0].shape} to {attrs['shape']}") from None

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [reshape(g, inputs[0].shape)]


@_register("broadcast_to")
class _BroadcastTo:
    @staticmethod
    def forward(v, attrs):
        try:
            return np.array(np.broadcast_to(v[0], attrs["shape"]))
        except ValueError:
            raise ShapeError(f"broadcast_to: cannot broadcast {v[0].shape} to {attrs['shape']}") from None

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [sum_to(g, inputs[0].shape)]


@_register("sum_to")
class _SumTo:
    @staticmethod
    def forward(v, attrs):
        x = v[0]
        shape = attrs["shape"]
        lead = x.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
        )
        out = x.sum(axis=axes, keepdims=True) if axes else x
        return out.reshape(shape)

    @staticmethod
    def vjp(g, inputs, out, attrs):
        return [broadcast_to(g, inputs[0].shape)]


# --------------------------------------------------------------------------- recording

def record(op_kind, inputs, attrs=None):
    """Apply ``op_kind`` to ``inputs`` and register it on their shared tape."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unsupported op {op_kind!r}") from None
    if not inputs:
        raise ValueError(f"{op_kind}: needs at least one input")
    tape = inputs[0].tape
    for x in inputs[1:]:
        if x.tape is not tape:
            raise GraphError(f"{op_kind}: inputs belong to different tapes")
    attrs = attrs or {}
    value = op.forward([x.value for x in inputs], attrs)
    if tape._recording and any(x.requires_grad for x in inputs):
        node = Node(value, tape, tuple(inputs), op_kind, attrs, requires_grad=True)
        tape.nodes.append(node)
        return node
    return Node(value, tape)


def detach(n):
    """Same value, no gradient path."""
    return Node(n.value, n.tape)


def sort_desc(losses):
    """Sort a vector node largest-first.

    Returns ``(sorted_node, perm)`` with ``sorted[i] == losses[perm[i]]``.
    The permutation is a constant under differentiation; ties keep the lower
    original index first.
    """
    if losses.value.ndim != 1:
        raise ShapeError(f"sort_desc: expected a vector, got shape {losses.value.shape}")
    perm = _kernels.argsort_desc(losses.value)
    return record("gather", [losses], {"index": perm}), perm


def _topo_order(root):
    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, wrt, create_graph=False, allow_unused=False):
    """Gradients of scalar ``root`` with respect to each node in ``wrt``.

    With ``create_graph`` the results are recorded nodes that can be
    differentiated again; otherwise they are plain arrays.  A ``wrt`` node
    with no path from ``root`` raises ``GraphError`` unless ``allow_unused``,
    in which case its entry is ``None``.
    """
    if root.value.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    for w in wrt:
        if w.tape is not tape:
            raise GraphError("backward: wrt node lives on a different tape than root")
        if not w.requires_grad:
            raise GraphError("backward: wrt node is detached (requires_grad is False)")
    if create_graph and tape.mode != "higher_order":
        raise GraphError("backward: create_graph needs a higher_order tape")

    wanted = {id(w) for w in wrt}
    found = {}
    grads = {}
    with tape._set_recording(create_graph):
        grads[id(root)] = tape.constant(np.ones_like(root.value))
        if not root.requires_grad:
            order = []
        else:
            order = _topo_order(root)
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if node.op is None:
                continue
            local = OPS[node.op].vjp(g, node.parents, node, node.attrs)
            for p, gp in zip(node.parents, local):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp

    out = []
    for w in wrt:
        g = found.get(id(w))
        if g is None:
            if not allow_unused:
                raise GraphError("backward: a wrt node has no gradient path from root")
            out.append(None)
            continue
        out.append(g if create_graph else g.value)
    return out


# --------------------------------------------------------------------------- functional wrappers

def relu(x):
    return record("relu", [x])


def log(x):
    return record("log", [x])


def exp(x):
    return record("exp", [x])


def square(x):
    return record("square", [x])


def sqrt(x):
    return record("sqrt", [x])


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    return record("sum", [x], {"axis": axis})


def mean(x, axis=None):
    return record("mean", [x], {"axis": axis})


def softmax(x):
    return record("softmax", [x])


def logsumexp(x):
    return record("logsumexp", [x])


def gather(x, index):
    return record("gather", [x], {"index": np.asarray(index, dtype=np.int64)})


def dot(a, b):
    return sum(a * b)
