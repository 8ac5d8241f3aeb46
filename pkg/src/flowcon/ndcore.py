"""Dense-tensor math with reverse-mode differentiation.

A ``Graph`` is a topologically ordered program over a small closed set of
operation kinds: add, multiply, matmul, affine, tanh, exp, log, sum, mean,
slice/concat along the last axis, square, negation, scalar ops, and clamp.
Operations evaluate eagerly when their inputs carry values, so a graph built
from bound leaves doubles as its own forward pass; ``evaluate`` re-runs the
program under fresh leaf bindings and ``gradients`` performs one reverse
sweep from a scalar root.

All math is 64-bit.  Any non-finite forward value or gradient raises
``NumericError`` naming the offending node.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

Array = np.ndarray


class Tensor:
    """Dense n-dimensional value: shape, flat row-major float64 data, grad flag."""

    __slots__ = ("shape", "data", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        self.shape = tuple(arr.shape)
        self.data = arr.reshape(-1)
        self.requires_grad = bool(requires_grad)

    def as_array(self) -> Array:
        """Row-major view of the flat data at the declared shape."""
        return self.data.reshape(self.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("idx", "kind", "inputs", "attrs", "value", "grad", "needs_grad", "name")

    def __init__(self, idx, kind, inputs, attrs, needs_grad, name=None):
        self.idx = idx
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs or {}
        self.value: Array | None = None
        self.grad: Array | None = None
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.attrs["shape"]

    def label(self) -> str:
        base = f"#{self.idx}:{self.kind}"
        return f"{base}({self.name})" if self.name else base

    def __repr__(self) -> str:
        return f"Node({self.label()}, shape={self.shape})"


def _mm(a: Array, b: Array, ta: bool, tb: bool) -> Array:
    return (a.T if ta else a) @ (b.T if tb else b)


class Graph:
    """Topologically ordered computation graph; nodes append in creation order.

    Single-writer: one forward/backward pair at a time per instance.  Distinct
    instances are independent and may live on distinct threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaf_ids: list[int] = []
        self._evaluated = False

    # -- node construction -------------------------------------------------

    def _append(self, kind, inputs, shape, attrs=None, needs_grad=None, name=None) -> Node:
        attrs = dict(attrs or {})
        attrs["shape"] = tuple(shape)
        if needs_grad is None:
            needs_grad = any(n.needs_grad for n in inputs)
        node = Node(len(self.nodes), kind, list(inputs), attrs, needs_grad, name)
        self.nodes.append(node)
        return node

    def leaf(self, tensor: Tensor | None = None, shape: Sequence[int] | None = None,
             requires_grad: bool | None = None, name: str | None = None) -> Node:
        """Input/parameter placeholder, optionally bound to an initial value."""
        if tensor is None and shape is None:
            raise ShapeError("leaf needs a Tensor or an explicit shape")
        if tensor is not None:
            shape = tensor.shape
            if requires_grad is None:
                requires_grad = tensor.requires_grad
        node = self._append("leaf", [], shape, needs_grad=bool(requires_grad), name=name)
        if tensor is not None:
            node.value = tensor.as_array()
        self.leaf_ids.append(node.idx)
        return node

    def constant(self, values, name: str | None = None) -> Node:
        arr = np.asarray(values, dtype=np.float64)
        node = self._append("const", [], arr.shape, needs_grad=False, name=name)
        node.value = arr
        return node

    def _op(self, kind, inputs, shape, attrs=None, name=None) -> Node:
        node = self._append(kind, inputs, shape, attrs, name=name)
        if all(n.value is not None for n in inputs):
            self._compute(node)
        return node

    # -- operation builders -------------------------------------------------

    def _binary_shape(self, kind, a: Node, b: Node) -> tuple:
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shapes {a.shape} vs {b.shape}", node=f"#{len(self.nodes)}")
        return a.shape

    def add(self, a: Node, b: Node, name=None) -> Node:
        return self._op("add", [a, b], self._binary_shape("add", a, b), name=name)

    def multiply(self, a: Node, b: Node, name=None) -> Node:
        return self._op("multiply", [a, b], self._binary_shape("multiply", a, b), name=name)

    def neg(self, a: Node, name=None) -> Node:
        return self._op("neg", [a], a.shape, name=name)

    def square(self, a: Node, name=None) -> Node:
        return self._op("square", [a], a.shape, name=name)

    def tanh(self, a: Node, name=None) -> Node:
        return self._op("tanh", [a], a.shape, name=name)

    def exp(self, a: Node, name=None) -> Node:
        return self._op("exp", [a], a.shape, name=name)

    def log(self, a: Node, name=None) -> Node:
        return self._op("log", [a], a.shape, name=name)

    def add_scalar(self, a: Node, c: float, name=None) -> Node:
        return self._op("add_scalar", [a], a.shape, attrs={"c": float(c)}, name=name)

    def mul_scalar(self, a: Node, c: float, name=None) -> Node:
        return self._op("mul_scalar", [a], a.shape, attrs={"c": float(c)}, name=name)

    def clamp(self, a: Node, lo: float, hi: float, name=None) -> Node:
        return self._op("clamp", [a], a.shape, attrs={"lo": float(lo), "hi": float(hi)}, name=name)

    def matmul(self, a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False,
               name=None) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2:
            raise ShapeError(f"matmul: rank-2 operands required, got {a.shape} @ {b.shape}")
        ar, ac = a.shape[::-1] if transpose_a else a.shape
        br, bc = b.shape[::-1] if transpose_b else b.shape
        if ac != br:
            raise ShapeError(f"matmul: inner dims {ac} vs {br}")
        return self._op("matmul", [a, b], (ar, bc),
                        attrs={"ta": transpose_a, "tb": transpose_b}, name=name)

    def affine(self, x: Node, w: Node, b: Node, name=None) -> Node:
        """x @ w + b with the bias broadcast along the trailing axis."""
        if len(x.shape) != 2 or len(w.shape) != 2 or len(b.shape) != 1:
            raise ShapeError(f"affine: need (n,d) @ (d,m) + (m,), got {x.shape}, {w.shape}, {b.shape}")
        if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise ShapeError(f"affine: incompatible {x.shape}, {w.shape}, {b.shape}")
        return self._op("affine", [x, w, b], (x.shape[0], w.shape[1]), name=name)

    def sum(self, a: Node, axis: int | None = None, keepdim: bool = False, name=None) -> Node:
        return self._reduce("sum", a, axis, keepdim, name)

    def mean(self, a: Node, axis: int | None = None, keepdim: bool = False, name=None) -> Node:
        return self._reduce("mean", a, axis, keepdim, name)

    def _reduce(self, kind, a: Node, axis, keepdim, name) -> Node:
        if axis is None:
            shape = ()
        elif axis == -1 or axis == len(a.shape) - 1:
            axis = -1
            shape = a.shape[:-1] + ((1,) if keepdim else ())
        else:
            raise ShapeError(f"{kind}: only full or last-axis reduction, got axis={axis}")
        return self._op(kind, [a], shape, attrs={"axis": axis, "keepdim": keepdim}, name=name)

    def slice_last(self, a: Node, lo: int, hi: int, name=None) -> Node:
        d = a.shape[-1]
        if not (0 <= lo <= hi <= d):
            raise ShapeError(f"slice_last: [{lo}:{hi}] out of range for last dim {d}")
        return self._op("slice_last", [a], a.shape[:-1] + (hi - lo,),
                        attrs={"lo": lo, "hi": hi}, name=name)

    def concat_last(self, parts: Sequence[Node], name=None) -> Node:
        if not parts:
            raise ShapeError("concat_last: empty input list")
        lead = parts[0].shape[:-1]
        if any(p.shape[:-1] != lead for p in parts):
            raise ShapeError(f"concat_last: leading shapes differ: {[p.shape for p in parts]}")
        total = sum(p.shape[-1] for p in parts)
        return self._op("concat_last", list(parts), lead + (total,), name=name)

    # -- forward ------------------------------------------------------------

    def _compute(self, node: Node) -> None:
        k = node.kind
        xs = [n.value for n in node.inputs]
        a = node.attrs
        if k == "add":
            v = xs[0] + xs[1]
        elif k == "multiply":
            v = xs[0] * xs[1]
        elif k == "neg":
            v = -xs[0]
        elif k == "square":
            v = xs[0] * xs[0]
        elif k == "tanh":
            v = np.tanh(xs[0])
        elif k == "exp":
            with np.errstate(over="ignore"):
                v = np.exp(xs[0])
        elif k == "log":
            with np.errstate(invalid="ignore", divide="ignore"):
                v = np.log(xs[0])
        elif k == "add_scalar":
            v = xs[0] + a["c"]
        elif k == "mul_scalar":
            v = xs[0] * a["c"]
        elif k == "clamp":
            v = np.clip(xs[0], a["lo"], a["hi"])
        elif k == "matmul":
            v = _mm(xs[0], xs[1], a["ta"], a["tb"])
        elif k == "affine":
            v = xs[0] @ xs[1] + xs[2]
        elif k in ("sum", "mean"):
            fn = np.sum if k == "sum" else np.mean
            if a["axis"] is None:
                v = np.asarray(fn(xs[0]))
            else:
                v = fn(xs[0], axis=-1, keepdims=a["keepdim"])
        elif k == "slice_last":
            v = xs[0][..., a["lo"]:a["hi"]]
        elif k == "concat_last":
            v = np.concatenate(xs, axis=-1)
        else:
            raise ShapeError(f"unknown operation kind {k!r}", node=node.label())
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite forward value", node=node.label())
        node.value = v

    # -- backward rules -----------------------------------------------------

    def _backward(self, node: Node, g: Array) -> list[Array | None]:
        k = node.kind
        xs = [n.value for n in node.inputs]
        a = node.attrs
        if k == "add":
            return [g, g]
        if k == "multiply":
            return [g * xs[1], g * xs[0]]
        if k == "neg":
            return [-g]
        if k == "square":
            return [2.0 * xs[0] * g]
        if k == "tanh":
            return [(1.0 - node.value * node.value) * g]
        if k == "exp":
            return [node.value * g]
        if k == "log":
            return [g / xs[0]]
        if k == "add_scalar":
            return [g]
        if k == "mul_scalar":
            return [g * a["c"]]
        if k == "clamp":
            inside = (xs[0] >= a["lo"]) & (xs[0] <= a["hi"])
            return [g * inside]
        if k == "matmul":
            ta, tb = a["ta"], a["tb"]
            ga = _mm(g, xs[1], False, not tb)
            gb = _mm(xs[0], g, not ta, False)
            if ta:
                ga = ga.T
            if tb:
                gb = gb.T
            return [np.ascontiguousarray(ga), np.ascontiguousarray(gb)]
        if k == "affine":
            return [g @ xs[1].T, xs[0].T @ g, g.sum(axis=0)]
        if k == "sum":
            if a["axis"] is None:
                return [np.broadcast_to(g, xs[0].shape).copy()]
            gg = g if a["keepdim"] else g[..., None]
            return [np.broadcast_to(gg, xs[0].shape).copy()]
        if k == "mean":
            if a["axis"] is None:
                return [np.broadcast_to(g / xs[0].size, xs[0].shape).copy()]
            gg = g if a["keepdim"] else g[..., None]
            return [np.broadcast_to(gg / xs[0].shape[-1], xs[0].shape).copy()]
        if k == "slice_last":
            out = np.zeros_like(xs[0])
            out[..., a["lo"]:a["hi"]] = g
            return [out]
        if k == "concat_last":
            outs = []
            ofs = 0
            for x in xs:
                w = x.shape[-1]
                outs.append(np.ascontiguousarray(g[..., ofs:ofs + w]))
                ofs += w
            return outs
        raise ShapeError(f"unknown operation kind {k!r}", node=node.label())


def evaluate(graph: Graph, leaf_bindings: Mapping[int, Tensor]) -> Tensor:
    """Run the program under ``leaf_bindings`` and return the root value.

    Every leaf must be bound.  Intermediates are cached on the nodes for a
    subsequent ``gradients`` sweep.  Deterministic: identical bindings give
    bit-identical outputs.
    """
    if not graph.nodes:
        raise StateError("evaluate on empty graph")
    for node in graph.nodes:
        if node.kind == "leaf":
            if node.idx not in leaf_bindings:
                raise StateError(f"leaf {node.label()} not bound")
            t = leaf_bindings[node.idx]
            if tuple(t.shape) != node.shape:
                raise ShapeError(f"binding shape {t.shape} != declared {node.shape}",
                                 node=node.label())
            node.value = t.as_array()
        elif node.kind == "const":
            pass
        else:
            graph._compute(node)
    graph._evaluated = True
    return Tensor(graph.nodes[-1].value)


def gradients(graph: Graph, root: Node) -> dict[int, Tensor]:
    """Reverse sweep from a scalar ``root``: returns d(root)/d(leaf) per grad leaf.

    Contributions across fan-out accumulate.  Requires a completed forward
    pass on this graph instance.
    """
    if root.value is None:
        raise StateError("backward before forward: root has no value")
    if any(graph.nodes[i].value is None for i in graph.leaf_ids):
        raise StateError("backward before forward: unbound leaves")
    if root.value.size != 1:
        raise ShapeError(f"gradients root must be scalar, got shape {root.shape}")
    for node in graph.nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(graph.nodes[: root.idx + 1]):
        if node.grad is None or not node.needs_grad or not node.inputs:
            continue
        contribs = graph._backward(node, node.grad)
        for inp, contrib in zip(node.inputs, contribs):
            if contrib is None or not inp.needs_grad:
                continue
            if not np.all(np.isfinite(contrib)):
                raise NumericError("non-finite gradient", node=node.label())
            if inp.grad is None:
                inp.grad = np.zeros(inp.shape, dtype=np.float64)
            inp.grad += contrib
    out: dict[int, Tensor] = {}
    for i in graph.leaf_ids:
        leaf = graph.nodes[i]
        if leaf.needs_grad:
            g = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape, dtype=np.float64)
            out[i] = Tensor(g)
    return out


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one probe pair per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.as_array().copy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)))
        flat[i] = orig - h
        fm = float(f(Tensor(base)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite probe value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(base.shape))
