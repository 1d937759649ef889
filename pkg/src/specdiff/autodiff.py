"""Dense-tensor computation graphs with reverse-mode and forward-mode differentiation.

Values are plain float64 numpy arrays. A :class:`Graph` is an append-only,
topologically ordered tape of primitive operations over three kinds of leaves
(inputs, parameters, constants). Running :func:`forward` records every
intermediate value; :func:`backward` then yields exact reverse-mode gradients.

Forward-mode is supported by letting every node carry an optional tangent
array alongside its value (a dual number at tensor granularity). The tangent
of any node can be re-entered into the tape as a first-class value via
``Graph.tangent_of``, and the reverse pass differentiates through it: each
primitive propagates adjoints for both its value and its tangent, which for
nonlinear primitives involves their second derivative. This is what makes a
scalar of the form ``v . (J f(x) v)`` differentiable with respect to the
parameters of ``f`` on a single tape.

Shape discipline is strict: no broadcasting except python-scalar * tensor
(``scale``) and the documented bias row-broadcast inside ``affine``.
Reshapes are explicit. All arithmetic is deterministic: identical graphs and
inputs produce bit-identical values and gradients.

Graphs are cheap to build, so callers construct one per evaluation. A graph's
recorded state belongs to its latest forward pass; evaluate a given graph
from one thread at a time, and parallelize across independent graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DualTensor",
    "Graph",
    "GraphStateError",
    "NonFiniteError",
    "ShapeError",
    "Var",
    "as_tensor",
    "backward",
    "forward",
    "forward_dual",
    "jvp",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


class NonFiniteError(ArithmeticError):
    """A non-finite intermediate appeared during evaluation."""


def as_tensor(x, shape=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 array, optionally checking shape."""
    arr = np.asarray(x, dtype=np.float64, order="C")
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class DualTensor:
    """A value paired with a directional-derivative (tangent) of equal shape."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(
                f"primal shape {self.primal.shape} != tangent shape {self.tangent.shape}"
            )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _nl_tanh(x):
    y = np.tanh(x)
    d1 = 1.0 - y * y
    return y, d1, -2.0 * y * d1


def _nl_softplus(x):
    s = _sigmoid(x)
    return np.logaddexp(0.0, x), s, s * (1.0 - s)


def _nl_square(x):
    return x * x, 2.0 * x, np.full_like(x, 2.0)


def _nl_sin(x):
    return np.sin(x), np.cos(x), -np.sin(x)


# name -> callable returning (value, first derivative, second derivative)
NONLINEARITIES = {
    "tanh": _nl_tanh,
    "softplus": _nl_softplus,
    "square": _nl_square,
    "sin": _nl_sin,
}


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "index", "shape")

    def __init__(self, graph: "Graph", index: int, shape: tuple):
        self.graph = graph
        self.index = index
        self.shape = shape

    def __add__(self, other: "Var") -> "Var":
        return self.graph.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.graph.sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return self.graph.mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return self.graph.matmul(self, other)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


class _Node:
    __slots__ = ("op", "a", "b", "c", "aux", "shape")

    def __init__(self, op, a, b, c, aux, shape):
        self.op = op
        self.a = a
        self.b = b
        self.c = c
        self.aux = aux
        self.shape = shape


class Graph:
    """Append-only tape of primitive tensor operations.

    Build leaves with :meth:`input`, :meth:`param`, :meth:`const`, compose
    with the operation methods, then mark the result with :meth:`set_output`.
    Evaluate with module-level :func:`forward` / :func:`backward` / :func:`jvp`.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._inputs: list[int] = []
        self._params: list[int] = []
        self._output: int | None = None
        self._values: list | None = None
        self._tangents: list | None = None

    # -- leaves ---------------------------------------------------------

    def input(self, shape) -> Var:
        """Placeholder leaf; value supplied at forward time."""
        return self._append("input", shape=tuple(shape))

    def param(self, value) -> Var:
        """Trainable leaf; its gradient is reported by :func:`backward`."""
        value = as_tensor(value)
        return self._append("param", aux=value, shape=value.shape)

    def const(self, value) -> Var:
        """Non-differentiable leaf."""
        value = as_tensor(value)
        return self._append("const", aux=value, shape=value.shape)

    # -- primitives -----------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        self._check_same(a, b, "add")
        return self._append("add", a, b, shape=a.shape)

    def sub(self, a: Var, b: Var) -> Var:
        self._check_same(a, b, "sub")
        return self._append("sub", a, b, shape=a.shape)

    def mul(self, a: Var, b: Var) -> Var:
        """Elementwise product; shapes must match exactly."""
        self._check_same(a, b, "mul")
        return self._append("mul", a, b, shape=a.shape)

    def matmul(self, a: Var, b: Var) -> Var:
        """Matrix product of a 2-D operand with a 1-D or 2-D operand."""
        if len(a.shape) != 2 or len(b.shape) not in (1, 2):
            raise ShapeError(f"matmul supports 2D @ 1D/2D, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        out = (a.shape[0],) if len(b.shape) == 1 else (a.shape[0], b.shape[1])
        return self._append("matmul", a, b, shape=out)

    def affine(self, x: Var, w: Var, bias: Var | None = None) -> Var:
        """``x @ w.T + bias`` for row-major batches.

        ``x`` is ``(k,)`` or ``(batch, k)``, ``w`` is ``(m, k)``, ``bias`` is
        ``(m,)``. The bias add over batch rows is the one sanctioned
        broadcast in this module.
        """
        if len(w.shape) != 2:
            raise ShapeError(f"affine weight must be 2-D, got {w.shape}")
        m, k = w.shape
        if len(x.shape) == 1:
            if x.shape[0] != k:
                raise ShapeError(f"affine input {x.shape} incompatible with weight {w.shape}")
            out = (m,)
        elif len(x.shape) == 2:
            if x.shape[1] != k:
                raise ShapeError(f"affine input {x.shape} incompatible with weight {w.shape}")
            out = (x.shape[0], m)
        else:
            raise ShapeError(f"affine input must be 1-D or 2-D, got {x.shape}")
        if bias is not None and bias.shape != (m,):
            raise ShapeError(f"affine bias must have shape ({m},), got {bias.shape}")
        return self._append("affine", x, w, bias, shape=out)

    def nonlin(self, kind: str, a: Var) -> Var:
        """Elementwise smooth nonlinearity from :data:`NONLINEARITIES`."""
        if kind not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {kind!r}")
        return self._append("nonlin", a, aux=kind, shape=a.shape)

    def sum(self, a: Var) -> Var:
        """Full reduction to a scalar (shape ``()``)."""
        return self._append("sum", a, shape=())

    def scale(self, a: Var, c: float) -> Var:
        """Scalar multiple ``c * a``; the one sanctioned scalar broadcast."""
        return self._append("scale", a, aux=float(c), shape=a.shape)

    def cmul(self, a: Var, weights) -> Var:
        """Elementwise multiply by a constant array (masking / diagonal weighting)."""
        weights = as_tensor(weights)
        if weights.shape != a.shape:
            raise ShapeError(f"cmul weights {weights.shape} != operand {a.shape}")
        return self._append("cmul", a, aux=weights, shape=a.shape)

    def reshape(self, a: Var, shape) -> Var:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
            raise ShapeError(f"cannot reshape {a.shape} to {shape}")
        return self._append("reshape", a, aux=shape, shape=shape)

    def tangent_of(self, a: Var) -> Var:
        """Re-enter ``a``'s forward tangent into the tape as a plain value.

        The result is the directional derivative of ``a`` along the tangents
        seeded at forward time; downstream arithmetic on it is differentiated
        exactly by :func:`backward`.
        """
        return self._append("tangent_of", a, shape=a.shape)

    def set_output(self, a: Var) -> None:
        if a.graph is not self:
            raise GraphStateError("output belongs to a different graph")
        self._output = a.index

    # -- internals ------------------------------------------------------

    def _check_same(self, a: Var, b: Var, op: str) -> None:
        if a.graph is not self or b.graph is not self:
            raise GraphStateError(f"{op}: operands belong to a different graph")
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def _append(self, op, a=None, b=None, c=None, aux=None, shape=()) -> Var:
        self._nodes.append(
            _Node(op, None if a is None else a.index, None if b is None else b.index,
                  None if c is None else c.index, aux, tuple(shape))
        )
        idx = len(self._nodes) - 1
        if op == "input":
            self._inputs.append(idx)
        elif op == "param":
            self._params.append(idx)
        # evaluation state is stale once the tape grows
        self._values = None
        self._tangents = None
        return Var(self, idx, tuple(shape))

    @property
    def n_inputs(self) -> int:
        return len(self._inputs)

    @property
    def n_params(self) -> int:
        return len(self._params)

    def input_shapes(self) -> list[tuple]:
        return [self._nodes[i].shape for i in self._inputs]

    def output_shape(self) -> tuple:
        if self._output is None:
            raise GraphStateError("graph has no output")
        return self._nodes[self._output].shape

    def param_values(self) -> list[np.ndarray]:
        return [self._nodes[i].aux for i in self._params]

    def value_of(self, var: Var) -> np.ndarray:
        """Recorded value of a node from the most recent forward pass."""
        if var.graph is not self:
            raise GraphStateError("variable belongs to a different graph")
        if self._values is None or self._values[var.index] is None:
            raise GraphStateError("value_of before forward")
        return self._values[var.index]


def forward(graph: Graph, inputs: list, tangents: list | None = None) -> np.ndarray:
    """Evaluate the graph on ``inputs``, recording intermediates for backward.

    ``tangents`` optionally seeds a directional derivative per input (entries
    may be None); tangent arrays then propagate through every node alongside
    the values. Raises :class:`NonFiniteError` if any intermediate is not
    finite, and :class:`ShapeError` on input count/shape mismatch.
    """
    if graph._output is None:
        raise GraphStateError("graph has no output")
    if len(inputs) != graph.n_inputs:
        raise ShapeError(f"graph takes {graph.n_inputs} inputs, got {len(inputs)}")
    bound = [as_tensor(x, shape=graph._nodes[i].shape)
             for x, i in zip(inputs, graph._inputs)]
    seeded = [None] * graph.n_inputs
    if tangents is not None:
        if len(tangents) != graph.n_inputs:
            raise ShapeError(f"graph takes {graph.n_inputs} inputs, got {len(tangents)} tangents")
        seeded = [None if t is None else as_tensor(t, shape=graph._nodes[i].shape)
                  for t, i in zip(tangents, graph._inputs)]

    n = len(graph._nodes)
    vals: list = [None] * n
    tans: list = [None] * n
    input_pos = {node_idx: k for k, node_idx in enumerate(graph._inputs)}

    for i, node in enumerate(graph._nodes):
        op = node.op
        if op == "input":
            k = input_pos[i]
            vals[i] = bound[k]
            tans[i] = seeded[k]
            continue
        if op in ("param", "const"):
            vals[i] = node.aux
            continue

        av = vals[node.a]
        at = tans[node.a]
        if op == "add":
            bv, bt = vals[node.b], tans[node.b]
            vals[i] = av + bv
            if at is not None or bt is not None:
                tans[i] = (0.0 if at is None else at) + (0.0 if bt is None else bt)
        elif op == "sub":
            bv, bt = vals[node.b], tans[node.b]
            vals[i] = av - bv
            if at is not None or bt is not None:
                tans[i] = (0.0 if at is None else at) - (0.0 if bt is None else bt)
        elif op == "mul":
            bv, bt = vals[node.b], tans[node.b]
            vals[i] = av * bv
            if at is not None or bt is not None:
                t = 0.0
                if at is not None:
                    t = at * bv
                if bt is not None:
                    t = t + av * bt
                tans[i] = t
        elif op == "matmul":
            bv, bt = vals[node.b], tans[node.b]
            vals[i] = av @ bv
            if at is not None or bt is not None:
                t = 0.0
                if at is not None:
                    t = at @ bv
                if bt is not None:
                    t = t + av @ bt
                tans[i] = t
        elif op == "affine":
            wv, wt = vals[node.b], tans[node.b]
            out = av @ wv.T
            if node.c is not None:
                out = out + vals[node.c]
            vals[i] = out
            ct = None if node.c is None else tans[node.c]
            if at is not None or wt is not None or ct is not None:
                t = 0.0
                if at is not None:
                    t = at @ wv.T
                if wt is not None:
                    t = t + av @ wt.T
                if ct is not None:
                    t = t + ct
                tans[i] = t
        elif op == "nonlin":
            y, d1, _ = NONLINEARITIES[node.aux](av)
            vals[i] = y
            if at is not None:
                tans[i] = d1 * at
        elif op == "sum":
            vals[i] = np.asarray(np.sum(av))
            if at is not None:
                tans[i] = np.asarray(np.sum(at))
        elif op == "scale":
            vals[i] = node.aux * av
            if at is not None:
                tans[i] = node.aux * at
        elif op == "cmul":
            vals[i] = node.aux * av
            if at is not None:
                tans[i] = node.aux * at
        elif op == "reshape":
            vals[i] = av.reshape(node.aux)
            if at is not None:
                tans[i] = at.reshape(node.aux)
        elif op == "tangent_of":
            if at is None:
                raise GraphStateError(
                    "tangent_of requires a tangent seeded at a forward input"
                )
            vals[i] = at
        else:  # pragma: no cover
            raise AssertionError(f"unhandled op {op}")

        if not np.all(np.isfinite(vals[i])):
            raise NonFiniteError(f"non-finite value at node #{i} ({op})")

    graph._values = vals
    graph._tangents = tans
    return vals[graph._output]


def forward_dual(graph: Graph, inputs: list, tangents: list) -> DualTensor:
    """Forward pass returning the output value and tangent as a pair."""
    out = forward(graph, inputs, tangents=tangents)
    t = graph._tangents[graph._output]
    if t is None:
        raise GraphStateError("output has no tangent; seed at least one input")
    return DualTensor(out, t)


def jvp(graph: Graph, inputs: list, tangent_in: np.ndarray, wrt: int = 0) -> np.ndarray:
    """Directional derivative of the output along ``tangent_in`` at input ``wrt``.

    Implemented by dual propagation in a single forward sweep; the tangents
    stay recorded on the graph so a subsequent :func:`backward` differentiates
    through them.
    """
    tangents: list = [None] * graph.n_inputs
    tangents[wrt] = tangent_in
    return forward_dual(graph, inputs, tangents).tangent


def backward(graph: Graph, seed_gradient) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact reverse-mode gradients of ``seed_gradient . output``.

    Returns per-parameter and per-input gradients, in declaration order.
    Nodes whose values were produced by tangent propagation are handled by
    adjoints on both streams; for nonlinear primitives this uses their second
    derivative, so gradients of scalars built from ``tangent_of`` results are
    exact as well. Requires a prior :func:`forward` on this graph.
    """
    if graph._values is None:
        raise GraphStateError("backward before forward")
    seed = as_tensor(seed_gradient, shape=graph.output_shape())

    vals = graph._values
    tans = graph._tangents
    n = len(graph._nodes)
    vadj: list = [None] * n  # adjoints of node values
    tadj: list = [None] * n  # adjoints of node tangents

    def acc(buf, idx, delta):
        if buf[idx] is None:
            buf[idx] = np.zeros(graph._nodes[idx].shape)
        buf[idx] += delta

    vadj[graph._output] = seed.copy()

    for i in range(n - 1, -1, -1):
        ga = vadj[i]
        gt = tadj[i]
        if ga is None and gt is None:
            continue
        node = graph._nodes[i]
        op = node.op
        if op in ("input", "param", "const"):
            continue
        a = node.a
        b = node.b

        if op == "add":
            if ga is not None:
                acc(vadj, a, ga)
                acc(vadj, b, ga)
            if gt is not None:
                acc(tadj, a, gt)
                acc(tadj, b, gt)
        elif op == "sub":
            if ga is not None:
                acc(vadj, a, ga)
                acc(vadj, b, -ga)
            if gt is not None:
                acc(tadj, a, gt)
                acc(tadj, b, -gt)
        elif op == "mul":
            av, bv = vals[a], vals[b]
            at, bt = tans[a], tans[b]
            if ga is not None:
                acc(vadj, a, ga * bv)
                acc(vadj, b, ga * av)
            if gt is not None:
                # d(tangent)/d(values): tangent = at*bv + av*bt
                if bt is not None:
                    acc(vadj, a, gt * bt)
                if at is not None:
                    acc(vadj, b, gt * at)
                acc(tadj, a, gt * bv)
                acc(tadj, b, gt * av)
        elif op == "matmul":
            av, bv = vals[a], vals[b]
            at, bt = tans[a], tans[b]
            one_d = bv.ndim == 1

            def _outer(u, v):
                return np.outer(u, v) if one_d else u @ v.T

            if ga is not None:
                acc(vadj, a, _outer(ga, bv))
                acc(vadj, b, av.T @ ga)
            if gt is not None:
                if bt is not None:
                    acc(vadj, a, _outer(gt, bt))
                if at is not None:
                    acc(vadj, b, at.T @ gt)
                acc(tadj, a, _outer(gt, bv))
                acc(tadj, b, av.T @ gt)
        elif op == "affine":
            xv, wv = vals[a], vals[b]
            xt, wt = tans[a], tans[b]
            one_d = xv.ndim == 1

            def _wgrad(g, x):
                return np.outer(g, x) if one_d else g.T @ x

            def _bgrad(g):
                return g if one_d else g.sum(axis=0)

            if ga is not None:
                acc(vadj, a, ga @ wv)
                acc(vadj, b, _wgrad(ga, xv))
                if node.c is not None:
                    acc(vadj, node.c, _bgrad(ga))
            if gt is not None:
                if wt is not None:
                    acc(vadj, a, gt @ wt)
                if xt is not None:
                    acc(vadj, b, _wgrad(gt, xt))
                acc(tadj, a, gt @ wv)
                acc(tadj, b, _wgrad(gt, xv))
                if node.c is not None:
                    acc(tadj, node.c, _bgrad(gt))
        elif op == "nonlin":
            _, d1, d2 = NONLINEARITIES[node.aux](vals[a])
            at = tans[a]
            if ga is not None:
                acc(vadj, a, ga * d1)
            if gt is not None:
                # tangent = d1(a) * at, so d(tangent)/da needs d2
                if at is not None:
                    acc(vadj, a, gt * d2 * at)
                acc(tadj, a, gt * d1)
        elif op == "sum":
            if ga is not None:
                acc(vadj, a, np.full(graph._nodes[a].shape, float(ga)))
            if gt is not None:
                acc(tadj, a, np.full(graph._nodes[a].shape, float(gt)))
        elif op == "scale":
            if ga is not None:
                acc(vadj, a, node.aux * ga)
            if gt is not None:
                acc(tadj, a, node.aux * gt)
        elif op == "cmul":
            if ga is not None:
                acc(vadj, a, node.aux * ga)
            if gt is not None:
                acc(tadj, a, node.aux * gt)
        elif op == "reshape":
            src_shape = graph._nodes[a].shape
            if ga is not None:
                acc(vadj, a, ga.reshape(src_shape))
            if gt is not None:
                acc(tadj, a, gt.reshape(src_shape))
        elif op == "tangent_of":
            # the value of this node IS the operand's tangent
            if ga is not None:
                acc(tadj, a, ga)
        else:  # pragma: no cover
            raise AssertionError(f"unhandled op {op}")

    param_grads = [
        vadj[i] if vadj[i] is not None else np.zeros(graph._nodes[i].shape)
        for i in graph._params
    ]
    input_grads = [
        vadj[i] if vadj[i] is not None else np.zeros(graph._nodes[i].shape)
        for i in graph._inputs
    ]
    return param_grads, input_grads
