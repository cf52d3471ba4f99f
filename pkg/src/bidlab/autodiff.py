"""A small reverse-mode differentiation tape over numpy arrays.

Nodes are recorded eagerly in creation order, which is already a topological
order, so the backward pass is a single reverse sweep.  Values are float64
arrays; leading batch dimensions broadcast against parameters and the
adjoint is summed back to each operand's shape.

    tape = Tape()
    x = tape.param("x", 3.0)
    y = tape.const(7.0)
    grads = tape.backward(x * y)      # grads["x"] == 7.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


class TapeError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Node:
    __slots__ = ("tape", "index", "op", "parents", "aux", "value", "name")

    def __init__(self, tape, op, parents, aux, value, name=None):
        self.tape = tape
        self.index = len(tape.nodes)
        self.op = op
        self.parents = parents
        self.aux = aux
        self.value = value
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        if not isinstance(other, Node):
            return self.tape.affine(self, other, 0.0)
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.affine(self, -1.0, 0.0)

    def __repr__(self):
        return f"Node#{self.index}({self.op}, shape={self.shape})"


# forward rules: (parent values, aux) -> value
_FORWARD: dict[str, Callable] = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "matvec": lambda v, a: v[1] @ v[0].T,
    "sigmoid": lambda v, a: _sigmoid(v[0]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "affine": lambda v, a: v[0] * a[0] + a[1],
    "maximum": lambda v, a: np.maximum(v[0], a),
    "minimum": lambda v, a: np.minimum(v[0], a),
    "sum": lambda v, a: np.sum(v[0], axis=a),
    "broadcast": lambda v, a: np.broadcast_to(v[0], a).copy(),
    "take": lambda v, a: v[0][..., a],
    "gate": lambda v, a: v[0] * ((v[1] >= a[0]) & (v[1] <= a[1])),
    "lookup": lambda v, a: a(v[0])[0],
    "stack": lambda v, a: np.stack(v, axis=-1),
}


def _vjp(node: Node, g: np.ndarray, vals: list) -> tuple:
    op = node.op
    a = node.aux
    if op == "add":
        return _unbroadcast(g, np.shape(vals[0])), _unbroadcast(g, np.shape(vals[1]))
    if op == "sub":
        return _unbroadcast(g, np.shape(vals[0])), _unbroadcast(-g, np.shape(vals[1]))
    if op == "mul":
        return (_unbroadcast(g * vals[1], np.shape(vals[0])),
                _unbroadcast(g * vals[0], np.shape(vals[1])))
    if op == "matvec":
        w, x = vals
        gw = np.reshape(g, (-1, w.shape[0])).T @ np.reshape(x, (-1, w.shape[1]))
        return gw, g @ w
    if op == "sigmoid":
        y = node.value
        return (g * y * (1.0 - y),)
    if op == "tanh":
        y = node.value
        return (g * (1.0 - y * y),)
    if op == "affine":
        return (_unbroadcast(g * a[0], np.shape(vals[0])),)
    if op == "maximum":
        return (g * (vals[0] > a),)
    if op == "minimum":
        return (g * (vals[0] < a),)
    if op == "sum":
        shape = np.shape(vals[0])
        if a is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, a), shape).copy(),)
    if op == "broadcast":
        return (_unbroadcast(g, np.shape(vals[0])),)
    if op == "take":
        out = np.zeros(np.shape(vals[0]))
        out[..., a] = g
        return (out,)
    if op == "gate":
        mask = (vals[1] >= a[0]) & (vals[1] <= a[1])
        return g * mask, None
    if op == "lookup":
        _, slope = a(vals[0])
        return (g * slope,)
    if op == "stack":
        return tuple(g[..., k] for k in range(len(vals)))
    raise TapeError(f"no adjoint rule for {op!r}")


class Gradient(dict):
    """Parameter name -> adjoint array."""

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.values())))

    def scaled(self, factor: float) -> "Gradient":
        return Gradient({k: v * factor for k, v in self.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())

    def __add__(self, other: "Gradient") -> "Gradient":
        return Gradient({k: self[k] + other[k] for k in self})


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}

    def _record(self, op, parents, aux, value, name=None) -> Node:
        node = Node(self, op, parents, aux, np.asarray(value, dtype=float), name)
        self.nodes.append(node)
        return node

    def _own(self, *nodes: Node):
        for n in nodes:
            if n.tape is not self:
                raise TapeError(f"{n!r} belongs to another tape")

    # leaves
    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise TapeError(f"duplicate parameter {name!r}")
        node = self._record("param", (), None, np.array(value, dtype=float), name)
        self.params[name] = node
        return node

    def input(self, name: str, value) -> Node:
        node = self._record("input", (), None, np.array(value, dtype=float), name)
        self.inputs[name] = node
        return node

    def const(self, value) -> Node:
        return self._record("const", (), None, np.array(value, dtype=float))

    # primitives
    def _binary(self, op, x: Node, y: Node) -> Node:
        self._own(x, y)
        try:
            value = _FORWARD[op]((x.value, y.value), None)
        except ValueError as exc:
            raise ValueError(f"{op}: shape mismatch {x.shape} vs {y.shape}") from exc
        return self._record(op, (x, y), None, value)

    def add(self, x: Node, y: Node) -> Node:
        return self._binary("add", x, y)

    def sub(self, x: Node, y: Node) -> Node:
        return self._binary("sub", x, y)

    def mul(self, x: Node, y: Node) -> Node:
        return self._binary("mul", x, y)

    def matvec(self, w: Node, x: Node) -> Node:
        """``x @ w.T``: applies ``w`` (out, in) to every row of ``x``."""
        self._own(w, x)
        if w.value.ndim != 2 or x.shape[-1:] != (w.shape[1],):
            raise ValueError(f"matvec: shape mismatch {w.shape} vs {x.shape}")
        return self._record("matvec", (w, x), None, x.value @ w.value.T)

    def sigmoid(self, x: Node) -> Node:
        return self._record("sigmoid", (x,), None, _sigmoid(x.value))

    def tanh(self, x: Node) -> Node:
        return self._record("tanh", (x,), None, np.tanh(x.value))

    def affine(self, x: Node, scale, offset) -> Node:
        """``x * scale + offset`` with constant scale/offset (scalars or vectors)."""
        scale = np.asarray(scale, dtype=float)
        offset = np.asarray(offset, dtype=float)
        return self._record("affine", (x,), (scale, offset), x.value * scale + offset)

    def maximum(self, x: Node, c: float) -> Node:
        return self._record("maximum", (x,), float(c), np.maximum(x.value, c))

    def minimum(self, x: Node, c: float) -> Node:
        return self._record("minimum", (x,), float(c), np.minimum(x.value, c))

    def sum(self, x: Node, axis: int | None = None) -> Node:
        return self._record("sum", (x,), axis, np.sum(x.value, axis=axis))

    def broadcast(self, x: Node, shape) -> Node:
        shape = tuple(shape)
        return self._record("broadcast", (x,), shape, np.broadcast_to(x.value, shape).copy())

    def take(self, x: Node, index: int) -> Node:
        """Component ``index`` of the last axis."""
        return self._record("take", (x,), index, x.value[..., index])

    def stack(self, nodes: list[Node]) -> Node:
        """Stack same-shaped nodes along a new last axis."""
        self._own(*nodes)
        value = np.stack([n.value for n in nodes], axis=-1)
        return self._record("stack", tuple(nodes), None, value)

    def gate(self, x: Node, cond: Node, lo: float, hi: float) -> Node:
        """``x`` where ``lo <= cond <= hi`` else 0; no adjoint flows into ``cond``."""
        self._own(x, cond)
        return self._record("gate", (x, cond), (lo, hi), _FORWARD["gate"]((x.value, cond.value), (lo, hi)))

    def lookup(self, x: Node, fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]) -> Node:
        """Piecewise-smooth table evaluation; ``fn`` returns ``(value, slope)``."""
        value, _ = fn(x.value)
        return self._record("lookup", (x,), fn, value)

    # passes
    def forward(self, inputs: Mapping[str, np.ndarray] | None = None) -> None:
        """Replay the recorded graph with new leaf values (by parameter/input name)."""
        if not self.nodes:
            raise TapeError("empty tape: nothing to replay")
        inputs = dict(inputs or {})
        for node in self.nodes:
            if node.op in ("param", "input"):
                if node.name in inputs:
                    new = np.array(inputs.pop(node.name), dtype=float)
                    if new.shape != node.shape:
                        raise ValueError(f"{node.name}: expected shape {node.shape}, got {new.shape}")
                    node.value = new
            elif node.op != "const":
                node.value = np.asarray(_FORWARD[node.op]([p.value for p in node.parents], node.aux), dtype=float)
        if inputs:
            raise KeyError(f"unknown leaves: {sorted(inputs)}")

    def backward(self, output: Node, output_adjoint=1.0) -> Gradient:
        if not self.nodes:
            raise TapeError("backward called before any forward evaluation")
        self._own(output)
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.broadcast_to(np.asarray(output_adjoint, dtype=float), output.shape).copy()
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj[node.index]
            if g is None or not node.parents:
                continue
            grads = _vjp(node, g, [p.value for p in node.parents])
            for parent, pg in zip(node.parents, grads):
                if pg is None:
                    continue
                i = parent.index
                adj[i] = pg if adj[i] is None else adj[i] + pg
        out = Gradient()
        for name, node in self.params.items():
            g = adj[node.index] if node.index < len(adj) else None
            out[name] = np.zeros(node.shape) if g is None else np.asarray(g, dtype=float)
        return out

    def dump(self) -> str:
        lines = []
        for n in self.nodes:
            args = ",".join(str(p.index) for p in n.parents)
            label = f" {n.name}" if n.name else ""
            lines.append(f"{n.index:5d} {n.op}({args}){label} shape={n.shape}")
        return "\n".join(lines)


@dataclass
class GradCheckResult:
    max_rel_error: float
    skipped: bool = False
    worst: tuple | None = None
    checked: int = 0


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(function: Callable[[dict], tuple[float, Mapping[str, np.ndarray]]],
               parameters: Mapping[str, np.ndarray], epsilon: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float | None = None,
               kink: Callable[[dict], bool] | None = None) -> GradCheckResult:
    """Compare the reverse-mode gradient with central differences.

    ``function`` maps a parameter dict to ``(loss, gradient)``.  ``coords``
    limits the check to that many random coordinates.  Components smaller than
    ``floor`` are compared absolutely: a central difference carries about
    ``1e-16 * |loss| / epsilon`` of round-off, so the default floor
    ``1e-4 * max(1, |loss|)`` keeps that below 1e-6 relative at epsilon = 1e-5.  When
    ``kink(params)`` is true the point is non-differentiable and the check is
    skipped.
    """
    params = {k: np.array(v, dtype=float) for k, v in parameters.items()}
    if kink is not None and kink(params):
        return GradCheckResult(float("nan"), skipped=True)
    loss, grad = function(params)
    if floor is None:
        floor = 1e-4 * max(1.0, abs(loss))
    flat = [(k, idx) for k in sorted(params) for idx in np.ndindex(params[k].shape)]
    if coords is not None and coords < len(flat):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(flat), size=coords, replace=False)
        flat = [flat[i] for i in sorted(pick)]
    worst, worst_at = 0.0, None
    for k, idx in flat:
        orig = params[k][idx]
        params[k][idx] = orig + epsilon
        up, _ = function(params)
        params[k][idx] = orig - epsilon
        down, _ = function(params)
        params[k][idx] = orig
        numeric = (up - down) / (2 * epsilon)
        err = relative_error(float(np.asarray(grad[k])[idx]), numeric, floor)
        if err > worst:
            worst, worst_at = err, (k, idx)
    return GradCheckResult(worst, worst=worst_at, checked=len(flat))
