"""
Autodiff Engine - reverse-mode differentiation on a define-by-run tape.

Every neural layer, sum-product contraction and loss in the project is written
in the operation vocabulary of `Graph`. Nodes are appended in execution order,
so the append order is a topological order and `backward` simply walks the tape
in reverse. Gradient rules live in `GRADIENT_RULES` and are looked up by op kind
at backward time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError, IndexOutOfRange, RankError, UnknownNameError

logger = logging.getLogger(__name__)

Axis = Union[int, Sequence[int], None]

# rounding budget of a central difference, in units of float64 eps times |f|
ROUNDING_ULPS = 64


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    def __init__(self, data: Any, requires_grad: bool = False, copy: bool = True):
        self.data: np.ndarray = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def copy(self) -> "Tensor":
        clone = Tensor(self.data, requires_grad=self.requires_grad)
        if self.grad is not None:
            clone.grad = self.grad.copy()
        return clone

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Node:
    """One tape entry: op kind, input node ids and the produced value."""

    id: int
    op: str
    inputs: Tuple[int, ...]
    value: Tensor
    requires_grad: bool
    ctx: Dict[str, Any] = field(default_factory=dict)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.data.shape

    def item(self) -> float:
        return float(self.value.data.reshape(-1)[0])


GradientRule = Callable[[Node, List[np.ndarray], np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum-reduce g over the axes that were broadcast to reach it from `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise RankError(f"axis {ax} out of bounds for rank {ndim}")
        normalized.append(int(ax) % ndim)
    return tuple(normalized)


# --- gradient rules -------------------------------------------------------

def _matmul_grad(node, inputs, g):
    a, b = inputs
    da = g @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
    return da, db


def _softmax_grad(node, inputs, g):
    y = node.data
    axis = node.ctx["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _add_grad(node, inputs, g):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_grad(node, inputs, g):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_grad(node, inputs, g):
    a, b = inputs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_grad(node, inputs, g):
    a, b = inputs
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _exp_grad(node, inputs, g):
    return (g * node.data,)


def _log_grad(node, inputs, g):
    return (g / inputs[0],)


def _neg_grad(node, inputs, g):
    return (-g,)


def _abs_grad(node, inputs, g):
    # np.sign(0) == 0: subgradient 0 at the kink
    return (g * np.sign(inputs[0]),)


def _scale_grad(node, inputs, g):
    return (g * node.ctx["factor"],)


def _tanh_grad(node, inputs, g):
    y = node.data
    return (g * (1.0 - y * y),)


def _sigmoid_grad(node, inputs, g):
    y = node.data
    return (g * y * (1.0 - y),)


def _concat_grad(node, inputs, g):
    split = node.ctx["split"]
    return g[..., :split], g[..., split:]


def _stack_grad(node, inputs, g):
    axis = node.ctx["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(inputs)))


def _gather_grad(node, inputs, g):
    table = inputs[0]
    d = np.zeros_like(table)
    np.add.at(d, node.ctx["rows"], g)
    return (d,)


def _reduce_sum_grad(node, inputs, g):
    x = inputs[0]
    axes = node.ctx["axes"]
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape),)


def _reshape_grad(node, inputs, g):
    return (g.reshape(inputs[0].shape),)


def _transpose_grad(node, inputs, g):
    return (g.transpose(np.argsort(node.ctx["axes"])),)


def _where_grad(node, inputs, g):
    a, b = inputs
    mask = node.ctx["mask"]
    return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)


GRADIENT_RULES: Dict[str, GradientRule] = {
    "matmul": _matmul_grad,
    "softmax": _softmax_grad,
    "add": _add_grad,
    "sub": _sub_grad,
    "mul": _mul_grad,
    "div": _div_grad,
    "exp": _exp_grad,
    "log": _log_grad,
    "neg": _neg_grad,
    "abs": _abs_grad,
    "scale": _scale_grad,
    "tanh": _tanh_grad,
    "sigmoid": _sigmoid_grad,
    "concat": _concat_grad,
    "stack": _stack_grad,
    "gather": _gather_grad,
    "reduce_sum": _reduce_sum_grad,
    "reshape": _reshape_grad,
    "transpose": _transpose_grad,
    "where": _where_grad,
}

ELEMENTWISE_KINDS = ("add", "sub", "mul", "exp", "neg", "abs", "scale")


class Graph:
    """
    Single-threaded tape of tensor operations.

    Parameters are registered by hierarchical string id (e.g.
    "user_net/layer0/weight"); `param()` returns one shared leaf node per id so a
    parameter used twice accumulates both contributions.
    """

    def __init__(self, parameters: Optional[Dict[str, Tensor]] = None):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, Tensor] = dict(parameters or {})
        self._param_nodes: Dict[str, Node] = {}
        # abs sign patterns and where masks, in execution order
        self.branch_signature: List[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, inputs: Sequence[Node], data: np.ndarray, **ctx: Any) -> Node:
        node = Node(
            id=len(self.nodes),
            op=op,
            inputs=tuple(n.id for n in inputs),
            value=Tensor(data, copy=False),
            requires_grad=any(n.requires_grad for n in inputs),
            ctx=ctx,
        )
        self.nodes.append(node)
        return node

    # --- leaves -----------------------------------------------------------

    def param(self, name: str) -> Node:
        """Leaf node for a registered parameter (created once per graph)."""
        if name in self._param_nodes:
            return self._param_nodes[name]
        if name not in self.parameters:
            raise UnknownNameError(f"unknown parameter '{name}'")
        tensor = self.parameters[name]
        node = Node(len(self.nodes), "param", (), tensor, tensor.requires_grad, {"name": name})
        self.nodes.append(node)
        self._param_nodes[name] = node
        return node

    def constant(self, data: Any) -> Node:
        node = Node(len(self.nodes), "constant", (), Tensor(data), False)
        self.nodes.append(node)
        return node

    # --- linear algebra ---------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        """(…×n) @ (n×p) -> (…×p)."""
        if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return self._append("matmul", (a, b), a.data @ b.data)

    def softmax(self, x: Node, axis: int = -1) -> Node:
        """Max-shifted softmax along `axis`."""
        (ax,) = _normalize_axes(axis, x.data.ndim)
        shifted = x.data - x.data.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        return self._append("softmax", (x,), e / e.sum(axis=ax, keepdims=True), axis=ax)

    # --- elementwise ------------------------------------------------------

    def _binary(self, op: str, a: Node, b: Node, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Node:
        try:
            out = fn(a.data, b.data)
        except ValueError as e:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e
        return self._append(op, (a, b), out)

    def add(self, a: Node, b: Node) -> Node:
        return self._binary("add", a, b, np.add)

    def sub(self, a: Node, b: Node) -> Node:
        return self._binary("sub", a, b, np.subtract)

    def mul(self, a: Node, b: Node) -> Node:
        return self._binary("mul", a, b, np.multiply)

    def div(self, a: Node, b: Node) -> Node:
        return self._binary("div", a, b, np.divide)

    def exp(self, x: Node) -> Node:
        return self._append("exp", (x,), np.exp(x.data))

    def log(self, x: Node) -> Node:
        if np.any(x.data <= 0.0):
            raise ContractError("log requires strictly positive input")
        return self._append("log", (x,), np.log(x.data))

    def neg(self, x: Node) -> Node:
        return self._append("neg", (x,), -x.data)

    def abs(self, x: Node) -> Node:
        self.branch_signature.append(np.sign(x.data))
        return self._append("abs", (x,), np.abs(x.data))

    def scale(self, x: Node, factor: float) -> Node:
        return self._append("scale", (x,), x.data * factor, factor=float(factor))

    def tanh(self, x: Node) -> Node:
        return self._append("tanh", (x,), np.tanh(x.data))

    def sigmoid(self, x: Node) -> Node:
        return self._append("sigmoid", (x,), 0.5 * (1.0 + np.tanh(0.5 * x.data)))

    def elementwise(self, kind: str, *inputs: Node, factor: Optional[float] = None) -> Node:
        """Dispatch one of add, sub, mul, exp, neg, abs, scale by name."""
        if kind not in ELEMENTWISE_KINDS:
            raise ContractError(f"unknown elementwise kind '{kind}'")
        if kind == "scale":
            if factor is None:
                raise ContractError("scale needs a factor")
            return self.scale(inputs[0], factor)
        return getattr(self, kind)(*inputs)

    def where(self, mask: np.ndarray, a: Node, b: Node) -> Node:
        """Hard select: a where mask else b. The mask is a constant and carries no gradient."""
        mask = np.asarray(mask, dtype=bool)
        self.branch_signature.append(mask)
        try:
            out = np.where(mask, a.data, b.data)
        except ValueError as e:
            raise DimensionError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} do not broadcast") from e
        return self._append("where", (a, b), out, mask=mask)

    # --- structural -------------------------------------------------------

    def concat(self, a: Node, b: Node) -> Node:
        """Concatenate along the last axis; leading shapes must agree."""
        if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[:-1] != b.shape[:-1]:
            raise RankError(f"concat needs vectors with matching leading shape, got {a.shape} and {b.shape}")
        return self._append("concat", (a, b), np.concatenate([a.data, b.data], axis=-1), split=a.shape[-1])

    def stack(self, nodes: Sequence[Node], axis: int = 0) -> Node:
        if not nodes:
            raise ContractError("stack needs at least one node")
        try:
            out = np.stack([n.data for n in nodes], axis=axis)
        except ValueError as e:
            raise DimensionError(f"stack: shapes {[n.shape for n in nodes]} differ") from e
        return self._append("stack", tuple(nodes), out, axis=axis % out.ndim)

    def gather(self, table: Node, rows: Union[int, Sequence[int], np.ndarray]) -> Node:
        """Rows of a 2-D table; gradient accumulates into the gathered rows only."""
        if table.data.ndim != 2:
            raise RankError(f"gather needs a 2-D table, got shape {table.shape}")
        idx = np.asarray(rows)
        if not np.issubdtype(idx.dtype, np.integer):
            raise ContractError("gather rows must be integers")
        n = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            bad = idx[(idx < 0) | (idx >= n)].reshape(-1)[0]
            raise IndexOutOfRange(f"row {int(bad)} out of range for table with {n} rows")
        return self._append("gather", (table,), np.array(table.data[idx]), rows=idx)

    def reduce_sum(self, x: Node, axis: Axis = None, keepdims: bool = False) -> Node:
        axes = _normalize_axes(axis, x.data.ndim)
        return self._append("reduce_sum", (x,), np.asarray(x.data.sum(axis=axes, keepdims=keepdims)),
                            axes=axes, keepdims=keepdims)

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        try:
            out = x.data.reshape(tuple(shape))
        except ValueError as e:
            raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from e
        return self._append("reshape", (x,), out)

    def transpose(self, x: Node, axes: Sequence[int]) -> Node:
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(x.data.ndim)):
            raise RankError(f"invalid permutation {axes} for rank {x.data.ndim}")
        return self._append("transpose", (x,), x.data.transpose(axes), axes=axes)

    # --- composites -------------------------------------------------------

    def mean(self, x: Node) -> Node:
        return self.scale(self.reduce_sum(x), 1.0 / max(x.data.size, 1))

    # --- backward ---------------------------------------------------------

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """
        Reverse sweep from a scalar node.

        Args:
            loss: single-element node of this graph

        Returns:
            parameter id -> gradient for every parameter with requires_grad;
            parameters without a path to the loss get zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: List[Optional[np.ndarray]] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.data)

        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None or not node.inputs or not node.requires_grad:
                continue
            input_values = [self.nodes[i].data for i in node.inputs]
            for i, gi in zip(node.inputs, GRADIENT_RULES[node.op](node, input_values, g)):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                if grads[i] is None:
                    grads[i] = np.array(gi, dtype=np.float64)
                else:
                    grads[i] += gi

        result: Dict[str, np.ndarray] = {}
        for name, tensor in self.parameters.items():
            if not tensor.requires_grad:
                continue
            node = self._param_nodes.get(name)
            g = grads[node.id] if node is not None and node.id <= loss.id else None
            tensor.grad = g if g is not None else np.zeros_like(tensor.data)
            result[name] = tensor.grad
        return result


def clone_parameters(parameters: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """Deep copy used by per-worker gradient computation."""
    return {name: Tensor(t.data, requires_grad=t.requires_grad) for name, t in parameters.items()}


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    build_loss: Callable[[Graph], Node],
    parameters: Dict[str, Tensor],
    param_id: str,
    eps: float = 1e-5,
    coords: Optional[Iterable[Tuple[int, ...]]] = None,
) -> float:
    """
    Compare analytic gradients with central differences.

    `build_loss` must rebuild the same deterministic forward pass on a fresh
    graph. Coordinates whose perturbation flips any abs sign or where mask are
    skipped, since the function is not smooth there. A coordinate whose
    disagreement is below the rounding error of the difference quotient
    (ROUNDING_ULPS * eps_machine * |f| / eps) counts as exact.

    Returns:
        max relative error |a - n| / max(|a|, |n|, 1e-8) over checked coordinates
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if param_id not in parameters:
        raise UnknownNameError(f"unknown parameter '{param_id}'")
    tensor = parameters[param_id]
    if not tensor.requires_grad:
        raise ContractError(f"parameter '{param_id}' does not require grad")

    graph = Graph(parameters)
    analytic = graph.backward(build_loss(graph))[param_id].copy()
    base_branches = graph.branch_signature

    def evaluate() -> Tuple[float, List[np.ndarray]]:
        g = Graph(parameters)
        value = build_loss(g).item()
        return value, g.branch_signature

    worst = 0.0
    skipped = 0
    for idx in (coords if coords is not None else np.ndindex(*tensor.shape)):
        idx = tuple(idx)
        original = tensor.data[idx]
        tensor.data[idx] = original + eps
        f_plus, plus_branches = evaluate()
        tensor.data[idx] = original - eps
        f_minus, minus_branches = evaluate()
        tensor.data[idx] = original
        if not (_same_branches(base_branches, plus_branches) and _same_branches(base_branches, minus_branches)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[idx])
        # differences within the rounding error of the quotient count as agreement
        rounding = ROUNDING_ULPS * np.finfo(np.float64).eps * (abs(f_plus) + abs(f_minus)) / (2.0 * eps)
        if abs(a - numeric) <= rounding:
            continue
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    if skipped:
        logger.debug("finite_diff_check %s: skipped %d non-smooth coordinates", param_id, skipped)
    return worst
