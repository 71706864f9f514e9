"""
Factor Graph - discrete tree-structured factor graphs whose tables are autodiff nodes.

A factor table produced by a neural node is the "input interface"; the marginal
returned by `marginal()` is an ordinary autodiff node (the "output interface"),
so gradients reach every neural producer of a table without message objects.
Structure checks use NetworkX, the same way dependency DAGs are validated
elsewhere in the codebase.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from core.autodiff import Graph, Node
from core.errors import (
    CapacityError,
    DimensionError,
    IndexOutOfRange,
    StructureError,
    UnknownNameError,
)

logger = logging.getLogger(__name__)

MAX_ENUMERATION_STATES = 10 ** 6


@dataclass(frozen=True)
class DiscreteVariable:
    """A named discrete variable."""
    name: str
    cardinality: int


@dataclass(frozen=True)
class Factor:
    """
    Non-negative potential over an ordered scope.

    `table` has shape batch_shape + (card(v) for v in scope). When
    `distribution_over` is set, the table is a conditional distribution whose
    entries over those scope variables sum to 1 for every setting of the rest.
    """
    scope: Tuple[str, ...]
    table: Node
    distribution_over: Optional[Tuple[str, ...]] = None


class FactorGraph:
    """
    Immutable collection of variables and factors.

    Args:
        variables: declared variables, names unique
        factors: factors whose scopes reference declared variables
        batch_dims: number of leading table axes treated as independent batch axes
    """

    def __init__(self, variables: Sequence[DiscreteVariable], factors: Sequence[Factor], batch_dims: int = 0):
        self.variables: Tuple[DiscreteVariable, ...] = tuple(variables)
        self.factors: Tuple[Factor, ...] = tuple(factors)
        self.batch_dims = batch_dims
        self.cardinality: Dict[str, int] = {}

        for v in self.variables:
            if v.name in self.cardinality:
                raise StructureError(f"duplicate variable name '{v.name}'")
            if v.cardinality < 1:
                raise StructureError(f"variable '{v.name}' has cardinality {v.cardinality}")
            self.cardinality[v.name] = v.cardinality

        for f in self.factors:
            if len(set(f.scope)) != len(f.scope):
                raise StructureError(f"factor scope {f.scope} repeats a variable")
            for name in f.scope:
                if name not in self.cardinality:
                    raise UnknownNameError(f"factor references unknown variable '{name}'")
            expected = tuple(self.cardinality[name] for name in f.scope)
            if f.table.shape[batch_dims:] != expected or f.table.data.ndim != batch_dims + len(expected):
                raise DimensionError(
                    f"factor over {f.scope} has table shape {f.table.shape}, expected batch + {expected}"
                )

    def variable_names(self) -> List[str]:
        return [v.name for v in self.variables]


def _host_structure(fg: FactorGraph) -> List[Tuple[str, ...]]:
    """Scopes left after absorbing every factor into a factor with a superset scope."""
    order = sorted(range(len(fg.factors)), key=lambda i: -len(fg.factors[i].scope))
    hosts: List[Tuple[str, ...]] = []
    for i in order:
        scope = fg.factors[i].scope
        if not any(set(scope) <= set(h) for h in hosts):
            hosts.append(scope)
    return hosts


def validate(fg: FactorGraph, root: Optional[str] = None) -> List[str]:
    """
    Check the tree property and return a leaf-to-root elimination order.

    Factors whose scope is contained in another factor's scope are merged into
    it first (the product is unchanged), then the bipartite variable-factor
    graph must be a forest.

    Args:
        fg: factor graph
        root: variable that should come last in its component (usually the query)

    Returns:
        every variable name, each component in DFS post-order from its root
    """
    used = {name for f in fg.factors for name in f.scope}
    dangling = [v.name for v in fg.variables if v.name not in used]
    if dangling:
        raise StructureError(f"variables not in any factor scope: {dangling}")
    if root is not None and root not in fg.cardinality:
        raise UnknownNameError(f"unknown variable '{root}'")
    if not fg.variables:
        return []

    G = nx.Graph()
    for v in fg.variables:
        G.add_node(("var", v.name))
    for j, scope in enumerate(_host_structure(fg)):
        G.add_node(("factor", j))
        for name in scope:
            G.add_edge(("factor", j), ("var", name))

    if not nx.is_forest(G):
        cycle = nx.find_cycle(G)
        raise StructureError(f"factor graph contains a cycle: {cycle}")

    order: List[str] = []
    seen = set()
    names = fg.variable_names()
    for name in names:
        if name in seen:
            continue
        component = nx.node_connected_component(G, ("var", name))
        members = [n for n in names if ("var", n) in component]
        component_root = root if root in members else members[-1]
        for kind, label in nx.dfs_postorder_nodes(G, source=("var", component_root)):
            if kind == "var":
                order.append(label)
        seen.update(members)
    return order


def check_distributions(fg: FactorGraph, tol: float = 1e-9) -> List[str]:
    """Describe every distribution-tagged factor that is negative or not normalized."""
    problems = []
    bd = fg.batch_dims
    for f in fg.factors:
        if f.distribution_over is None:
            continue
        table = f.table.data
        if np.any(table < 0):
            problems.append(f"factor {f.scope} has negative entries")
        axes = tuple(bd + f.scope.index(name) for name in f.distribution_over)
        deviation = float(np.max(np.abs(table.sum(axis=axes) - 1.0))) if table.size else 0.0
        if deviation > tol:
            problems.append(f"factor {f.scope} over {f.distribution_over} deviates from 1 by {deviation:.3g}")
    return problems


def _check_evidence(fg: FactorGraph, query: str, evidence: Optional[Mapping[str, int]]) -> Dict[str, int]:
    if query not in fg.cardinality:
        raise UnknownNameError(f"unknown variable '{query}'")
    evidence = dict(evidence or {})
    for name, value in evidence.items():
        if name not in fg.cardinality:
            raise UnknownNameError(f"unknown variable '{name}'")
        if not 0 <= value < fg.cardinality[name]:
            raise IndexOutOfRange(f"evidence {name}={value} outside cardinality {fg.cardinality[name]}")
    return evidence


@dataclass
class _Potential:
    scope: Tuple[str, ...]
    node: Node


def _align(g: Graph, pot: _Potential, target: Tuple[str, ...], fg: FactorGraph) -> Node:
    """Permute and pad a potential so it broadcasts against `target` (after the batch axes)."""
    bd = fg.batch_dims
    present = [name for name in target if name in pot.scope]
    perm = list(range(bd)) + [bd + pot.scope.index(name) for name in present]
    node = pot.node
    if perm != list(range(len(perm))):
        node = g.transpose(node, perm)
    shape = node.shape[:bd] + tuple(fg.cardinality[n] if n in pot.scope else 1 for n in target)
    if shape != node.shape:
        node = g.reshape(node, shape)
    return node


def _product(g: Graph, pots: List[_Potential], fg: FactorGraph) -> _Potential:
    target: List[str] = []
    for pot in pots:
        for name in pot.scope:
            if name not in target:
                target.append(name)
    scope = tuple(target)
    result = _align(g, pots[0], scope, fg)
    for pot in pots[1:]:
        result = g.mul(result, _align(g, pot, scope, fg))
    return _Potential(scope, result)


def marginal(
    g: Graph,
    fg: FactorGraph,
    query: str,
    evidence: Optional[Mapping[str, int]] = None,
    normalized: bool = False,
) -> Node:
    """
    Sum-product marginal of `query` as an autodiff node.

    Compiled to broadcast-multiply and reduce_sum along the elimination order
    from `validate`, so the backward pass is whatever autodiff derives for
    those ops. Evidence is clamped by multiplying in one-hot indicator tables.

    Returns:
        node of shape batch_shape + (cardinality(query),), unnormalized unless
        `normalized` is set
    """
    evidence = _check_evidence(fg, query, evidence)
    order = validate(fg, root=query)
    bd = fg.batch_dims

    pots = [_Potential(f.scope, f.table) for f in fg.factors]
    for name, value in evidence.items():
        indicator = np.zeros((1,) * bd + (fg.cardinality[name],))
        indicator[(0,) * bd + (value,)] = 1.0
        pots.append(_Potential((name,), g.constant(indicator)))

    for name in order:
        if name == query:
            continue
        bucket = [p for p in pots if name in p.scope]
        pots = [p for p in pots if name not in p.scope]
        joined = _product(g, bucket, fg)
        axis = bd + joined.scope.index(name)
        pots.append(_Potential(tuple(n for n in joined.scope if n != name), g.reduce_sum(joined.node, axis=axis)))

    # remaining potentials are over (query,) or scalar components
    result = _product(g, pots, fg)
    node = _align(g, result, (query,), fg)
    if node.shape[bd:] != (fg.cardinality[query],):
        # only scalar potentials survived; cannot happen when query is in some scope
        raise StructureError(f"query '{query}' lost during elimination")
    if normalized:
        total = g.reduce_sum(node, axis=-1, keepdims=True)
        node = g.div(node, total)
    return node


def brute_force_marginal(
    fg: FactorGraph,
    query: str,
    evidence: Optional[Mapping[str, int]] = None,
    normalized: bool = False,
) -> np.ndarray:
    """
    Reference marginal by materialising the full joint table.

    Independent of the elimination path; limited to MAX_ENUMERATION_STATES
    joint states.
    """
    evidence = _check_evidence(fg, query, evidence)
    names = fg.variable_names()
    cards = [fg.cardinality[n] for n in names]
    states = int(np.prod(cards)) if cards else 1
    if states > MAX_ENUMERATION_STATES:
        raise CapacityError(f"joint state space {states} exceeds {MAX_ENUMERATION_STATES}")

    bd = fg.batch_dims
    batch_shape = np.broadcast_shapes(*[f.table.shape[:bd] for f in fg.factors]) if fg.factors else ()
    joint = np.ones(batch_shape + tuple(cards))
    for f in fg.factors:
        table = f.table.data
        present = [n for n in names if n in f.scope]
        table = np.transpose(table, list(range(bd)) + [bd + f.scope.index(n) for n in present])
        shape = table.shape[:bd] + tuple(fg.cardinality[n] if n in f.scope else 1 for n in names)
        joint = joint * table.reshape(shape)
    for name, value in evidence.items():
        mask = np.zeros(fg.cardinality[name])
        mask[value] = 1.0
        shape = [1] * (bd + len(names))
        shape[bd + names.index(name)] = fg.cardinality[name]
        joint = joint * mask.reshape(shape)

    q = names.index(query)
    other_axes = tuple(bd + i for i in range(len(names)) if i != q)
    result = joint.sum(axis=other_axes)
    if normalized:
        result = result / result.sum(axis=-1, keepdims=True)
    return result


def random_tree_factor_graph(
    g: Graph,
    rng: np.random.Generator,
    max_variables: int = 5,
    max_cardinality: int = 4,
) -> FactorGraph:
    """
    Random tree-structured factor graph with non-negative tables.

    Each new variable attaches to an earlier one through a pairwise factor, or
    now and then through a three-way factor that also covers the parent's own
    parent; unary factors are sprinkled in. Scopes are shuffled.
    """
    n = int(rng.integers(1, max_variables + 1))
    variables = [DiscreteVariable(f"x{i}", int(rng.integers(1, max_cardinality + 1))) for i in range(n)]
    card = {v.name: v.cardinality for v in variables}
    parent: Dict[int, int] = {}
    used_pairs = set()
    scopes: List[Tuple[str, ...]] = []
    for i in range(1, n):
        p = int(rng.integers(i))
        parent[i] = p
        if p in parent and (p, parent[p]) not in used_pairs and rng.random() < 0.3:
            # no other factor may then cover two of these three variables
            used_pairs.update({(p, parent[p]), (i, p)})
            scope = [f"x{i}", f"x{p}", f"x{parent[p]}"]
        else:
            scope = [f"x{i}", f"x{p}"]
        rng.shuffle(scope)
        scopes.append(tuple(scope))
    for i in range(n):
        if n == 1 or rng.random() < 0.5:
            scopes.append((f"x{i}",))

    factors = [Factor(s, g.constant(rng.random(tuple(card[v] for v in s)))) for s in scopes]
    return FactorGraph(variables, factors)
