"""
Semantic Recommender - the recommendation iGraph.

Pipeline per (user, item) entry:
  1. embedding layer: concat(user row, item row)
  2. user/item category networks -> P(z_n | u, f_n), P(y_n | t, f_n)   (neurons)
  3. feature mixture network    -> P(f_n | u, t)
  4. two-level semantic mixture through the factor graph               (probabilities)
  5. expected rating of the softmax over rating levels
  6. diversity band judgment with an additive correction network       (logic)

Every method accepts scalar ids or equal-length id arrays; arrays are evaluated
as one batched graph.
"""
import logging
import math
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from core.autodiff import Graph, Node, Tensor
from core.errors import ConfigError, ContractError, IndexOutOfRange
from core.factor_graph import DiscreteVariable, Factor, FactorGraph, marginal
from core.layers import init_perceptron, layer_sizes, perceptron, perceptron_shapes
from core.models import HyperParams

logger = logging.getLogger(__name__)

Ids = Union[int, Sequence[int], np.ndarray]

USER_EMBED = "embedding/user"
ITEM_EMBED = "embedding/item"
ITEM_DIVERSITY_EMBED = "embedding/item_diversity"
TAU_LOGITS = "semantic/tau_logits"
OMEGA_USER = "rating/omega_user"
OMEGA_ITEM = "rating/omega_item"

USER_NET = "user_net"
ITEM_NET = "item_net"
FEATURE_NET = "feature_net"
DIVERSITY_NET = "diversity_net"


def _network_sizes(hyper: HyperParams) -> Dict[str, list]:
    k, F, C, R = hyper.k, hyper.num_features, hyper.num_categories, hyper.num_ratings
    return {
        USER_NET: layer_sizes(2 * k, hyper.user_hidden, F * C),
        ITEM_NET: layer_sizes(2 * k, hyper.item_hidden, F * C),
        FEATURE_NET: layer_sizes(2 * k, hyper.feature_hidden, F),
        DIVERSITY_NET: layer_sizes(k + R, hyper.diversity_hidden, 1),
    }


def param_shapes(hyper: HyperParams, num_users: int, num_items: int) -> Dict[str, tuple]:
    """Expected shape of every parameter; used for init and checkpoint validation."""
    k, F, C, R = hyper.k, hyper.num_features, hyper.num_categories, hyper.num_ratings
    shapes = {
        USER_EMBED: (num_users, k),
        ITEM_EMBED: (num_items, k),
        ITEM_DIVERSITY_EMBED: (num_items, k),
        TAU_LOGITS: (F, C, C, R),
        OMEGA_USER: (num_users,),
        OMEGA_ITEM: (num_items,),
    }
    for prefix, sizes in _network_sizes(hyper).items():
        shapes.update(perceptron_shapes(prefix, sizes))
    return shapes


def init_params(hyper: HyperParams, num_users: int, num_items: int, seed: int = 0) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    k, F, C, R = hyper.k, hyper.num_features, hyper.num_categories, hyper.num_ratings
    params = {
        USER_EMBED: Tensor(rng.normal(0.0, 0.1, size=(num_users, k)), requires_grad=True),
        ITEM_EMBED: Tensor(rng.normal(0.0, 0.1, size=(num_items, k)), requires_grad=True),
        ITEM_DIVERSITY_EMBED: Tensor(rng.normal(0.0, 0.1, size=(num_items, k)), requires_grad=True),
        TAU_LOGITS: Tensor(rng.normal(0.0, 0.1, size=(F, C, C, R)), requires_grad=True),
        OMEGA_USER: Tensor(np.ones(num_users), requires_grad=True),
        OMEGA_ITEM: Tensor(np.ones(num_items), requires_grad=True),
    }
    for prefix, sizes in _network_sizes(hyper).items():
        params.update(init_perceptron(rng, prefix, sizes))
    return params


def matching_factor(g: Graph, pz: Node, py: Node, tau_logits: Node, sigma: float) -> Node:
    """
    Semantic matching factor tau[n,i,j,:] * exp(-|Pz[n,i] - Py[n,j]| / sigma).

    Args:
        pz, py: (…, F, C) category distributions
        tau_logits: (F, C, C, R), softmaxed along R
        sigma: positive bandwidth

    Returns:
        (…, F, C, C, R) node with entries in (0, 1]
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    lead = pz.shape[:-2]
    F, C = pz.shape[-2:]
    tau = g.softmax(tau_logits, axis=-1)
    gap = g.abs(g.sub(g.reshape(pz, lead + (F, C, 1)), g.reshape(py, lead + (F, 1, C))))
    decay = g.exp(g.scale(gap, -1.0 / sigma))
    return g.mul(g.reshape(decay, lead + (F, C, C, 1)), tau)


def expected_rating(g: Graph, p_hat: Node, omega_u: Node, omega_v: Node) -> Node:
    """E[r] under softmax_p(p_hat[p] * omega_u * omega_v) over levels 1..|R|."""
    R = p_hat.shape[-1]
    if R < 2:
        raise ContractError("expected_rating needs at least two rating levels")
    temperature = g.mul(omega_u, omega_v)
    weights = g.softmax(g.mul(p_hat, g.reshape(temperature, temperature.shape + (1,))), axis=-1)
    levels = g.constant(np.arange(1, R + 1, dtype=np.float64))
    return g.reduce_sum(g.mul(weights, levels), axis=-1)


def diversity_adjust(g: Graph, r: Node, p_hat: Node, items: Ids, hyper: HyperParams) -> Node:
    """
    Logic judgment: inside [diversity_lower, diversity_upper] add the diversity
    network's correction, elsewhere return r untouched.

    The band test is evaluated on forward values and carries no gradient.
    """
    table = g.param(ITEM_DIVERSITY_EMBED)
    items = np.asarray(items)
    if items.size and (items.min() < 0 or items.max() >= table.shape[0]):
        raise IndexOutOfRange(f"item index out of range for {table.shape[0]} items")
    if not hyper.diversity_active:
        return r
    mask = (r.data >= hyper.diversity_lower) & (r.data <= hyper.diversity_upper)
    if not mask.any():
        return r
    x = g.concat(g.gather(table, items), p_hat)
    num_layers = len(hyper.diversity_hidden) + 1
    correction = g.reshape(perceptron(g, DIVERSITY_NET, x, num_layers), r.shape)
    return g.where(mask, g.add(r, correction), r)


class SemanticRecommender:
    """
    Rating predictor holding all trainable state of the recommendation graph.

    Args:
        hyper: validated hyper-parameters
        params: parameter id -> Tensor (see `param_shapes`)
        num_users, num_items: dense id ranges
    """

    def __init__(self, hyper: HyperParams, params: Dict[str, Tensor], num_users: int, num_items: int):
        self.hyper = hyper
        self.params = params
        self.num_users = num_users
        self.num_items = num_items

    @classmethod
    def create(cls, hyper: HyperParams, num_users: int, num_items: int, seed: int = 0) -> "SemanticRecommender":
        return cls(hyper, init_params(hyper, num_users, num_items, seed), num_users, num_items)

    def _check_ids(self, users: Ids, items: Ids) -> Tuple[np.ndarray, np.ndarray]:
        users, items = np.asarray(users), np.asarray(items)
        if users.shape != items.shape:
            raise ContractError(f"users {users.shape} and items {items.shape} must have the same shape")
        for kind, ids, n in (("user", users, self.num_users), ("item", items, self.num_items)):
            if not np.issubdtype(ids.dtype, np.integer):
                raise ContractError(f"{kind} ids must be integers")
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                bad = ids[(ids < 0) | (ids >= n)].reshape(-1)[0]
                raise IndexOutOfRange(f"{kind} index {int(bad)} out of range for {n} {kind}s")
        return users, items

    # --- neural part ------------------------------------------------------

    def entry_embedding(self, g: Graph, users: Ids, items: Ids) -> Node:
        users, items = self._check_ids(users, items)
        return g.concat(g.gather(g.param(USER_EMBED), users), g.gather(g.param(ITEM_EMBED), items))

    def _distribution_table(self, g: Graph, prefix: str, hidden: Sequence[int], entry: Node) -> Node:
        F, C = self.hyper.num_features, self.hyper.num_categories
        logits = perceptron(g, prefix, entry, len(hidden) + 1)
        return g.softmax(g.reshape(logits, entry.shape[:-1] + (F, C)), axis=-1)

    def category_distributions(self, g: Graph, entry: Node) -> Tuple[Node, Node]:
        """(Pz, Py): each (…, F, C), row-stochastic along C."""
        pz = self._distribution_table(g, USER_NET, self.hyper.user_hidden, entry)
        py = self._distribution_table(g, ITEM_NET, self.hyper.item_hidden, entry)
        return pz, py

    def feature_mixture(self, g: Graph, entry: Node) -> Node:
        logits = perceptron(g, FEATURE_NET, entry, len(self.hyper.feature_hidden) + 1)
        return g.softmax(logits, axis=-1)

    # --- probabilistic part -----------------------------------------------

    def semantic_graph(self, g: Graph, entry: Node) -> FactorGraph:
        """Factor graph of the two-level mixture for the given entry embedding(s)."""
        h = self.hyper
        pz, py = self.category_distributions(g, entry)
        pf = self.feature_mixture(g, entry)
        match = matching_factor(g, pz, py, g.param(TAU_LOGITS), h.sigma)
        variables = [
            DiscreteVariable("feature", h.num_features),
            DiscreteVariable("user_category", h.num_categories),
            DiscreteVariable("item_category", h.num_categories),
            DiscreteVariable("rating", h.num_ratings),
        ]
        factors = [
            Factor(("feature",), pf, distribution_over=("feature",)),
            Factor(("feature", "user_category"), pz, distribution_over=("user_category",)),
            Factor(("feature", "item_category"), py, distribution_over=("item_category",)),
            Factor(("feature", "user_category", "item_category", "rating"), match),
        ]
        return FactorGraph(variables, factors, batch_dims=len(entry.shape) - 1)

    def preference_distribution(self, g: Graph, users: Ids, items: Ids) -> Node:
        """p_hat: (…, |R|) marginal over rating levels."""
        entry = self.entry_embedding(g, users, items)
        return marginal(g, self.semantic_graph(g, entry), "rating")

    # --- rating generation and logic judgment -----------------------------

    def rating_node(self, g: Graph, users: Ids, items: Ids) -> Node:
        users, items = self._check_ids(users, items)
        p_hat = self.preference_distribution(g, users, items)
        omega_u = g.reshape(g.gather(g.reshape(g.param(OMEGA_USER), (-1, 1)), users), users.shape)
        omega_v = g.reshape(g.gather(g.reshape(g.param(OMEGA_ITEM), (-1, 1)), items), items.shape)
        r = expected_rating(g, p_hat, omega_u, omega_v)
        return diversity_adjust(g, r, p_hat, items, self.hyper)

    def predict(self, user: int, item: int) -> float:
        g = Graph(self.params)
        return self.rating_node(g, int(user), int(item)).item()

    def predict_batch(self, users: Ids, items: Ids) -> np.ndarray:
        g = Graph(self.params)
        return np.array(self.rating_node(g, users, items).data, dtype=np.float64).reshape(np.shape(users))

    def loss_batch(self, g: Graph, users: Ids, items: Ids, ratings: Sequence[float]) -> Node:
        """Mean squared error of diversity-adjusted predictions."""
        ratings = np.asarray(ratings, dtype=np.float64).reshape(-1)
        users = np.asarray(users).reshape(-1)
        items = np.asarray(items).reshape(-1)
        if ratings.size == 0:
            raise ContractError("loss_batch needs a nonempty batch")
        if np.any(ratings < 1) or np.any(ratings > self.hyper.num_ratings):
            raise ContractError(f"observed ratings must lie in [1, {self.hyper.num_ratings}]")
        diff = g.sub(self.rating_node(g, users, items), g.constant(ratings))
        return g.scale(g.reduce_sum(g.mul(diff, diff)), 1.0 / ratings.size)


def brute_force_preference(
    pf: np.ndarray,
    pz: np.ndarray,
    py: np.ndarray,
    tau_logits: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """Triple loop over (n, i, j) of the two-level mixture; reference for one entry."""
    shifted = np.exp(tau_logits - tau_logits.max(axis=-1, keepdims=True))
    tau = shifted / shifted.sum(axis=-1, keepdims=True)
    F, C = pz.shape
    out = np.zeros(tau.shape[-1])
    for n in range(F):
        for i in range(C):
            for j in range(C):
                weight = pf[n] * pz[n, i] * py[n, j] * math.exp(-abs(pz[n, i] - py[n, j]) / sigma)
                out += weight * tau[n, i, j]
    return out
