"""
Verification - the property suite behind `app.py verify`.

Each suite returns a SuiteResult listing every failing case; `run_verification`
runs them all in order and never stops at the first failure.
"""
import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from core.autodiff import Graph, Node, Tensor, finite_diff_check
from core.factor_graph import brute_force_marginal, check_distributions, marginal, random_tree_factor_graph
from core.models import HyperParams, SuiteResult, TextClfConfig, VerificationReport
from core.recommender import (
    DIVERSITY_NET,
    SemanticRecommender,
    brute_force_preference,
    diversity_adjust,
    expected_rating,
)
from core.textclf import TopicClassifier, doc_topic_dist, document_graph, encode_words, word_topic_dist

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
EXACT_TOLERANCE = 1e-10
POINTS_PER_GROUP = 20

LossBuilder = Callable[[Graph], Node]


class _Suite:
    """Collects checks and failures for one SuiteResult."""

    def __init__(self, name: str):
        self.name = name
        self.checks = 0
        self.failures: List[str] = []

    def check(self, ok: bool, case: str) -> None:
        self.checks += 1
        if not ok:
            self.failures.append(case)

    def result(self) -> SuiteResult:
        return SuiteResult(name=self.name, passed=not self.failures, checks=self.checks, failures=self.failures)


# --- gradient checks --------------------------------------------------------

def _weighted_sum(g: Graph, out: Node, rng: np.random.Generator) -> Node:
    return g.reduce_sum(g.mul(out, g.constant(rng.normal(size=out.shape))))


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_gradient_cases(rng: np.random.Generator) -> Dict[str, Tuple[Dict[str, Tensor], LossBuilder]]:
    """One small random loss per differentiable op kind."""
    def params(**arrays: np.ndarray) -> Dict[str, Tensor]:
        return {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}

    mask = rng.random((3, 4)) < 0.5
    rows = np.array([0, 2, 2])

    def unary(fn: Callable[[Graph, Node], Node]) -> LossBuilder:
        weights = rng.normal(size=(3, 4))
        return lambda g: g.reduce_sum(g.mul(fn(g, g.param("a")), g.constant(weights)))

    def binary(fn: Callable[[Graph, Node, Node], Node], out_shape: Tuple[int, ...]) -> LossBuilder:
        weights = rng.normal(size=out_shape)
        return lambda g: g.reduce_sum(g.mul(fn(g, g.param("a"), g.param("b")), g.constant(weights)))

    return {
        "matmul": (params(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(4, 5))),
                   binary(lambda g, a, b: g.matmul(a, b), (2, 3, 5))),
        "softmax": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.softmax(a, axis=0))),
        "add": (params(a=rng.normal(size=(3, 4)), b=rng.normal(size=(4,))),
                binary(lambda g, a, b: g.add(a, b), (3, 4))),
        "sub": (params(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 1))),
                binary(lambda g, a, b: g.sub(a, b), (3, 4))),
        "mul": (params(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 4))),
                binary(lambda g, a, b: g.mul(a, b), (3, 4))),
        "div": (params(a=rng.normal(size=(3, 4)), b=rng.uniform(0.5, 2.0, size=(3, 4))),
                binary(lambda g, a, b: g.div(a, b), (3, 4))),
        "exp": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.exp(a))),
        "log": (params(a=rng.uniform(0.5, 2.0, size=(3, 4))), unary(lambda g, a: g.log(a))),
        "neg": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.neg(a))),
        "abs": (params(a=_away_from_zero(rng, (3, 4))), unary(lambda g, a: g.abs(a))),
        "scale": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.scale(a, -2.5))),
        "tanh": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.tanh(a))),
        "sigmoid": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.sigmoid(a))),
        "concat": (params(a=rng.normal(size=(3, 2)), b=rng.normal(size=(3, 2))),
                   binary(lambda g, a, b: g.concat(a, b), (3, 4))),
        "stack": (params(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 4))),
                  binary(lambda g, a, b: g.stack([a, b, a], axis=1), (3, 3, 4))),
        "gather": (params(a=rng.normal(size=(3, 4))), unary(lambda g, a: g.gather(a, rows))),
        "reduce_sum": (params(a=rng.normal(size=(3, 4))),
                       unary(lambda g, a: g.reduce_sum(g.mul(a, a), axis=1, keepdims=True))),
        "reshape": (params(a=rng.normal(size=(3, 4))),
                    unary(lambda g, a: g.reshape(g.reshape(g.exp(a), (2, 6)), (3, 4)))),
        "transpose": (params(a=rng.normal(size=(3, 4))),
                      unary(lambda g, a: g.transpose(g.transpose(g.tanh(a), (1, 0)), (1, 0)))),
        "where": (params(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 4))),
                  binary(lambda g, a, b: g.where(mask, g.exp(a), g.tanh(b)), (3, 4))),
    }


def _sample_coords(rng: np.random.Generator, shape: Tuple[int, ...], count: int) -> List[Tuple[int, ...]]:
    coords = list(np.ndindex(*shape))
    if len(coords) <= count:
        return coords
    picked = rng.choice(len(coords), size=count, replace=False)
    return [coords[i] for i in sorted(picked)]


def tiny_recommender(seed: int = 0) -> Tuple[SemanticRecommender, np.ndarray, np.ndarray, np.ndarray]:
    """|U| = |T| = 3, k = 2, |F| = |C| = 2, |R| = 5, gate active on the whole range."""
    hyper = HyperParams(
        k=2, num_features=2, num_categories=2, num_ratings=5, sigma=0.5,
        diversity_lower=1.0, diversity_upper=5.0,
        user_hidden=[3], item_hidden=[3], feature_hidden=[3], diversity_hidden=[3],
    )
    model = SemanticRecommender.create(hyper, 3, 3, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for tensor in model.params.values():
        tensor.data += rng.normal(0.0, 0.3, size=tensor.shape)
    users = np.array([0, 1, 2, 0, 2, 1])
    items = np.array([0, 1, 2, 2, 1, 0])
    ratings = rng.integers(1, 6, size=users.size).astype(np.float64)
    return model, users, items, ratings


def gradient_suite(seed: int = 0) -> SuiteResult:
    """Analytic vs central differences for every op and for the full recommender loss."""
    suite = _Suite("gradient")
    rng = np.random.default_rng(seed)
    for op, (params, build) in op_gradient_cases(rng).items():
        for name in params:
            err = finite_diff_check(build, params, name)
            suite.check(err < GRADIENT_TOLERANCE, f"op {op}: parameter {name} rel err {err:.3g}")

    model, users, items, ratings = tiny_recommender(seed)

    def loss(g: Graph) -> Node:
        return model.loss_batch(g, users, items, ratings)

    for name, tensor in model.params.items():
        coords = _sample_coords(rng, tensor.shape, POINTS_PER_GROUP)
        err = finite_diff_check(loss, model.params, name, coords=coords)
        suite.check(err < GRADIENT_TOLERANCE, f"recommender loss: parameter {name} rel err {err:.3g}")
    return suite.result()


# --- exact inference ----------------------------------------------------------

def sum_product_suite(seed: int = 0, trials: int = 100) -> SuiteResult:
    suite = _Suite("sum_product")
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        g = Graph()
        fg = random_tree_factor_graph(g, rng)
        names = fg.variable_names()
        query = names[int(rng.integers(len(names)))]
        evidence = {}
        others = [n for n in names if n != query]
        if others and rng.random() < 0.3:
            name = others[int(rng.integers(len(others)))]
            evidence[name] = int(rng.integers(fg.cardinality[name]))
        got = marginal(g, fg, query, evidence).data
        want = brute_force_marginal(fg, query, evidence)
        gap = float(np.max(np.abs(got - want)))
        suite.check(gap <= EXACT_TOLERANCE, f"tree {trial}: query {query} evidence {evidence} max abs {gap:.3g}")
    return suite.result()


def mixture_suite(seed: int = 0, draws: int = 50) -> SuiteResult:
    """preference_distribution against the triple-sum oracle."""
    suite = _Suite("mixture")
    rng = np.random.default_rng(seed)
    for draw in range(draws):
        F, C = (int(x) for x in rng.choice([1, 2, 3, 5], size=2))
        R = int(rng.choice([2, 5]))
        hyper = HyperParams(
            k=3, num_features=F, num_categories=C, num_ratings=R,
            sigma=float(rng.uniform(0.2, 2.0)), diversity_lower=0.0, diversity_upper=0.0,
            user_hidden=[4], item_hidden=[4], feature_hidden=[4], diversity_hidden=[4],
        )
        model = SemanticRecommender.create(hyper, 2, 2, seed=int(rng.integers(1 << 30)))
        for tensor in model.params.values():
            tensor.data += rng.normal(0.0, 0.5, size=tensor.shape)
        user, item = int(rng.integers(2)), int(rng.integers(2))
        g = Graph(model.params)
        entry = model.entry_embedding(g, user, item)
        pz, py = model.category_distributions(g, entry)
        pf = model.feature_mixture(g, entry)
        got = model.preference_distribution(g, user, item).data
        want = brute_force_preference(pf.data, pz.data, py.data, g.param("semantic/tau_logits").data, hyper.sigma)
        gap = float(np.max(np.abs(got - want)))
        suite.check(gap <= EXACT_TOLERANCE, f"draw {draw}: F={F} C={C} R={R} max abs {gap:.3g}")
    return suite.result()


def normalization_suite(seed: int = 0, samples: int = 1000) -> SuiteResult:
    suite = _Suite("normalization")
    rng = np.random.default_rng(seed)

    model, users, items, _ = tiny_recommender(seed)
    g = Graph(model.params)
    fg = model.semantic_graph(g, model.entry_embedding(g, users, items))
    problems = check_distributions(fg)
    suite.check(not problems, f"semantic graph: {problems}")
    p_hat = marginal(g, fg, "rating", normalized=True).data
    suite.check(bool(np.all(np.abs(p_hat.sum(axis=-1) - 1.0) <= 1e-9)), "normalized rating marginal does not sum to 1")

    for R in (2, 3, 5, 10):
        g = Graph()
        p = rng.uniform(0.0, 1.0, size=(samples, R)) * rng.uniform(0.01, 10.0, size=(samples, 1))
        omega_u = g.constant(rng.uniform(-5.0, 5.0, size=samples))
        omega_v = g.constant(rng.uniform(-5.0, 5.0, size=samples))
        r = expected_rating(g, g.constant(p), omega_u, omega_v).data
        suite.check(bool(np.all((r >= 1.0 - 1e-12) & (r <= R + 1e-12))), f"expected_rating left [1, {R}]")

        flat = expected_rating(g, g.constant(np.full((1, R), 0.3)), g.constant([1.7]), g.constant([0.9])).item()
        suite.check(abs(flat - (R + 1) / 2.0) <= 1e-12, f"constant preference with R={R} gave {flat!r}")

    config = TextClfConfig(embed_dim=3, hidden_size=4, num_topics=3)
    clf = TopicClassifier.create(vocab_size=6, num_classes=2, config=config, seed=seed)
    g = Graph(clf.params)
    docs = rng.integers(0, 6, size=(4, 5))
    word_topics = g.stack([word_topic_dist(g, h, g.param("topics/M")) for h in encode_words(g, docs)], axis=1)
    problems = check_distributions(document_graph(g, word_topics))
    suite.check(not problems, f"document graph: {problems}")
    probs = clf.class_distribution(g, docs).data
    suite.check(bool(np.all(np.abs(probs.sum(axis=-1) - 1.0) <= 1e-9)), "class distribution does not sum to 1")
    return suite.result()


def diversity_gate_suite(seed: int = 0, samples: int = 1000) -> SuiteResult:
    suite = _Suite("diversity_gate")
    rng = np.random.default_rng(seed)
    model, _, _, _ = tiny_recommender(seed)
    hyper = model.hyper.model_copy(update={"diversity_lower": 2.5, "diversity_upper": 4.0})
    R = hyper.num_ratings
    items = rng.integers(0, model.num_items, size=samples)
    p_hat = rng.uniform(0.0, 1.0, size=(samples, R))

    below = rng.uniform(1.0, hyper.diversity_lower, size=samples // 2)
    above = rng.uniform(np.nextafter(hyper.diversity_upper, np.inf), R, size=samples - below.size)
    outside = np.concatenate([below, above])
    g = Graph(model.params)
    out = diversity_adjust(g, g.constant(outside), g.constant(p_hat), items, hyper).data
    suite.check(bool(np.array_equal(out, outside)), "prediction outside the band was modified")

    zeroed = {name: Tensor(np.zeros_like(t.data) if name.startswith(DIVERSITY_NET) else t.data, requires_grad=True)
              for name, t in model.params.items()}
    inside = rng.uniform(hyper.diversity_lower, hyper.diversity_upper, size=samples)
    g = Graph(zeroed)
    out = diversity_adjust(g, g.constant(inside), g.constant(p_hat), items, hyper).data
    suite.check(bool(np.array_equal(out, inside)), "zero diversity network changed a prediction inside the band")

    disabled = hyper.model_copy(update={"diversity_lower": 0.0, "diversity_upper": 0.0})
    g = Graph(model.params)
    out = diversity_adjust(g, g.constant(inside), g.constant(p_hat), items, disabled).data
    suite.check(bool(np.array_equal(out, inside)), "disabled gate changed a prediction")
    return suite.result()


def textclf_enumeration_suite(seed: int = 0, trials: int = 20) -> SuiteResult:
    """doc_topic_dist against the empirical average and the enumerated chain."""
    suite = _Suite("textclf_enumeration")
    rng = np.random.default_rng(seed)
    config = TextClfConfig(embed_dim=3, hidden_size=4, num_topics=3)
    clf = TopicClassifier.create(vocab_size=8, num_classes=2, config=config, seed=seed)
    for trial in range(trials):
        B, L = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        docs = rng.integers(0, 8, size=(B, L))
        g = Graph(clf.params)
        word_topics = g.stack([word_topic_dist(g, h, g.param("topics/M")) for h in encode_words(g, docs)], axis=1)
        got = doc_topic_dist(g, word_topics).data
        averaged = word_topics.data.mean(axis=1)
        enumerated = brute_force_marginal(document_graph(g, word_topics), "topic")
        gap = max(float(np.max(np.abs(got - averaged))), float(np.max(np.abs(got - enumerated))))
        suite.check(gap <= EXACT_TOLERANCE, f"trial {trial}: B={B} L={L} max abs {gap:.3g}")
    return suite.result()


SUITES: List[Tuple[str, Callable[[int], SuiteResult]]] = [
    ("gradient", gradient_suite),
    ("sum_product", sum_product_suite),
    ("mixture", mixture_suite),
    ("normalization", normalization_suite),
    ("diversity_gate", diversity_gate_suite),
    ("textclf_enumeration", textclf_enumeration_suite),
]


def run_verification(seed: int = 0) -> VerificationReport:
    """Run every suite; an exception inside a suite counts as a failure of that suite."""
    results = []
    for name, suite in SUITES:
        try:
            result = suite(seed)
        except Exception as e:
            logger.exception("Suite %s raised", name)
            result = SuiteResult(name=name, passed=False, checks=0, failures=[f"{type(e).__name__}: {e}"])
        logger.info("%s %s (%d checks, %d failures)", "PASS" if result.passed else "FAIL",
                    name, result.checks, len(result.failures))
        results.append(result)
    return VerificationReport(passed=all(r.passed for r in results), suites=results)
