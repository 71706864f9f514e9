import math

import numpy as np
import pytest

from core.autodiff import Graph, finite_diff_check
from core.errors import ConfigError, ContractError, IndexOutOfRange
from core.models import HyperParams
from core.recommender import (
    DIVERSITY_NET,
    ITEM_DIVERSITY_EMBED,
    ITEM_EMBED,
    OMEGA_ITEM,
    OMEGA_USER,
    TAU_LOGITS,
    USER_EMBED,
    SemanticRecommender,
    brute_force_preference,
    diversity_adjust,
    expected_rating,
    matching_factor,
    param_shapes,
)
from core.verification import mixture_suite, tiny_recommender


def zero_network(model, prefix):
    for name, tensor in model.params.items():
        if name.startswith(prefix):
            tensor.data[...] = 0.0


@pytest.fixture
def model(tiny_hyper):
    return SemanticRecommender.create(tiny_hyper, 3, 3, seed=0)


class TestHyperParams:
    def test_sigma_is_required(self):
        with pytest.raises(ValueError, match="sigma"):
            HyperParams()

    def test_band_must_fit_rating_range(self):
        with pytest.raises(ValueError):
            HyperParams(sigma=1.0, diversity_lower=0.5, diversity_upper=3.0)
        with pytest.raises(ValueError):
            HyperParams(sigma=1.0, diversity_lower=4.0, diversity_upper=3.0)

    def test_disabled_sentinel(self):
        hyper = HyperParams(sigma=1.0, diversity_lower=0.0, diversity_upper=0.0)
        assert not hyper.diversity_active
        assert HyperParams(sigma=1.0).diversity_active

    def test_param_shapes_cover_init(self, model, tiny_hyper):
        shapes = param_shapes(tiny_hyper, 3, 3)
        assert {n: t.shape for n, t in model.params.items()} == shapes
        assert shapes[TAU_LOGITS] == (2, 2, 2, 5)
        assert shapes[f"{DIVERSITY_NET}/layer0/weight"] == (2 + 5, 3)


class TestNeuralPart:
    def test_entry_embedding_concatenates_rows(self, model):
        model.params[USER_EMBED].data[1] = [1.0, 2.0]
        model.params[ITEM_EMBED].data[2] = [3.0, 4.0]
        g = Graph(model.params)
        assert np.array_equal(model.entry_embedding(g, 1, 2).data, [1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(model.entry_embedding(g, 0, 2).data[2:], [3.0, 4.0])

    def test_entry_embedding_rejects_unknown_ids(self, model):
        g = Graph(model.params)
        with pytest.raises(IndexOutOfRange, match="user index 3"):
            model.entry_embedding(g, 3, 0)
        with pytest.raises(IndexOutOfRange, match="item index -1"):
            model.entry_embedding(g, 0, -1)

    def test_entry_gradient_touches_only_source_rows(self, model):
        g = Graph(model.params)
        grads = g.backward(g.reduce_sum(model.entry_embedding(g, 1, 2)))
        assert np.array_equal(grads[USER_EMBED], [[0, 0], [1, 1], [0, 0]])
        assert np.array_equal(grads[ITEM_EMBED], [[0, 0], [0, 0], [1, 1]])

    def test_zero_networks_are_uniform(self, model):
        for prefix in ("user_net", "item_net", "feature_net"):
            zero_network(model, prefix)
        g = Graph(model.params)
        entry = model.entry_embedding(g, 0, 1)
        pz, py = model.category_distributions(g, entry)
        assert np.allclose(pz.data, 0.5) and np.allclose(py.data, 0.5)
        assert np.allclose(model.feature_mixture(g, entry).data, 0.5)

    def test_distributions_are_stochastic(self, model):
        g = Graph(model.params)
        entry = model.entry_embedding(g, np.array([0, 1, 2]), np.array([2, 0, 1]))
        pz, py = model.category_distributions(g, entry)
        assert pz.shape == (3, 2, 2)
        assert np.allclose(pz.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.allclose(py.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.allclose(model.feature_mixture(g, entry).data.sum(axis=-1), 1.0, atol=1e-9)

    def test_hand_set_linear_category_net(self):
        hyper = HyperParams(k=2, num_features=1, num_categories=2, sigma=1.0, user_hidden=[])
        model = SemanticRecommender.create(hyper, 1, 1)
        model.params[USER_EMBED].data[0] = [1.0, 2.0]
        model.params[ITEM_EMBED].data[0] = [3.0, 4.0]
        model.params["user_net/layer0/weight"].data[...] = [[0.1, 0.0], [0.0, 0.2], [0.3, 0.0], [0.0, -0.1]]
        model.params["user_net/layer0/bias"].data[...] = [0.5, 0.0]
        g = Graph(model.params)
        pz, _ = model.category_distributions(g, model.entry_embedding(g, 0, 0))
        logits = np.array([0.1 + 0.9 + 0.5, 0.4 - 0.4])
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(pz.data[0], expected, atol=1e-12)


class TestMatchingFactor:
    def test_equal_probabilities_give_tau(self, rng):
        g = Graph()
        p = g.constant([[0.4, 0.6]])
        logits = rng.normal(size=(1, 2, 2, 3))
        tau = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        out = matching_factor(g, p, p, g.constant(logits), sigma=0.7).data
        assert np.allclose(out[0, 0, 0], tau[0, 0, 0], atol=1e-15)
        assert np.allclose(out[0, 1, 1], tau[0, 1, 1], atol=1e-15)

    def test_large_sigma_limit(self, rng):
        g = Graph()
        logits = rng.normal(size=(2, 3, 3, 4))
        tau = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        pz = g.constant(rng.dirichlet(np.ones(3), size=2))
        py = g.constant(rng.dirichlet(np.ones(3), size=2))
        assert np.allclose(matching_factor(g, pz, py, g.constant(logits), 1e9).data, tau, atol=1e-8)

    def test_scalar_example(self):
        g = Graph()
        out = matching_factor(g, g.constant([[0.3]]), g.constant([[0.8]]), g.constant(np.zeros((1, 1, 1, 5))), 0.5)
        assert out.data[0, 0, 0, 0] == pytest.approx(0.2 * math.exp(-1.0), rel=1e-12)
        assert np.all((out.data > 0) & (out.data <= 1))

    def test_monotone_in_gap(self):
        g = Graph()
        logits = g.constant(np.zeros((1, 1, 1, 2)))
        values = [matching_factor(g, g.constant([[0.5]]), g.constant([[0.5 + d]]), logits, 0.3).data[0, 0, 0, 0]
                  for d in (0.0, 0.1, 0.2, 0.4)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_sigma_must_be_positive(self):
        g = Graph()
        p = g.constant([[1.0]])
        with pytest.raises(ConfigError):
            matching_factor(g, p, p, g.constant(np.zeros((1, 1, 1, 2))), 0.0)


class TestPreference:
    def test_matches_triple_sum(self, model):
        g = Graph(model.params)
        entry = model.entry_embedding(g, 2, 1)
        pz, py = model.category_distributions(g, entry)
        pf = model.feature_mixture(g, entry)
        want = brute_force_preference(pf.data, pz.data, py.data, model.params[TAU_LOGITS].data, model.hyper.sigma)
        got = model.preference_distribution(g, 2, 1).data
        assert got.shape == (5,)
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_random_draws_match_triple_sum(self):
        assert mixture_suite(seed=3, draws=10).passed

    def test_degenerate_cardinalities_give_tau_slice(self, rng):
        hyper = HyperParams(k=2, num_features=1, num_categories=1, num_ratings=4, sigma=1.0)
        model = SemanticRecommender.create(hyper, 2, 2, seed=1)
        logits = model.params[TAU_LOGITS].data[0, 0, 0]
        tau = np.exp(logits) / np.exp(logits).sum()
        g = Graph(model.params)
        assert np.allclose(model.preference_distribution(g, 1, 0).data, tau, atol=1e-15)


class TestExpectedRating:
    def test_constant_preference(self):
        g = Graph()
        r = expected_rating(g, g.constant(np.full(5, 0.37)), g.constant(1.3), g.constant(-2.0))
        assert r.item() == pytest.approx(3.0, abs=1e-12)

    def test_zero_temperature(self):
        g = Graph()
        r = expected_rating(g, g.constant([0.1, 0.5, 0.2, 0.1, 0.1]), g.constant(0.0), g.constant(4.0))
        assert r.item() == pytest.approx(3.0, abs=1e-12)

    def test_two_level_example(self):
        g = Graph()
        r = expected_rating(g, g.constant([0.2, 0.8]), g.constant(2.0), g.constant(2.0))
        assert r.item() == pytest.approx(1.91683, abs=1e-5)

    def test_shift_invariance_and_bounds(self, rng):
        g = Graph()
        p = rng.uniform(size=(50, 5))
        om_u, om_v = g.constant(rng.normal(size=50)), g.constant(rng.normal(size=50))
        r = expected_rating(g, g.constant(p), om_u, om_v).data
        shifted = expected_rating(g, g.constant(p + 3.0), om_u, om_v).data
        assert np.allclose(r, shifted, atol=1e-9)
        assert np.all((r >= 1.0 - 1e-12) & (r <= 5.0 + 1e-12))

    def test_needs_two_levels(self):
        g = Graph()
        with pytest.raises(ContractError):
            expected_rating(g, g.constant([1.0]), g.constant(1.0), g.constant(1.0))


class TestDiversityGate:
    def banded(self, model):
        return model.hyper.model_copy(update={"diversity_lower": 2.5, "diversity_upper": 4.0})

    def test_outside_band_is_identity(self, model):
        g = Graph(model.params)
        r = g.constant(4.0 + 0.1)
        out = diversity_adjust(g, r, g.constant(np.full(5, 0.2)), 1, self.banded(model))
        assert out.item() == 4.1

    def test_zero_network_inside_band(self, model):
        zero_network(model, DIVERSITY_NET)
        g = Graph(model.params)
        out = diversity_adjust(g, g.constant(3.3), g.constant(np.full(5, 0.2)), 1, self.banded(model))
        assert out.item() == 3.3

    def test_hand_set_single_layer(self):
        hyper = HyperParams(k=2, num_ratings=3, sigma=1.0, diversity_lower=1.0, diversity_upper=3.0,
                            diversity_hidden=[])
        model = SemanticRecommender.create(hyper, 1, 2)
        model.params[ITEM_DIVERSITY_EMBED].data[1] = [1.0, -2.0]
        model.params[f"{DIVERSITY_NET}/layer0/weight"].data[...] = [[0.5], [0.25], [1.0], [2.0], [-1.0]]
        model.params[f"{DIVERSITY_NET}/layer0/bias"].data[...] = [0.1]
        g = Graph(model.params)
        out = diversity_adjust(g, g.constant(2.0), g.constant([0.2, 0.3, 0.5]), 1, hyper)
        correction = 0.5 * 1.0 + 0.25 * -2.0 + 1.0 * 0.2 + 2.0 * 0.3 - 1.0 * 0.5 + 0.1
        assert out.item() == pytest.approx(2.0 + correction, abs=1e-12)

    def test_unknown_item(self, model):
        g = Graph(model.params)
        with pytest.raises(IndexOutOfRange):
            diversity_adjust(g, g.constant(3.0), g.constant(np.full(5, 0.2)), 7, model.hyper)

    def test_gate_gradient_flows_only_through_correction(self, model):
        hyper = self.banded(model)
        model.hyper = hyper
        g = Graph(model.params)
        r = g.constant(np.array([2.0, 3.0]))
        out = diversity_adjust(g, r, g.constant(np.full((2, 5), 0.2)), np.array([0, 2]), hyper)
        grads = g.backward(g.reduce_sum(out))
        assert np.array_equal(grads[ITEM_DIVERSITY_EMBED][0], [0.0, 0.0])
        assert np.any(grads[ITEM_DIVERSITY_EMBED][2] != 0.0)


class TestPredict:
    def test_disabled_gate_is_expected_rating(self, model):
        model.hyper = model.hyper.model_copy(update={"diversity_lower": 0.0, "diversity_upper": 0.0})
        g = Graph(model.params)
        p_hat = model.preference_distribution(g, 1, 2)
        omega_u = g.constant(model.params[OMEGA_USER].data[1])
        omega_v = g.constant(model.params[OMEGA_ITEM].data[2])
        assert model.predict(1, 2) == pytest.approx(expected_rating(g, p_hat, omega_u, omega_v).item(), abs=1e-14)

    def test_bounded_by_correction_magnitude(self, model):
        weight = model.params[f"{DIVERSITY_NET}/layer1/weight"].data
        bias = model.params[f"{DIVERSITY_NET}/layer1/bias"].data
        delta = np.abs(weight).sum() + np.abs(bias).sum()
        users, items = np.meshgrid(np.arange(3), np.arange(3))
        predictions = model.predict_batch(users.ravel(), items.ravel())
        assert np.all((predictions >= 1 - delta) & (predictions <= 5 + delta))

    def test_batch_matches_scalar_and_is_deterministic(self, model):
        users, items = np.array([0, 1, 2, 2]), np.array([1, 1, 0, 2])
        batch = model.predict_batch(users, items)
        assert np.allclose(batch, [model.predict(u, t) for u, t in zip(users, items)], atol=1e-12)
        assert np.array_equal(batch, model.predict_batch(users, items))

    def test_mismatched_id_shapes(self, model):
        with pytest.raises(ContractError):
            model.predict_batch(np.array([0, 1]), np.array([0]))


class TestLoss:
    def test_perfect_fit_and_half_error(self, model):
        model.hyper = model.hyper.model_copy(update={"diversity_lower": 0.0, "diversity_upper": 0.0})
        users, items = np.array([0, 1, 2]), np.array([2, 0, 1])
        predictions = model.predict_batch(users, items)
        assert model.loss_batch(Graph(model.params), users, items, predictions).item() == pytest.approx(0.0, abs=1e-24)
        shifted = predictions[:1] + (0.5 if predictions[0] <= 4.5 else -0.5)
        assert model.loss_batch(Graph(model.params), users[:1], items[:1], shifted).item() == pytest.approx(0.25)

    def test_contract_errors(self, model):
        with pytest.raises(ContractError):
            model.loss_batch(Graph(model.params), [], [], [])
        with pytest.raises(ContractError):
            model.loss_batch(Graph(model.params), [0], [0], [6.0])

    def test_gradient_matches_differences(self):
        model, users, items, ratings = tiny_recommender(seed=2)
        rng = np.random.default_rng(2)

        def loss(g):
            return model.loss_batch(g, users, items, ratings)

        for name, tensor in model.params.items():
            coords = [tuple(rng.integers(0, s) for s in tensor.shape) for _ in range(5)]
            assert finite_diff_check(loss, model.params, name, coords=coords) < 1e-4, name
