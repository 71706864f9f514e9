import math

import numpy as np
import pytest

from core.autodiff import Graph, Tensor
from core.data_ingest import RatingsDataset, split
from core.errors import ConfigError, ContractError
from core.experiments import category_levels, make_planted_ratings, run_planted_experiment
from core.models import AdamConfig, HyperParams
from core.recommender import SemanticRecommender
from core.trainer import (
    AdamOptimizer,
    OptimizerState,
    adam_step,
    batch_gradient,
    evaluate,
    global_mean_metrics,
    train,
    user_mean_metrics,
)


def dataset(users, items, ratings, num_users=None, num_items=None):
    num_users = num_users or max(users) + 1
    num_items = num_items or max(items) + 1
    return RatingsDataset(
        users=np.asarray(users), items=np.asarray(items), ratings=np.asarray(ratings, dtype=float),
        timestamps=np.zeros(len(users), dtype=np.int64),
        user_vocab=tuple(f"u{i}" for i in range(num_users)), item_vocab=tuple(f"i{i}" for i in range(num_items)),
    )


def grid(seed=0, num_users=6, num_items=5, n=24):
    rng = np.random.default_rng(seed)
    flat = rng.choice(num_users * num_items, size=n, replace=False)
    users, items = np.divmod(flat, num_items)
    return dataset(users, items, rng.integers(1, 6, size=n), num_users, num_items)


class FixedModel:
    """Predicts a preset vector, whatever ids it is asked about."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def predict_batch(self, users, items):
        return self.values[: len(users)]


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": Tensor([1.0, -2.0], requires_grad=True)}
        state = OptimizerState()
        adam_step(params, {"w": np.zeros(2)}, state, AdamConfig())
        assert np.array_equal(params["w"].data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_is_lr_times_sign(self):
        params = {"w": Tensor([1.0, 1.0, 1.0], requires_grad=True)}
        adam_step(params, {"w": np.array([0.5, -3.0, 1e-2])}, OptimizerState(), AdamConfig(lr=0.1))
        assert np.allclose(params["w"].data, [0.9, 1.1, 0.9], atol=1e-6)

    def test_zero_learning_rate(self, rng):
        params = {"w": Tensor(rng.normal(size=(2, 3)), requires_grad=True)}
        before = params["w"].data.copy()
        optimizer = AdamOptimizer(AdamConfig(lr=0.0))
        for _ in range(3):
            optimizer.step(params, {"w": rng.normal(size=(2, 3))})
        assert np.array_equal(params["w"].data, before)
        assert optimizer.state.step == 3

    def test_contract_violations(self):
        params = {"w": Tensor([1.0, 2.0], requires_grad=True), "frozen": Tensor([0.0])}
        with pytest.raises(ContractError, match="shape"):
            adam_step(params, {"w": np.zeros(3)}, OptimizerState(), AdamConfig())
        with pytest.raises(ContractError, match="missing"):
            adam_step(params, {}, OptimizerState(), AdamConfig())

    def test_frozen_parameters_are_skipped(self):
        params = {"w": Tensor([1.0], requires_grad=True), "frozen": Tensor([4.0])}
        adam_step(params, {"w": np.array([1.0])}, OptimizerState(), AdamConfig())
        assert params["frozen"].data[0] == 4.0

    def test_minimizes_a_quadratic(self):
        params = {"x": Tensor([3.0, -2.0], requires_grad=True)}
        optimizer = AdamOptimizer(AdamConfig(lr=0.05))
        for _ in range(500):
            g = Graph(params)
            x = g.param("x")
            optimizer.step(params, g.backward(g.reduce_sum(g.mul(x, x))))
        assert np.all(np.abs(params["x"].data) < 0.1)


class TestTrain:
    def test_epoch_log_and_loss_decrease(self, tiny_hyper):
        ds = grid()
        model = SemanticRecommender.create(tiny_hyper, ds.num_users, ds.num_items, seed=0)
        seen = []
        result = train(model, ds, AdamConfig(lr=0.02), epochs=12, seed=0, batch_size=8, on_epoch=seen.append)
        assert [r.epoch for r in result.epoch_log] == list(range(1, 13))
        assert seen == result.epoch_log
        assert result.epoch_log[-1].train_loss < result.epoch_log[0].train_loss
        assert result.optimizer_state.step == 12 * 3

    def test_bit_identical_reruns(self, tiny_hyper):
        ds = grid(seed=3)
        runs = []
        for _ in range(2):
            model = SemanticRecommender.create(tiny_hyper, ds.num_users, ds.num_items, seed=5)
            result = train(model, ds, AdamConfig(lr=0.01), epochs=5, seed=9, batch_size=7)
            runs.append((result.epoch_log, {k: t.data.copy() for k, t in model.params.items()}))
        assert runs[0][0] == runs[1][0]
        for name, data in runs[0][1].items():
            assert np.array_equal(data, runs[1][1][name]), name

    def test_validation_metrics_are_logged(self, tiny_hyper):
        train_ds, val_ds = split(grid(n=30), 0.2, seed=0)
        model = SemanticRecommender.create(tiny_hyper, train_ds.num_users, train_ds.num_items, seed=0)
        log = train(model, train_ds, AdamConfig(), epochs=2, seed=0, batch_size=8, val_ds=val_ds).epoch_log
        assert all(r.val_rmse is not None and r.val_rmse >= r.val_mae for r in log)

    def test_empty_training_set(self, tiny_hyper):
        model = SemanticRecommender.create(tiny_hyper, 2, 2)
        with pytest.raises(ContractError):
            train(model, RatingsDataset.empty(), AdamConfig(), epochs=1, seed=0)

    def test_sharded_gradient_matches_single(self, tiny_hyper):
        ds = grid(n=20)
        model = SemanticRecommender.create(tiny_hyper, ds.num_users, ds.num_items, seed=2)
        loss_one, single = batch_gradient(model, ds.users, ds.items, ds.ratings, workers=1)
        single = {k: v.copy() for k, v in single.items()}
        loss_three, sharded = batch_gradient(model, ds.users, ds.items, ds.ratings, workers=3)
        assert loss_three == pytest.approx(loss_one, abs=1e-12)
        for name, grad in single.items():
            assert np.allclose(sharded[name], grad, atol=1e-12, rtol=0), name

    def test_thread_pool_training_matches_serial(self, tiny_hyper):
        ds = grid(n=20)
        logs = []
        for workers in (1, 2):
            model = SemanticRecommender.create(tiny_hyper, ds.num_users, ds.num_items, seed=4)
            logs.append(train(model, ds, AdamConfig(lr=0.01), epochs=2, seed=1, batch_size=10,
                              workers=workers).epoch_log)
        for serial, parallel in zip(*logs):
            assert parallel.train_loss == pytest.approx(serial.train_loss, abs=1e-9)


class TestEvaluate:
    def test_perfect_predictions(self):
        ds = dataset([0, 1, 2], [0, 0, 1], [1.0, 4.0, 5.0])
        metrics = evaluate(FixedModel(ds.ratings), ds)
        assert (metrics.rmse, metrics.mae, metrics.n) == (0.0, 0.0, 3)

    def test_constant_three(self):
        ds = dataset([0, 1], [0, 1], [1.0, 5.0])
        metrics = evaluate(FixedModel([3.0, 3.0]), ds)
        assert metrics.rmse == pytest.approx(2.0)
        assert metrics.mae == pytest.approx(2.0)

    def test_rmse_at_least_mae(self, rng):
        ds = grid()
        metrics = evaluate(FixedModel(rng.uniform(1, 5, size=len(ds))), ds)
        assert metrics.rmse >= metrics.mae

    def test_empty(self):
        with pytest.raises(ContractError):
            evaluate(FixedModel([]), RatingsDataset.empty())


class TestBaselines:
    def test_global_mean(self):
        train_ds = dataset([0, 0, 1], [0, 1, 0], [1.0, 3.0, 5.0])
        test_ds = dataset([0, 1], [2, 1], [2.0, 5.0], num_users=2, num_items=3)
        metrics = global_mean_metrics(train_ds, test_ds)
        assert metrics.rmse == pytest.approx(math.sqrt(2.5))
        assert metrics.mae == pytest.approx(1.5)

    def test_user_mean_with_unseen_user(self):
        train_ds = dataset([0, 0, 1], [0, 1, 0], [1.0, 3.0, 5.0], num_users=3)
        test_ds = dataset([0, 1, 2], [2, 1, 1], [2.0, 5.0, 3.0], num_users=3, num_items=3)
        metrics = user_mean_metrics(train_ds, test_ds)
        assert metrics.rmse == pytest.approx(0.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            global_mean_metrics(RatingsDataset.empty(), grid())


class TestPlanted:
    def test_ratings_cover_the_scale(self, tiny_hyper):
        ds, truth = make_planted_ratings(tiny_hyper, num_ratings=150, num_users=15, num_items=15, seed=1)
        assert len(ds) == 150
        assert len(set(zip(ds.users.tolist(), ds.items.tolist()))) == 150
        assert ds.ratings.min() >= 1.0 and ds.ratings.max() <= 5.0
        assert not truth.hyper.diversity_active

    def test_too_many_pairs(self, tiny_hyper):
        with pytest.raises(ConfigError):
            make_planted_ratings(tiny_hyper, num_ratings=10, num_users=3, num_items=3)

    def test_training_reduces_loss(self, tiny_hyper):
        hyper = tiny_hyper.model_copy(update={"diversity_lower": 0.0, "diversity_upper": 0.0})
        ds, _ = make_planted_ratings(hyper, num_ratings=120, num_users=12, num_items=12, seed=2)
        model = SemanticRecommender.create(hyper, ds.num_users, ds.num_items, seed=0)
        log = train(model, ds, AdamConfig(lr=0.02), epochs=15, seed=0, batch_size=16).epoch_log
        assert log[-1].train_loss < log[0].train_loss

    def test_category_levels_span_the_scale(self):
        assert category_levels(4, 5).tolist() == [0, 1, 3, 4]
        assert category_levels(2, 5).tolist() == [0, 4]
        assert category_levels(1, 5).tolist() == [0]

    def test_default_ratings_are_spread(self):
        ds, _ = make_planted_ratings(HyperParams(sigma=1.0), seed=0)
        levels = np.unique(np.round(ds.ratings))
        assert len(levels) >= 3
        assert ds.ratings.std() > 0.5


@pytest.mark.slow
def test_planted_model_is_learned_back():
    report = run_planted_experiment(HyperParams(sigma=1.0))
    assert report.num_ratings == 2000
    assert report.passed, f"ratio {report.ratio:.3f}"
