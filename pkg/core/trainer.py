"""
Trainer - mini-batch Adam training, evaluation metrics and baselines.

Training is deterministic given (seed, data, config): the epoch shuffle comes
from one seeded generator and, in the data-parallel mode, shard gradients are
merged by summation in shard order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from core.autodiff import Graph, Tensor, clone_parameters
from core.data_ingest import RatingsDataset
from core.errors import ContractError
from core.models import AdamConfig, EpochRecord, EvaluationMetrics
from core.recommender import SemanticRecommender

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moment buffers keyed by parameter id."""
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState, config: AdamConfig) -> None:
    """
    One bias-corrected Adam update, in place on `params` and `state`.

    Args:
        params: parameter id -> Tensor
        grads: gradient for every parameter with requires_grad
        state: moment buffers, created lazily
        config: learning rate, betas, epsilon
    """
    for name, tensor in params.items():
        if not tensor.requires_grad:
            continue
        if name not in grads:
            raise ContractError(f"missing gradient for parameter '{name}'")
        if grads[name].shape != tensor.shape:
            raise ContractError(f"gradient for '{name}' has shape {grads[name].shape}, parameter has {tensor.shape}")

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        if not tensor.requires_grad:
            continue
        g = grads[name]
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(tensor.data)
            state.second_moment[name] = np.zeros_like(tensor.data)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= config.lr * (m / bias1) / (np.sqrt(v / bias2) + config.eps)


class AdamOptimizer:
    """Adam bound to one config and one state."""

    def __init__(self, config: Optional[AdamConfig] = None):
        self.config = config or AdamConfig()
        self.state = OptimizerState()

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
        adam_step(params, grads, self.state, self.config)


def _shard_gradient(model: SemanticRecommender, users, items, ratings):
    params = clone_parameters(model.params)
    shadow = SemanticRecommender(model.hyper, params, model.num_users, model.num_items)
    g = Graph(params)
    loss = shadow.loss_batch(g, users, items, ratings)
    return loss.item(), g.backward(loss)


def batch_gradient(
    model: SemanticRecommender,
    users: np.ndarray,
    items: np.ndarray,
    ratings: np.ndarray,
    workers: int = 1,
    pool: Optional[ThreadPoolExecutor] = None,
):
    """
    Loss and gradient of one mini-batch.

    With workers > 1 the batch is cut into contiguous shards evaluated on cloned
    parameters; the mean-loss gradient is the size-weighted sum of shard
    gradients, merged in shard order.
    """
    if workers <= 1 or len(ratings) < 2:
        g = Graph(model.params)
        loss = model.loss_batch(g, users, items, ratings)
        return loss.item(), g.backward(loss)

    bounds = np.array_split(np.arange(len(ratings)), min(workers, len(ratings)))
    jobs = [(users[b], items[b], ratings[b]) for b in bounds]
    if pool is not None:
        results = list(pool.map(lambda job: _shard_gradient(model, *job), jobs))
    else:
        results = [_shard_gradient(model, *job) for job in jobs]

    total = len(ratings)
    loss = 0.0
    merged: Dict[str, np.ndarray] = {}
    for b, (shard_loss, shard_grads) in zip(bounds, results):
        weight = len(b) / total
        loss += weight * shard_loss
        for name, grad in shard_grads.items():
            merged[name] = merged[name] + weight * grad if name in merged else weight * grad
    for name, tensor in model.params.items():
        if tensor.requires_grad:
            tensor.grad = merged[name]
    return loss, merged


@dataclass
class TrainingResult:
    model: SemanticRecommender
    epoch_log: List[EpochRecord]
    optimizer_state: OptimizerState


def train(
    model: SemanticRecommender,
    train_ds: RatingsDataset,
    optimizer: AdamConfig,
    epochs: int,
    seed: int,
    batch_size: int = 128,
    val_ds: Optional[RatingsDataset] = None,
    workers: int = 1,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainingResult:
    """
    Seeded mini-batch Adam on the MSE of diversity-adjusted predictions.

    Returns:
        the (in-place) trained model, one EpochRecord per epoch and the optimizer state
    """
    if len(train_ds) == 0:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(seed)
    state = OptimizerState()
    log: List[EpochRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(train_ds))
            total = 0.0
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                loss, grads = batch_gradient(
                    model, train_ds.users[idx], train_ds.items[idx], train_ds.ratings[idx], workers, pool
                )
                adam_step(model.params, grads, state, optimizer)
                total += loss * len(idx)
            record = EpochRecord(epoch=epoch, train_loss=total / len(train_ds))
            if val_ds is not None and len(val_ds):
                metrics = evaluate(model, val_ds)
                record.val_rmse, record.val_mae = metrics.rmse, metrics.mae
            logger.info("epoch %d train_loss=%.6f val_rmse=%s val_mae=%s",
                        record.epoch, record.train_loss, record.val_rmse, record.val_mae)
            log.append(record)
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingResult(model, log, state)


def _metrics(predicted: np.ndarray, observed: np.ndarray) -> EvaluationMetrics:
    err = predicted - observed
    return EvaluationMetrics(
        rmse=float(np.sqrt(np.mean(err * err))),
        mae=float(np.mean(np.abs(err))),
        n=int(observed.size),
    )


def evaluate(model: SemanticRecommender, ds: RatingsDataset, batch_size: int = 4096) -> EvaluationMetrics:
    """RMSE and MAE of `predict` against the observed ratings."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    predicted = np.concatenate([
        model.predict_batch(ds.users[s:s + batch_size], ds.items[s:s + batch_size])
        for s in range(0, len(ds), batch_size)
    ])
    return _metrics(predicted, ds.ratings)


def global_mean_metrics(train_ds: RatingsDataset, test_ds: RatingsDataset) -> EvaluationMetrics:
    """Constant predictor: mean training rating."""
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ContractError("baseline needs nonempty train and test sets")
    return _metrics(np.full(len(test_ds), float(np.mean(train_ds.ratings))), test_ds.ratings)


def user_mean_metrics(train_ds: RatingsDataset, test_ds: RatingsDataset) -> EvaluationMetrics:
    """Per-user training mean, falling back to the global mean for unseen users."""
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ContractError("baseline needs nonempty train and test sets")
    n_users = max(train_ds.num_users, test_ds.num_users)
    sums = np.bincount(train_ds.users, weights=train_ds.ratings, minlength=n_users)
    counts = np.bincount(train_ds.users, minlength=n_users)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), float(np.mean(train_ds.ratings)))
    return _metrics(means[test_ds.users], test_ds.ratings)
