"""
Planted-model experiment: ratings drawn from a ground-truth instance of the
recommender itself, then learned back from scratch.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from core.data_ingest import RatingsDataset, split
from core.errors import ConfigError
from core.models import AdamConfig, HyperParams, PlantedReport
from core.recommender import (
    ITEM_DIVERSITY_EMBED,
    ITEM_EMBED,
    ITEM_NET,
    OMEGA_ITEM,
    OMEGA_USER,
    TAU_LOGITS,
    USER_EMBED,
    SemanticRecommender,
)
from core.trainer import evaluate, global_mean_metrics, train

logger = logging.getLogger(__name__)

PLANTED_THRESHOLD = 0.7
PLANTED_LR = 0.01
# tau logit of the level an item category points at; the rest stay at 0
SHARP_LOGIT = 8.0
ITEM_LOGIT_SCALE = 4.0


def category_levels(num_categories: int, num_ratings: int) -> np.ndarray:
    """Rating level (0-based) each item category points at, spread over 1..|R|."""
    return np.round(np.linspace(1, num_ratings, num_categories)).astype(np.int64) - 1


def planted_truth(hyper: HyperParams, num_users: int, num_items: int, seed: int) -> SemanticRecommender:
    """
    Ground-truth model whose rating is set by the item's category.

    Every item category points at one rating level through a sharp tau, the
    item network ignores the user half of the entry and repeats one category
    table for every feature, and omega in [4, 5] saturates the rating softmax.
    Rounded expected ratings then cover the levels in `category_levels`.
    The diversity gate is off.
    """
    hyper = hyper.model_copy(update={"diversity_lower": 0.0, "diversity_upper": 0.0})
    model = SemanticRecommender.create(hyper, num_users, num_items, seed=seed)
    params = model.params
    rng = np.random.default_rng(seed + 1)
    for name in (USER_EMBED, ITEM_EMBED, ITEM_DIVERSITY_EMBED):
        params[name].data[...] = rng.normal(0.0, 1.0, size=params[name].shape)

    F, C = hyper.num_features, hyper.num_categories
    params[f"{ITEM_NET}/layer0/weight"].data[: hyper.k] = 0.0
    last = len(hyper.item_hidden)
    for part in ("weight", "bias"):
        table = params[f"{ITEM_NET}/layer{last}/{part}"].data
        table[...] = ITEM_LOGIT_SCALE * np.tile(table[..., :C], F)

    tau = np.zeros(params[TAU_LOGITS].shape)
    tau[:, :, np.arange(C), category_levels(C, hyper.num_ratings)] = SHARP_LOGIT
    params[TAU_LOGITS].data[...] = tau
    params[OMEGA_USER].data[...] = rng.uniform(4.0, 5.0, size=num_users)
    params[OMEGA_ITEM].data[...] = rng.uniform(4.0, 5.0, size=num_items)
    return model


def make_planted_ratings(
    hyper: HyperParams,
    num_ratings: int = 2000,
    num_users: int = 100,
    num_items: int = 100,
    noise: float = 0.1,
    seed: int = 0,
) -> Tuple[RatingsDataset, SemanticRecommender]:
    """
    Sample distinct (user, item) pairs and rate them round(E[r]) + N(0, noise²),
    clipped to [1, |R|].

    Returns:
        (dataset, ground-truth model)
    """
    if num_ratings > num_users * num_items:
        raise ConfigError(f"cannot draw {num_ratings} distinct pairs from {num_users} x {num_items}")
    truth = planted_truth(hyper, num_users, num_items, seed)
    rng = np.random.default_rng(seed + 2)
    flat = np.sort(rng.choice(num_users * num_items, size=num_ratings, replace=False))
    users, items = np.divmod(flat, num_items)
    expected = truth.predict_batch(users, items)
    ratings = np.clip(np.round(expected) + rng.normal(0.0, noise, size=num_ratings), 1.0, hyper.num_ratings)
    dataset = RatingsDataset(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=ratings,
        timestamps=np.arange(num_ratings, dtype=np.int64),
        user_vocab=tuple(f"u{i}" for i in range(num_users)),
        item_vocab=tuple(f"i{i}" for i in range(num_items)),
    )
    logger.info("Planted %d ratings, mean %.3f, std %.3f", num_ratings, ratings.mean(), ratings.std())
    return dataset, truth


def run_planted_experiment(
    hyper: HyperParams,
    optimizer: Optional[AdamConfig] = None,
    num_ratings: int = 2000,
    epochs: int = 50,
    batch_size: int = 128,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> PlantedReport:
    """Train a fresh model on planted ratings and compare with the global-mean predictor."""
    dataset, _ = make_planted_ratings(hyper, num_ratings=num_ratings, seed=seed)
    train_ds, test_ds = split(dataset, test_fraction, seed)
    model = SemanticRecommender.create(hyper, dataset.num_users, dataset.num_items, seed=seed)
    train(model, train_ds, optimizer or AdamConfig(lr=PLANTED_LR), epochs, seed, batch_size=batch_size)
    rmse = evaluate(model, test_ds).rmse
    baseline = global_mean_metrics(train_ds, test_ds).rmse
    ratio = rmse / baseline if baseline > 0 else float("inf")
    logger.info("Planted run: rmse %.4f vs global mean %.4f (ratio %.3f)", rmse, baseline, ratio)
    return PlantedReport(
        num_ratings=len(dataset),
        num_train=len(train_ds),
        num_test=len(test_ds),
        epochs=epochs,
        rmse=rmse,
        global_mean_rmse=baseline,
        ratio=ratio,
        passed=ratio <= PLANTED_THRESHOLD,
    )
