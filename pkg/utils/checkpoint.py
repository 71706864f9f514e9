"""
Checkpoint - save and load a trained recommender as one JSON document.

Floats are written by the json module (shortest repr), so a load reproduces
every parameter bit for bit.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from pydantic import ValidationError

from core.autodiff import Tensor
from core.errors import CheckpointError
from core.models import Checkpoint, ParamBlob, Vocab
from core.recommender import SemanticRecommender, param_shapes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_checkpoint(model: SemanticRecommender, vocab: Vocab) -> Checkpoint:
    params = {
        name: ParamBlob(shape=list(t.shape), data=[float(x) for x in t.data.reshape(-1)])
        for name, t in sorted(model.params.items())
    }
    return Checkpoint(hyper=model.hyper, params=params, vocab=vocab)


def save_checkpoint(model: SemanticRecommender, vocab: Vocab, path: PathLike) -> str:
    """
    Write the checkpoint and return its sha256 digest.

    Args:
        model: trained recommender
        vocab: raw user/item ids in index order
        path: output file, parent directories are created
    """
    path = Path(path)
    if path.parent and not path.parent.exists():
        os.makedirs(path.parent, exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_checkpoint(model, vocab).model_dump(), f, indent=1)
    digest = checkpoint_digest(path)
    logger.info("Saved checkpoint %s (sha256 %s)", path, digest[:12])
    return digest


def checkpoint_digest(path: PathLike) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_checkpoint(path: PathLike) -> Tuple[SemanticRecommender, Vocab]:
    """
    Read, schema-check and shape-check a checkpoint.

    Raises:
        CheckpointError: unreadable JSON, schema violation, or any parameter
            missing, unexpected, or shaped differently from what the stored
            hyper-parameters and vocabulary imply
    """
    try:
        with open(path, "r") as f:
            data = json.load(f)
        checkpoint = Checkpoint.model_validate(data)
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except ValidationError as e:
        raise CheckpointError(f"invalid checkpoint {path}: {e}") from e

    num_users, num_items = len(checkpoint.vocab.users), len(checkpoint.vocab.items)
    expected = param_shapes(checkpoint.hyper, num_users, num_items)
    missing = sorted(set(expected) - set(checkpoint.params))
    unexpected = sorted(set(checkpoint.params) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint parameters do not match hyper: missing {missing}, unexpected {unexpected}")

    params = {}
    for name, shape in expected.items():
        blob = checkpoint.params[name]
        if tuple(blob.shape) != tuple(shape):
            raise CheckpointError(f"parameter '{name}' has shape {tuple(blob.shape)}, hyper implies {tuple(shape)}")
        if len(blob.data) != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"parameter '{name}' holds {len(blob.data)} values for shape {tuple(shape)}")
        params[name] = Tensor(np.asarray(blob.data, dtype=np.float64).reshape(shape), requires_grad=True)

    model = SemanticRecommender(checkpoint.hyper, params, num_users, num_items)
    logger.info("Loaded checkpoint %s (%d users, %d items)", path, num_users, num_items)
    return model, checkpoint.vocab
