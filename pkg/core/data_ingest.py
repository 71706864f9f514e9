"""
Data Ingest - parse ML-100k rating files and labelled corpora into immutable datasets.

Vocabularies are built in first-appearance order (pd.factorize), so re-parsing
a file written back by `save_movielens` reproduces identical indices.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import ConfigError, DataValidationError, ParseError, UnknownNameError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
RATING_COLUMNS = ["user", "item", "rating", "timestamp"]


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class RatingsDataset:
    """Observations (user index, item index, rating, timestamp) plus id vocabularies."""
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_vocab: Tuple[str, ...]
    item_vocab: Tuple[str, ...]

    def __post_init__(self):
        for name in ("users", "items", "ratings", "timestamps"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def __len__(self) -> int:
        return int(self.ratings.shape[0])

    @property
    def num_users(self) -> int:
        return len(self.user_vocab)

    @property
    def num_items(self) -> int:
        return len(self.item_vocab)

    def subset(self, indices: np.ndarray) -> "RatingsDataset":
        """Entries at `indices` (in the given order) with the full vocabularies."""
        indices = np.asarray(indices, dtype=np.int64)
        return RatingsDataset(
            users=self.users[indices],
            items=self.items[indices],
            ratings=self.ratings[indices],
            timestamps=self.timestamps[indices],
            user_vocab=self.user_vocab,
            item_vocab=self.item_vocab,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "user": [self.user_vocab[u] for u in self.users],
            "item": [self.item_vocab[t] for t in self.items],
            "rating": self.ratings,
            "timestamp": self.timestamps,
        })

    @classmethod
    def empty(cls) -> "RatingsDataset":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64), (), ())


def _first_undecodable_line(path: PathLike) -> Optional[int]:
    for number, raw in enumerate(Path(path).read_bytes().split(b"\n"), start=1):
        try:
            raw.decode("utf-8")
        except UnicodeDecodeError:
            return number
    return None


def _read_tsv(path: PathLike, num_fields: int) -> pd.DataFrame:
    """
    Read a tab-separated file as strings, one row per physical line.

    Row i of the frame is line i + 1 of the file. Rows with missing fields are
    reported with their line number; rows with extra fields are rejected by
    the parser, whose message names the line.
    """
    try:
        frame = pd.read_csv(
            path,
            sep="\t",
            header=None,
            dtype=str,
            engine="python",
            quoting=csv.QUOTE_NONE,
            skip_blank_lines=False,
            keep_default_na=False,
            na_filter=False,
            encoding="utf-8",
        )
    except UnicodeDecodeError as e:
        raise ParseError(f"{path} is not valid UTF-8 ({e.reason})", line=_first_undecodable_line(path)) from e
    except pd.errors.EmptyDataError:
        return pd.DataFrame({i: pd.Series(dtype=str) for i in range(num_fields)})
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed file {path}: {e}") from e

    if frame.shape[1] != num_fields:
        line = 1
        if frame.shape[1] > num_fields:
            extra = frame.iloc[:, num_fields:].fillna("").astype(str).ne("").any(axis=1)
            line = int(np.argmax(extra.to_numpy())) + 1
            raise ParseError(f"expected {num_fields} tab-separated fields, found more", line=line)
        raise ParseError(f"expected {num_fields} tab-separated fields, found {frame.shape[1]}", line=line)

    frame = frame.fillna("")
    missing = frame.apply(lambda col: col.astype(str).str.strip() == "").any(axis=1).to_numpy()
    if missing.any():
        raise ParseError(f"expected {num_fields} non-empty tab-separated fields", line=int(np.argmax(missing)) + 1)
    return frame


def load_movielens(path: PathLike, num_ratings: int = 5) -> RatingsDataset:
    """
    Parse "user<TAB>item<TAB>rating<TAB>timestamp" lines.

    Args:
        path: ratings file
        num_ratings: ratings must lie in [1, num_ratings]

    Returns:
        RatingsDataset in file order with first-appearance vocabularies
    """
    frame = _read_tsv(path, len(RATING_COLUMNS))
    frame.columns = RATING_COLUMNS
    if frame.empty:
        logger.info("Loaded 0 ratings from %s", path)
        return RatingsDataset.empty()

    ratings = pd.to_numeric(frame["rating"], errors="coerce")
    bad = ratings.isna().to_numpy()
    if bad.any():
        line = int(np.argmax(bad)) + 1
        raise ParseError(f"rating '{frame['rating'].iloc[line - 1]}' is not a number", line=line)

    timestamps = pd.to_numeric(frame["timestamp"], errors="coerce")
    bad = timestamps.isna().to_numpy() | (timestamps.to_numpy() != np.floor(timestamps.to_numpy()))
    if bad.any():
        line = int(np.argmax(bad)) + 1
        raise ParseError(f"timestamp '{frame['timestamp'].iloc[line - 1]}' is not an integer", line=line)

    out_of_range = ((ratings < 1) | (ratings > num_ratings)).to_numpy()
    if out_of_range.any():
        line = int(np.argmax(out_of_range)) + 1
        raise DataValidationError(f"rating {ratings.iloc[line - 1]} outside [1, {num_ratings}]", line=line)

    user_codes, user_vocab = pd.factorize(frame["user"].str.strip(), sort=False)
    item_codes, item_vocab = pd.factorize(frame["item"].str.strip(), sort=False)
    dataset = RatingsDataset(
        users=user_codes.astype(np.int64),
        items=item_codes.astype(np.int64),
        ratings=ratings.to_numpy(dtype=np.float64),
        timestamps=timestamps.to_numpy().astype(np.int64),
        user_vocab=tuple(str(u) for u in user_vocab),
        item_vocab=tuple(str(t) for t in item_vocab),
    )
    logger.info("Loaded %d ratings (%d users, %d items) from %s",
                len(dataset), dataset.num_users, dataset.num_items, path)
    return dataset


def save_movielens(dataset: RatingsDataset, path: PathLike) -> None:
    frame = dataset.to_frame()
    frame["rating"] = [f"{r:g}" for r in frame["rating"]]
    frame.to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE)


def split(dataset: RatingsDataset, test_fraction: float, seed: int) -> Tuple[RatingsDataset, RatingsDataset]:
    """
    Seeded shuffle then partition into (train, test).

    A test candidate whose user or item has no rating left in train is moved
    to train, so |test| <= floor(n * test_fraction). Both parts keep file order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(np.floor(n * test_fraction))
    candidates, train_idx = perm[:n_test], list(perm[n_test:])

    user_count = np.bincount(dataset.users[train_idx], minlength=dataset.num_users) if n else np.zeros(0, int)
    item_count = np.bincount(dataset.items[train_idx], minlength=dataset.num_items) if n else np.zeros(0, int)
    test_idx = []
    for i in candidates:
        u, t = dataset.users[i], dataset.items[i]
        if user_count[u] == 0 or item_count[t] == 0:
            train_idx.append(i)
            user_count[u] += 1
            item_count[t] += 1
        else:
            test_idx.append(i)

    train = dataset.subset(np.sort(np.asarray(train_idx, dtype=np.int64)))
    test = dataset.subset(np.sort(np.asarray(test_idx, dtype=np.int64)))
    realized = len(test) / n if n else 0.0
    logger.info("Split %d ratings: %d train / %d test (realized test fraction %.4f, requested %.4f)",
                n, len(train), len(test), realized, test_fraction)
    return train, test


def reindex(dataset: RatingsDataset, user_vocab: Sequence[str], item_vocab: Sequence[str]) -> RatingsDataset:
    """Re-express a dataset against another vocabulary (e.g. a checkpoint's)."""
    positions = []
    for kind, codes, own, target in (("user", dataset.users, dataset.user_vocab, user_vocab),
                                     ("item", dataset.items, dataset.item_vocab, item_vocab)):
        lookup = {raw: i for i, raw in enumerate(target)}
        unknown = [raw for raw in own if raw not in lookup]
        if unknown:
            raise UnknownNameError(f"unknown {kind} id '{unknown[0]}'")
        mapping = np.array([lookup[raw] for raw in own], dtype=np.int64)
        positions.append(mapping[codes] if codes.size else codes)
    return RatingsDataset(
        users=positions[0],
        items=positions[1],
        ratings=dataset.ratings,
        timestamps=dataset.timestamps,
        user_vocab=tuple(user_vocab),
        item_vocab=tuple(item_vocab),
    )


@dataclass(frozen=True)
class Corpus:
    """Labelled token-id documents for the text classifier demo."""
    documents: Tuple[Tuple[np.ndarray, int], ...]
    vocabulary: Dict[str, int]
    labels: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def num_classes(self) -> int:
        return len(self.labels)


def corpus_from_lines(lines: List[Tuple[str, List[str]]]) -> Corpus:
    """Build vocabularies in first-appearance order from (label, tokens) pairs."""
    vocabulary: Dict[str, int] = {}
    label_codes, labels = pd.factorize(pd.Series([label for label, _ in lines], dtype=str), sort=False)
    documents = []
    for (label, tokens), code in zip(lines, label_codes):
        ids = [vocabulary.setdefault(tok, len(vocabulary)) for tok in tokens]
        documents.append((np.asarray(ids, dtype=np.int64), int(code)))
    return Corpus(tuple(documents), vocabulary, tuple(str(l) for l in labels))


def load_corpus(path: PathLike) -> Corpus:
    """Parse "label<TAB>token token ..." lines (UTF-8)."""
    frame = _read_tsv(path, 2)
    lines = []
    for row, (label, text) in enumerate(zip(frame[0], frame[1]), start=1):
        tokens = str(text).split()
        if not tokens:
            raise ParseError("document has no tokens", line=row)
        lines.append((str(label).strip(), tokens))
    corpus = corpus_from_lines(lines)
    logger.info("Loaded corpus of %d documents, %d token types, %d classes from %s",
                len(corpus), len(corpus.vocabulary), corpus.num_classes, path)
    return corpus
