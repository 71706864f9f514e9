"""
Topic-model text classifier - neural -> probabilistic -> neural gradient flow.

  h_i      = LSTM(w_1..w_i)                  (recurrent word encoder)
  P(z|w_i) = softmax(M h_i)                  (input interface)
  P(z|d)   = sum_i P(z|w_i) P(w_i|d)         (factor-graph marginal, output interface)
  y        = softmax(W P(z|d))               (classifier)

P(w|d) is the empirical frequency over token positions (1/L each), a constant
factor table. Documents are batched by length so each batch is one tape.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.autodiff import Graph, Node, Tensor
from core.data_ingest import Corpus, corpus_from_lines
from core.errors import ConfigError, ContractError, DimensionError
from core.factor_graph import DiscreteVariable, Factor, FactorGraph, marginal
from core.layers import glorot_uniform
from core.models import TextClfConfig
from core.trainer import AdamOptimizer

logger = logging.getLogger(__name__)

GATES = ("input", "forget", "output", "cell")
EMBEDDING = "encoder/embedding"
TOPIC_MATRIX = "topics/M"
CLASSIFIER_MATRIX = "classifier/W"


def init_params(vocab_size: int, num_classes: int, config: TextClfConfig, seed: int = 0) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    E, H, K = config.embed_dim, config.hidden_size, config.num_topics
    params = {EMBEDDING: Tensor(glorot_uniform(rng, vocab_size, E), requires_grad=True)}
    for gate in GATES:
        params[f"encoder/{gate}/input_weight"] = Tensor(glorot_uniform(rng, E, H), requires_grad=True)
        params[f"encoder/{gate}/recurrent_weight"] = Tensor(glorot_uniform(rng, H, H), requires_grad=True)
        bias = np.ones(H) if gate == "forget" else np.zeros(H)
        params[f"encoder/{gate}/bias"] = Tensor(bias, requires_grad=True)
    params[TOPIC_MATRIX] = Tensor(glorot_uniform(rng, K, H), requires_grad=True)
    params[CLASSIFIER_MATRIX] = Tensor(glorot_uniform(rng, num_classes, K), requires_grad=True)
    return params


def _as_batch(docs: np.ndarray) -> np.ndarray:
    docs = np.asarray(docs, dtype=np.int64)
    if docs.ndim == 1:
        docs = docs[None, :]
    if docs.ndim != 2 or docs.shape[1] == 0:
        raise ContractError("documents must be nonempty token sequences")
    return docs


def encode_words(g: Graph, docs: np.ndarray) -> List[Node]:
    """
    Run the gated recurrent cell left to right.

    Args:
        docs: (L,) or (B, L) token ids, all documents of one batch share L

    Returns:
        L hidden-state nodes, each (B, H); h_i depends on tokens 1..i only
    """
    docs = _as_batch(docs)
    B, L = docs.shape
    H = g.parameters["encoder/forget/bias"].shape[0]
    table = g.param(EMBEDDING)
    h = g.constant(np.zeros((B, H)))
    c = g.constant(np.zeros((B, H)))

    def gate(name: str, x: Node, h_prev: Node) -> Node:
        pre = g.add(g.matmul(x, g.param(f"encoder/{name}/input_weight")),
                    g.matmul(h_prev, g.param(f"encoder/{name}/recurrent_weight")))
        return g.add(pre, g.param(f"encoder/{name}/bias"))

    hidden = []
    for i in range(L):
        x = g.gather(table, docs[:, i])
        i_gate = g.sigmoid(gate("input", x, h))
        f_gate = g.sigmoid(gate("forget", x, h))
        o_gate = g.sigmoid(gate("output", x, h))
        candidate = g.tanh(gate("cell", x, h))
        c = g.add(g.mul(f_gate, c), g.mul(i_gate, candidate))
        h = g.mul(o_gate, g.tanh(c))
        hidden.append(h)
    return hidden


def word_topic_dist(g: Graph, h: Node, M: Node) -> Node:
    """softmax(M h) over K topics; h is (…, H), M is (K, H)."""
    if M.data.ndim != 2 or M.shape[1] != h.shape[-1]:
        raise DimensionError(f"topic matrix {M.shape} does not match hidden size {h.shape[-1]}")
    return g.softmax(g.matmul(h, g.transpose(M, (1, 0))), axis=-1)


def document_graph(g: Graph, word_topics: Node, weights: Optional[np.ndarray] = None) -> FactorGraph:
    """
    The d - w - z chain for a batch of documents.

    Args:
        word_topics: (B, L, K) rows P(z | w_i) per token position
        weights: optional (B, L) P(w|d); defaults to 1/L per position
    """
    B, L, K = word_topics.shape
    if weights is None:
        weights = np.full((B, L), 1.0 / L)
    p_w_given_d = g.constant(np.asarray(weights, dtype=np.float64).reshape(B, 1, L))
    variables = [DiscreteVariable("document", 1), DiscreteVariable("word", L), DiscreteVariable("topic", K)]
    factors = [
        Factor(("document", "word"), p_w_given_d, distribution_over=("word",)),
        Factor(("word", "topic"), word_topics, distribution_over=("topic",)),
    ]
    return FactorGraph(variables, factors, batch_dims=1)


def doc_topic_dist(g: Graph, word_topics: Node, weights: Optional[np.ndarray] = None) -> Node:
    """P(z|d) = sum_w P(z|w) P(w|d), queried from the chain's topic marginal; (B, K)."""
    if word_topics.data.ndim == 2:
        word_topics = g.reshape(word_topics, (1,) + word_topics.shape)
    return marginal(g, document_graph(g, word_topics, weights), "topic")


def classify(g: Graph, f: Node, W: Node) -> Node:
    """softmax(W f) over classes; f is (…, K), W is (classes, K)."""
    if W.data.ndim != 2 or W.shape[1] != f.shape[-1]:
        raise DimensionError(f"classifier matrix {W.shape} does not match topic count {f.shape[-1]}")
    return g.softmax(g.matmul(f, g.transpose(W, (1, 0))), axis=-1)


class TopicClassifier:
    """Parameters plus the full forward pipeline of the demo graph."""

    def __init__(self, params: Dict[str, Tensor], num_classes: int):
        self.params = params
        self.num_classes = num_classes

    @classmethod
    def create(cls, vocab_size: int, num_classes: int, config: TextClfConfig, seed: int = 0) -> "TopicClassifier":
        return cls(init_params(vocab_size, num_classes, config, seed), num_classes)

    def class_distribution(self, g: Graph, docs: np.ndarray) -> Node:
        hidden = encode_words(g, docs)
        M = g.param(TOPIC_MATRIX)
        word_topics = g.stack([word_topic_dist(g, h, M) for h in hidden], axis=1)
        return classify(g, doc_topic_dist(g, word_topics), g.param(CLASSIFIER_MATRIX))

    def loss(self, g: Graph, docs: np.ndarray, labels: Sequence[int]) -> Node:
        """Mean cross-entropy against the labelled classes."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        probs = self.class_distribution(g, docs)
        onehot = np.zeros((labels.size, self.num_classes))
        onehot[np.arange(labels.size), labels] = 1.0
        picked = g.reduce_sum(g.mul(g.log(probs), g.constant(onehot)), axis=-1)
        return g.scale(g.reduce_sum(picked), -1.0 / labels.size)

    def predict(self, docs: np.ndarray) -> np.ndarray:
        g = Graph(self.params)
        return np.argmax(self.class_distribution(g, docs).data, axis=-1)


def length_batches(lengths: Sequence[int], order: Sequence[int], batch_size: int) -> List[np.ndarray]:
    """Group document indices by length (first-seen length first), chunk each group in `order`."""
    groups: Dict[int, List[int]] = {}
    for i in order:
        groups.setdefault(int(lengths[i]), []).append(int(i))
    batches = []
    for members in groups.values():
        for start in range(0, len(members), batch_size):
            batches.append(np.asarray(members[start:start + batch_size], dtype=np.int64))
    return batches


@dataclass
class DemoResult:
    accuracy: float
    num_train: int
    num_test: int
    degenerate: bool
    epoch_losses: List[float] = field(default_factory=list)


def run_demo(corpus: Corpus, config: TextClfConfig) -> DemoResult:
    """Train on a seeded split of the corpus and report held-out accuracy."""
    if len(corpus) < 2:
        raise ContractError("corpus needs at least two documents")
    degenerate = corpus.num_classes < 2
    if degenerate:
        logger.warning("Corpus has a single class; accuracy is trivially 1.0")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(corpus))
    n_test = max(1, int(np.floor(len(corpus) * config.test_fraction)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    docs = [d for d, _ in corpus.documents]
    labels = np.array([y for _, y in corpus.documents], dtype=np.int64)
    lengths = [len(d) for d in docs]

    model = TopicClassifier.create(len(corpus.vocabulary), max(corpus.num_classes, 1), config, seed=config.seed)
    optimizer = AdamOptimizer(config.optimizer)
    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for batch in length_batches(lengths, order, config.batch_size):
            g = Graph(model.params)
            loss = model.loss(g, np.stack([docs[i] for i in batch]), labels[batch])
            grads = g.backward(loss)
            optimizer.step(model.params, grads)
            total += loss.item() * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
        logger.debug("demo epoch %d loss %.6f", epoch, epoch_losses[-1])

    correct = 0
    for batch in length_batches(lengths, test_idx, config.batch_size):
        predicted = model.predict(np.stack([docs[i] for i in batch]))
        correct += int(np.sum(predicted == labels[batch]))
    accuracy = correct / len(test_idx)
    logger.info("Text classifier demo: held-out accuracy %.4f on %d documents", accuracy, len(test_idx))
    return DemoResult(accuracy, len(train_idx), len(test_idx), degenerate, epoch_losses)


def make_planted_corpus(
    num_docs: int = 200,
    doc_length: int = 8,
    vocab_per_topic: int = 10,
    min_majority: float = 0.75,
    seed: int = 0,
) -> Corpus:
    """
    Two disjoint topic vocabularies; each document draws at least
    `min_majority` of its tokens from one of them and is labelled with that
    majority topic.
    """
    if not 0.5 < min_majority <= 1.0:
        raise ConfigError(f"min_majority must be in (0.5, 1], got {min_majority}")
    rng = np.random.default_rng(seed)
    vocabularies = [[f"alpha{i}" for i in range(vocab_per_topic)], [f"beta{i}" for i in range(vocab_per_topic)]]
    labels = ["alpha", "beta"]
    min_major = max(int(np.ceil(doc_length * min_majority)), doc_length // 2 + 1)
    lines: List[Tuple[str, List[str]]] = []
    for _ in range(num_docs):
        topic = int(rng.integers(2))
        major = int(rng.integers(min_major, doc_length + 1))
        tokens = list(rng.choice(vocabularies[topic], size=major))
        tokens += list(rng.choice(vocabularies[1 - topic], size=doc_length - major))
        rng.shuffle(tokens)
        lines.append((labels[topic], [str(t) for t in tokens]))
    return corpus_from_lines(lines)
