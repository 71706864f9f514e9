import logging

import numpy as np
import pytest

from core.autodiff import Graph, finite_diff_check
from core.data_ingest import corpus_from_lines
from core.errors import ConfigError, ContractError, DimensionError
from core.factor_graph import brute_force_marginal
from core.models import TextClfConfig
from core.textclf import (
    EMBEDDING,
    TopicClassifier,
    classify,
    doc_topic_dist,
    document_graph,
    encode_words,
    length_batches,
    make_planted_corpus,
    run_demo,
    word_topic_dist,
)

SMALL = TextClfConfig(embed_dim=3, hidden_size=4, num_topics=2, epochs=2, batch_size=4)


@pytest.fixture
def classifier():
    return TopicClassifier.create(vocab_size=6, num_classes=2, config=SMALL, seed=3)


class TestEncoder:
    def test_zero_weights_give_zero_states(self, classifier):
        for tensor in classifier.params.values():
            tensor.data[...] = 0.0
        g = Graph(classifier.params)
        for h in encode_words(g, np.array([1, 2, 3])):
            assert np.array_equal(h.data, np.zeros((1, 4)))

    def test_causal(self, classifier):
        g = Graph(classifier.params)
        first = encode_words(g, np.array([[1, 2, 3], [1, 5, 0]]))
        assert np.allclose(first[0].data[0], first[0].data[1], atol=1e-15, rtol=0)
        assert not np.allclose(first[2].data[0], first[2].data[1])

    def test_empty_document(self, classifier):
        with pytest.raises(ContractError):
            encode_words(Graph(classifier.params), np.array([], dtype=np.int64))

    def test_forget_bias_starts_at_one(self, classifier):
        assert np.array_equal(classifier.params["encoder/forget/bias"].data, np.ones(4))
        assert np.array_equal(classifier.params["encoder/input/bias"].data, np.zeros(4))

    def test_five_step_gradient(self, classifier, rng):
        weights = rng.normal(size=(1, 4))

        def loss(g):
            return g.reduce_sum(g.mul(encode_words(g, np.array([0, 3, 1, 4, 3]))[-1], g.constant(weights)))

        for name in (EMBEDDING, "encoder/forget/recurrent_weight", "encoder/cell/input_weight", "encoder/output/bias"):
            assert finite_diff_check(loss, classifier.params, name) < 1e-4, name


class TestInterfaces:
    def test_zero_topic_matrix_is_uniform(self):
        g = Graph()
        out = word_topic_dist(g, g.constant([0.3, -1.0]), g.constant(np.zeros((3, 2))))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_hand_set_topic_matrix(self):
        g = Graph()
        M = np.array([[0.5, -1.0], [2.0, 0.3]])
        out = word_topic_dist(g, g.constant([1.0, 0.0]), g.constant(M)).data
        expected = np.exp(M[:, 0]) / np.exp(M[:, 0]).sum()
        assert np.allclose(out, expected, atol=1e-15)

    def test_topic_matrix_shape_checked(self):
        g = Graph()
        with pytest.raises(DimensionError):
            word_topic_dist(g, g.constant([1.0, 0.0]), g.constant(np.zeros((2, 3))))

    def test_single_token_document(self):
        g = Graph()
        assert np.allclose(doc_topic_dist(g, g.constant([[0.2, 0.8]])).data, [[0.2, 0.8]], atol=1e-15)

    def test_two_token_enumeration(self):
        g = Graph()
        assert np.allclose(doc_topic_dist(g, g.constant([[1.0, 0.0], [0.0, 1.0]])).data, [[0.5, 0.5]])

    def test_permutation_invariant_and_matches_enumeration(self, rng):
        g = Graph()
        table = rng.dirichlet(np.ones(3), size=(2, 5))
        forward = doc_topic_dist(g, g.constant(table)).data
        backward = doc_topic_dist(g, g.constant(table[:, ::-1])).data
        assert np.allclose(forward, backward, atol=1e-15)
        enumerated = brute_force_marginal(document_graph(g, g.constant(table)), "topic")
        assert np.max(np.abs(forward - enumerated)) <= 1e-10
        assert np.allclose(forward.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_classifier_is_uniform(self):
        g = Graph()
        out = classify(g, g.constant([0.3, 0.7]), g.constant(np.zeros((4, 2))))
        assert np.allclose(out.data, 0.25)

    def test_classifier_shape_checked(self):
        g = Graph()
        with pytest.raises(DimensionError):
            classify(g, g.constant([0.3, 0.7]), g.constant(np.zeros((4, 3))))


class TestPipeline:
    def test_class_distribution_is_stochastic(self, classifier):
        probs = classifier.class_distribution(Graph(classifier.params), np.array([[1, 2, 3], [4, 4, 0]])).data
        assert probs.shape == (2, 2)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_loss_gradient_reaches_every_part(self, classifier):
        docs, labels = np.array([[1, 2, 3]]), [1]

        def loss(g):
            return classifier.loss(g, docs, labels)

        g = Graph(classifier.params)
        grads = g.backward(loss(g))
        assert np.any(grads["encoder/input/input_weight"] != 0.0)
        assert np.any(grads[EMBEDDING][1:4] != 0.0)
        assert np.array_equal(grads[EMBEDDING][4:], np.zeros((2, 3)))
        for name in classifier.params:
            assert finite_diff_check(loss, classifier.params, name) < 1e-4, name

    def test_loss_matches_hand_cross_entropy(self, classifier):
        docs = np.array([[1, 2], [3, 0]])
        labels = np.array([0, 1])
        g = Graph(classifier.params)
        probs = classifier.class_distribution(g, docs).data
        expected = -np.mean(np.log(probs[np.arange(2), labels]))
        assert classifier.loss(Graph(classifier.params), docs, labels).item() == pytest.approx(expected, rel=1e-12)


def test_length_batches_group_by_length():
    lengths = [3, 2, 3, 3, 2]
    batches = length_batches(lengths, [4, 0, 1, 2, 3], batch_size=2)
    assert [b.tolist() for b in batches] == [[4, 1], [0, 2], [3]]


def test_planted_corpus_labels_follow_majority():
    corpus = make_planted_corpus(num_docs=40, seed=5)
    assert len(corpus) == 40
    assert corpus.num_classes == 2
    names = {i: tok for tok, i in corpus.vocabulary.items()}
    for ids, label in corpus.documents:
        tokens = [names[i] for i in ids]
        majority = max(("alpha", "beta"), key=lambda p: sum(t.startswith(p) for t in tokens))
        assert corpus.labels[label] == majority
        assert sum(t.startswith(corpus.labels[label]) for t in tokens) >= 6


def test_planted_corpus_majority_is_validated():
    with pytest.raises(ConfigError):
        make_planted_corpus(num_docs=4, min_majority=0.5)


def test_single_class_corpus_is_flagged(caplog):
    corpus = corpus_from_lines([("only", ["a", "b"]), ("only", ["b", "c"]), ("only", ["c"]), ("only", ["a"])])
    with caplog.at_level(logging.WARNING, logger="core.textclf"):
        result = run_demo(corpus, SMALL)
    assert result.degenerate
    assert result.accuracy == 1.0
    assert "single class" in caplog.text


def test_demo_is_deterministic():
    corpus = make_planted_corpus(num_docs=30, seed=2)
    first, second = run_demo(corpus, SMALL), run_demo(corpus, SMALL)
    assert first.epoch_losses == second.epoch_losses
    assert first.accuracy == second.accuracy


@pytest.mark.slow
def test_planted_corpus_is_learned():
    result = run_demo(make_planted_corpus(num_docs=200, seed=0), TextClfConfig())
    assert result.accuracy >= 0.9
