"""Estimator protocol conformance and the parse() front door."""

import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pocketnlu.context import DialogContext
from pocketnlu.parser.estimator import FALLBACK_VERB, ContextualParser
from pocketnlu.trees import exact_match, validate_tree


@pytest.fixture(scope="module")
def fitted(onto, small_corpus):
    parser = ContextualParser(ontology=onto, epochs=30, batch_size=32, seed=3)
    return parser.fit(small_corpus)


def test_get_set_params_round_trip(onto):
    parser = ContextualParser(ontology=onto, epochs=7, lr=1e-3)
    params = parser.get_params()
    assert params["epochs"] == 7 and params["lr"] == 1e-3
    parser.set_params(epochs=9)
    assert parser.epochs == 9


def test_clone_drops_learned_state(fitted):
    fresh = clone(fitted)
    assert not hasattr(fresh, "net_")
    assert fresh.get_params()["epochs"] == fitted.get_params()["epochs"]


def test_unfitted_raises(onto):
    parser = ContextualParser(ontology=onto)
    with pytest.raises(NotFittedError):
        parser.parse("set an alarm")
    with pytest.raises(NotFittedError):
        parser.predict(["set an alarm"])
    with pytest.raises(NotFittedError):
        parser.score([])


def test_fit_without_ontology_raises():
    with pytest.raises(ValueError):
        ContextualParser().fit([])


def test_fit_attaches_state(fitted):
    assert hasattr(fitted, "net_")
    assert len(fitted.loss_history_) == 30
    assert fitted.loss_history_[-1] < fitted.loss_history_[0]


def test_parse_returns_valid_tree(fitted, onto):
    result = fitted.parse("please play some jazz")
    assert result.fallback is None
    assert result.symbols[-1] == "END"
    assert validate_tree(onto, result.tree) is None
    assert result.tokens == ["please", "play", "some", "jazz"]


def test_parse_empty_utterance_falls_back(fitted):
    result = fitted.parse("")
    assert result.tree.verb == FALLBACK_VERB
    assert result.fallback == "empty utterance"
    assert result.tree.children == {}


def test_parse_overlength_falls_back(fitted):
    result = fitted.parse("word " * 60)
    assert result.tree.verb == FALLBACK_VERB
    assert result.fallback is not None


def test_predict_shapes(fitted):
    trees = fitted.predict(["play jazz", ("play rock", DialogContext())])
    assert len(trees) == 2
    for t in trees:
        assert hasattr(t, "verb")


def test_score_on_training_slice(fitted, small_corpus):
    acc = fitted.score(small_corpus[:30])
    # Thirty epochs memorize this slice outright.
    assert acc >= 0.9


def test_score_without_turns_raises(fitted):
    with pytest.raises(ValueError):
        fitted.score([])


def test_trained_parse_matches_gold_somewhere(fitted, onto, small_corpus):
    from pocketnlu.corpus import context_for_turn, iter_training_turns

    hits = total = 0
    for record, index, turn in iter_training_turns(small_corpus[:20]):
        ctx = context_for_turn(record, index)
        result = fitted.parse(turn.utterance, ctx)
        total += 1
        hits += result.fallback is None and exact_match(result.tree, turn.gold_tree)
    assert hits / total >= 0.9
