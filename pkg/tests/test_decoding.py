"""Constrained decoding: masks, budgets, and the no-garbage guarantee."""

import numpy as np
import pytest

from pocketnlu.codec import assemble, initial_state, step
from pocketnlu.ontology import COPY, END, FLUSH, NEXT, symbol_vocabulary
from pocketnlu.parser.decoding import (
    TruncatedDecodeError,
    decode_greedy,
    legal_mask,
    span_labels,
)
from pocketnlu.parser.network import ModelConfig, ParserNetwork
from pocketnlu.spans import Span
from pocketnlu.trees import validate_tree

SMALL = ModelConfig(
    embed_dim=12, label_dim=4, hidden=16, layers=1, heads=2, ffn=32,
    symbol_dim=8, buckets=64, label_buckets=16,
)


def masked_symbols(state, symbols, **kw):
    return {s for s, ok in zip(symbols, legal_mask(state, symbols, **kw)) if ok}


def test_span_labels_paints_inclusive_range():
    tokens = ["wake", "me", "at", "seven", "tomorrow"]
    spans = [Span(3, 3, "NUM", "seven"), Span(4, 4, "slot:Alarm.date", "tomorrow")]
    assert span_labels(tokens, spans) == ["O", "O", "O", "NUM", "slot:Alarm.date"]


def test_span_labels_clips_out_of_range():
    assert span_labels(["a"], [Span(0, 5, "X", "a")]) == ["X"]


def test_initial_mask_is_verbs_or_next(onto):
    # Before the verb the only moves are placing one or advancing the
    # cursor; with a single token even NEXT drops out.
    state = initial_state(onto, ["set", "an", "alarm"], ())
    legal = masked_symbols(state, symbol_vocabulary(onto))
    assert legal == set(onto.verbs) | {NEXT}
    state = initial_state(onto, ["hm"], ())
    assert masked_symbols(state, symbol_vocabulary(onto)) == set(onto.verbs)


def test_mask_never_lies(onto):
    # Every symbol the mask allows must actually step without error.
    symbols = symbol_vocabulary(onto)
    state = initial_state(onto, ["remind", "me", "to", "call", "mom"], ())
    rng = np.random.default_rng(5)
    for _ in range(40):
        if state.finished:
            break
        legal = [s for s, ok in zip(symbols, legal_mask(state, symbols)) if ok]
        assert legal, "live state with no legal symbol"
        state = step(state, legal[rng.integers(len(legal))])


def test_budget_narrows_to_advancing(onto):
    # END needs the cursor on the last token, so the narrowed set is
    # {NEXT} before it and {END} on it.
    state = initial_state(onto, ["a", "b"], ())
    state = step(state, "Alarm.create")
    state.emitted_at_cursor = 9
    assert masked_symbols(state, symbol_vocabulary(onto), budget=8) == {NEXT}
    state.emitted_at_cursor = 0
    state = step(state, NEXT)
    state.emitted_at_cursor = 9
    assert masked_symbols(state, symbol_vocabulary(onto), budget=8) == {END}


def test_budget_narrowing_requires_an_advancing_move(onto):
    # Mid-path the cursor cannot advance, so the full mask must survive
    # even past budget rather than going empty.
    state = initial_state(onto, ["a"], ())
    state = step(state, "Alarm.create")
    state = step(state, "Alarm.recurrence")
    state.emitted_at_cursor = 99
    legal = masked_symbols(state, symbol_vocabulary(onto), budget=8)
    assert legal == {"DateTime.date", "DateTime.dayOfWeek"}


def test_flush_masked_when_noop(onto):
    state = initial_state(onto, ["send", "it"], ())
    state = step(state, "Message.send")
    assert FLUSH not in masked_symbols(state, symbol_vocabulary(onto))
    state = step(state, COPY)
    state = step(state, NEXT)
    state = step(state, "Message.recipient")
    assert FLUSH in masked_symbols(state, symbol_vocabulary(onto))


def test_copy_masked_when_no_consumer(onto):
    # System.unsupported has only the enum-typed source attribute, so an
    # open copy range could never be consumed.
    state = initial_state(onto, ["what", "is", "this"], ())
    state = step(state, "System.unsupported")
    assert COPY not in masked_symbols(state, symbol_vocabulary(onto))
    state = initial_state(onto, ["send", "hi"], ())
    state = step(state, "Message.send")
    assert COPY in masked_symbols(state, symbol_vocabulary(onto))


def test_untrained_models_always_produce_valid_trees(onto):
    symbols = symbol_vocabulary(onto)
    utterances = [
        "set an alarm for seven".split(),
        "please send a message to mark and eugene".split(),
        "what about the second one".split(),
        ["hm"],
        "book me a flight tomorrow from london to paris right now".split(),
    ]
    for seed in range(12):
        net = ParserNetwork(symbols, SMALL, seed=seed)
        toks = utterances[seed % len(utterances)]
        stream = decode_greedy(net, onto, toks)
        assert stream[-1] == END
        tree = assemble(onto, stream, toks)
        assert validate_tree(onto, tree) is None


def test_decode_uses_span_payloads(onto):
    # A span does not force the decoder anywhere, but the decode must
    # still be well formed when spans are present.
    net = ParserNetwork(symbol_vocabulary(onto), SMALL, seed=41)
    toks = "wake me in paris".split()
    spans = [Span(3, 3, "city", "paris")]
    stream = decode_greedy(net, onto, toks, spans=spans)
    tree = assemble(onto, stream, toks, spans)
    assert validate_tree(onto, tree) is None


def test_forced_advance_completes_within_cap(onto):
    # budget 0 narrows to advancing moves wherever one is legal; the
    # decode must still finish instead of hitting the backstop cap.
    net = ParserNetwork(symbol_vocabulary(onto), SMALL, seed=2)
    toks = ["one", "two", "three"]
    stream = decode_greedy(net, onto, toks, budget=0)
    assert stream[-1] == END
    assert validate_tree(onto, assemble(onto, stream, toks)) is None


def test_truncated_error_carries_partial_stream():
    err = TruncatedDecodeError("capped", ["Alarm.create", "NEXT"])
    assert err.symbols == ["Alarm.create", "NEXT"]
    assert "capped" in str(err)


def test_rangeless_struct_entry_is_masked(onto):
    # Flight.from leads to a string-only struct, so without a copy range
    # it can never be completed and must not be offered.
    state = initial_state(onto, ["to", "paris"], ())
    state = step(state, "Flight.book")
    legal = masked_symbols(state, symbol_vocabulary(onto))
    assert "Flight.from" not in legal and "Flight.to" not in legal
    with_range = step(state, COPY)
    assert "Flight.from" in masked_symbols(with_range, symbol_vocabulary(onto))


def test_decode_deterministic(onto):
    net = ParserNetwork(symbol_vocabulary(onto), SMALL, seed=13)
    toks = "remind me about the meeting".split()
    assert decode_greedy(net, onto, toks) == decode_greedy(net, onto, toks)
