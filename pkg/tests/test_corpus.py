"""Synthetic corpus generation, serialization, and the turn iterator."""

import random

from pocketnlu.codec import assemble, linearize
from pocketnlu.corpus import (
    ROUTE_GENERAL,
    ROUTE_KNOWLEDGE,
    context_for_turn,
    coverage,
    default_templates,
    generate_synthetic,
    iter_training_turns,
    random_expressible_tree,
    read_jsonl,
    turn_count,
    validate_templates,
    write_jsonl,
)
from pocketnlu.spans import tokenize
from pocketnlu.trees import exact_match, validate_tree


def test_generation_deterministic(onto, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(generate_synthetic(onto, n=30, seed=4), a)
    write_jsonl(generate_synthetic(onto, n=30, seed=4), b)
    assert a.read_bytes() == b.read_bytes()
    write_jsonl(generate_synthetic(onto, n=30, seed=5), b)
    assert a.read_bytes() != b.read_bytes()


def test_jsonl_round_trip(onto, small_corpus, tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(small_corpus, path)
    again = read_jsonl(path)
    assert len(again) == len(small_corpus)
    for rec, rec2 in zip(small_corpus, again):
        assert rec.id == rec2.id
        for t, t2 in zip(rec.turns, rec2.turns):
            assert t.utterance == t2.utterance
            assert exact_match(t.gold_tree, t2.gold_tree)
            assert t.instructions == t2.instructions
            assert [(s.start, s.end, s.label) for s in t.gold_spans] == [
                (s.start, s.end, s.label) for s in t2.gold_spans
            ]
            assert t.response_action.kind == t2.response_action.kind


def test_coverage_counts_conversations(onto, small_corpus):
    counts = coverage(small_corpus)
    assert sum(counts.values()) == len(small_corpus)
    assert set(counts) <= {t.family for t in default_templates()}
    # 120 draws should touch every family.
    assert set(counts) == {t.family for t in default_templates()}


def test_default_templates_validate(onto):
    validate_templates(onto, default_templates())


def test_gold_instructions_reassemble(onto, small_corpus):
    seen = 0
    for record, index, turn in iter_training_turns(small_corpus):
        tokens = tokenize(turn.utterance)
        tree = assemble(onto, turn.instructions, tokens, spans=turn.gold_spans)
        assert exact_match(tree, turn.gold_tree), record.id
        seen += 1
    assert seen > 100


def test_iter_training_turns_filters(onto, small_corpus):
    for _, _, turn in iter_training_turns(small_corpus):
        assert turn.route == ROUTE_GENERAL
        assert turn.instructions
    routes = {t.route for r in small_corpus for t in r.turns}
    assert ROUTE_KNOWLEDGE in routes, "corpus should exercise the knowledge route"


def test_turn_count_matches_sum(small_corpus):
    assert turn_count(small_corpus) == sum(len(r.turns) for r in small_corpus)


def test_context_for_turn_rebuilds_history(onto, small_corpus):
    multi = next(r for r in small_corpus if len(r.turns) > 1)
    ctx = context_for_turn(multi, 1)
    assert ctx.previous_utterances == [multi.turns[0].utterance]
    assert ctx.previous_action.kind == multi.turns[0].response_action.kind
    ctx0 = context_for_turn(multi, 0)
    assert ctx0.previous_utterances == [] and ctx0.previous_action is None


def test_knowledge_turns_carry_no_instructions(small_corpus):
    for record in small_corpus:
        for turn in record.turns:
            if turn.route == ROUTE_KNOWLEDGE:
                assert turn.instructions is None


def test_gold_trees_validate(onto, small_corpus):
    for record in small_corpus:
        for turn in record.turns:
            assert validate_tree(onto, turn.gold_tree) is None, record.id


def test_random_expressible_trees_valid_and_linearizable(onto):
    rng = random.Random(123)
    for _ in range(60):
        tree, tokens = random_expressible_tree(onto, rng)
        assert validate_tree(onto, tree) is None
        instrs = linearize(onto, tree, tokens)
        assert instrs[-1] == "END"
