"""Linearization and assembly: the instruction codec.

The pinned fixtures here are the contract; the seeded round trips are the
safety net that keeps refactors honest.
"""

import random

import pytest

from pocketnlu.codec import (
    AlignmentError,
    AssembleError,
    assemble,
    initial_state,
    linearize,
    step,
)
from pocketnlu.corpus import random_expressible_tree
from pocketnlu.ontology import COPY, END, FLUSH, NEXT
from pocketnlu.spans import EntityRecord, EntityStore, Span, tokenize
from pocketnlu.trees import (
    EnumLeaf,
    MrTree,
    StringLeaf,
    SubTree,
    UnfilledLeaf,
    SystemAction,
    PROMPT,
    exact_match,
    validate_tree,
)
from pocketnlu.context import DialogContext, featurize_inputs

GOLDEN_UTTERANCE = "please create fishing trip alarm on sundays"

GOLDEN_TREE = MrTree(
    "Alarm.create",
    {
        "Alarm.name": [StringLeaf("fishing trip")],
        "Alarm.recurrence": [
            SubTree("DateTime", {"DateTime.dayOfWeek": [EnumLeaf("DayOfWeek.Sunday")]})
        ],
    },
)

GOLDEN_INSTRUCTIONS = [
    "Alarm.create",
    NEXT,
    NEXT,
    COPY,
    NEXT,
    "Alarm.name",
    NEXT,
    NEXT,
    NEXT,
    "Alarm.recurrence",
    "DateTime.dayOfWeek",
    "DayOfWeek.Sunday",
    END,
]


def test_golden_linearization(onto):
    tokens = tokenize(GOLDEN_UTTERANCE)
    assert len(tokens) == 7
    assert linearize(onto, GOLDEN_TREE, tokens) == GOLDEN_INSTRUCTIONS


def test_golden_assembly(onto):
    tokens = tokenize(GOLDEN_UTTERANCE)
    tree = assemble(onto, GOLDEN_INSTRUCTIONS, tokens)
    assert exact_match(tree, GOLDEN_TREE)


def test_flush_separates_repeated_siblings(onto):
    tree = MrTree(
        "Message.send",
        {
            "Message.recipient": [StringLeaf("eugene"), StringLeaf("mark")],
            "Message.content": [StringLeaf("hello")],
        },
    )
    tokens = tokenize("send eugene and mark hello")
    instrs = linearize(onto, tree, tokens)
    # One FLUSH total: before the second recipient's copy, none before the
    # first.  Both outcomes pinned.
    assert instrs.count(FLUSH) == 1
    first_recipient = instrs.index("Message.recipient")
    second_recipient = instrs.index("Message.recipient", first_recipient + 1)
    flush_at = instrs.index(FLUSH)
    assert first_recipient < flush_at < second_recipient
    assert exact_match(assemble(onto, instrs, tokens), tree)


def test_unaligned_paths_emitted_at_first_token(onto):
    # Nothing in the utterance anchors the enum leaf; its whole path must
    # come out while the cursor still sits on token 0.
    tree = MrTree(
        "Alarm.create",
        {
            "Alarm.name": [StringLeaf("gym")],
            "Alarm.source": [EnumLeaf("Source.Voice")],
        },
    )
    tokens = ["gym"]
    instrs = linearize(onto, tree, tokens)
    assert NEXT not in instrs[: instrs.index("Source.Voice")]
    assert exact_match(assemble(onto, instrs, tokens), tree)


def test_node_reuse_shares_parent(onto):
    # Both DateTime attributes live under one recurrence node; the second
    # path must reuse it rather than create a sibling.
    tree = MrTree(
        "Alarm.create",
        {
            "Alarm.recurrence": [
                SubTree(
                    "DateTime",
                    {
                        "DateTime.dayOfWeek": [EnumLeaf("DayOfWeek.Monday")],
                        "DateTime.date": [EnumLeaf("Date.Tomorrow")],
                    },
                )
            ]
        },
    )
    tokens = tokenize("alarm monday tomorrow")
    instrs = linearize(onto, tree, tokens)
    out = assemble(onto, instrs, tokens)
    assert len(out.children["Alarm.recurrence"]) == 1
    assert exact_match(out, tree)


def test_carryover_payload_span(onto):
    paris = SubTree("Location", {"Location.name": [StringLeaf("paris")]})
    store = EntityStore(
        [
            EntityRecord(
                id="turn0:Flight.to",
                label="slot:Flight.to",
                canonical="paris",
                source="linguistic",
                payload=paris,
            )
        ]
    )
    prompt = SystemAction(
        kind=PROMPT,
        payload=MrTree(
            "Flight.book",
            {"Flight.from": [UnfilledLeaf()], "Flight.departingAt": [UnfilledLeaf()]},
        ),
    )
    ctx = DialogContext(
        previous_utterances=["book me a flight to paris"],
        previous_action=prompt,
        store=store,
    )
    tokens = tokenize("tomorrow from london")
    spans, _ = featurize_inputs(onto, tokens, ctx)
    assert [(s.start, s.end, s.label) for s in spans] == [(0, 0, "carryover")]
    gold = MrTree(
        "Flight.book",
        {
            "Flight.from": [SubTree("Location", {"Location.name": [StringLeaf("london")]})],
            "Flight.to": [paris],
            "Flight.departingAt": [
                SubTree("DateTime", {"DateTime.date": [EnumLeaf("Date.Tomorrow")]})
            ],
        },
    )
    instrs = linearize(onto, gold, tokens, spans=spans)
    assert len(instrs) == 12
    assert exact_match(assemble(onto, instrs, tokens, spans=spans), gold)


def test_linearize_rejects_non_contiguous_string(onto):
    tree = MrTree("Alarm.create", {"Alarm.name": [StringLeaf("missing words")]})
    with pytest.raises(AlignmentError):
        linearize(onto, tree, tokenize("set an alarm"))


def test_linearize_rejects_invalid_tree(onto):
    bad = MrTree("Alarm.create", {"Alarm.volume": [StringLeaf("loud")]})
    with pytest.raises(Exception):
        linearize(onto, bad, ["loud"])


# ======================================================================
# Assembler state machine edges


def test_step_requires_verb_first(onto):
    state = initial_state(onto, ["hi"], ())
    with pytest.raises(AssembleError):
        step(state, NEXT)
    with pytest.raises(AssembleError):
        step(state, "Alarm.name")


def test_step_rejects_next_past_last_token(onto):
    state = initial_state(onto, ["hi", "there"], ())
    state = step(state, "Alarm.create")
    state = step(state, NEXT)  # cursor now on the final token
    with pytest.raises(AssembleError):
        step(state, NEXT)


def test_step_rejects_second_verb(onto):
    state = step(initial_state(onto, ["hi"], ()), "Alarm.create")
    with pytest.raises(AssembleError):
        step(state, "Message.send")


def test_step_rejects_nested_copy(onto):
    state = step(initial_state(onto, ["a", "b"], ()), "Alarm.create")
    state = step(state, COPY)
    with pytest.raises(AssembleError):
        step(state, COPY)


def test_assemble_requires_end(onto):
    with pytest.raises(AssembleError):
        assemble(onto, ["Alarm.create", NEXT], ["hi", "there"])


def test_assemble_rejects_unknown_symbol(onto):
    with pytest.raises(AssembleError):
        assemble(onto, ["Alarm.create", "Bogus.path", END], ["hi"])


# ======================================================================
# Seeded round trips (the acceptance criterion runs 1,000; this is the
# fast regression version)


@pytest.mark.parametrize("seed", range(8))
def test_round_trip_batches(onto, seed):
    rng = random.Random(seed)
    for _ in range(25):
        tree, tokens = random_expressible_tree(onto, rng)
        instrs = linearize(onto, tree, tokens)
        again = assemble(onto, instrs, tokens)
        assert exact_match(again, tree)
        assert validate_tree(onto, again) is None


def _is_token_slice(text: str, tokens: list[str]) -> bool:
    words = text.split()
    return any(
        tokens[i : i + len(words)] == words for i in range(len(tokens) - len(words) + 1)
    )


def test_round_trip_string_leaves_are_slices(onto):
    rng = random.Random(99)
    checked = 0
    for _ in range(50):
        tree, tokens = random_expressible_tree(onto, rng)
        out = assemble(onto, linearize(onto, tree, tokens), tokens)
        stack = [out.children]
        while stack:
            children = stack.pop()
            for nodes in children.values():
                for node in nodes:
                    if isinstance(node, StringLeaf):
                        assert _is_token_slice(node.text, tokens)
                        checked += 1
                    elif isinstance(node, SubTree):
                        stack.append(node.children)
    assert checked > 20
