"""Flat intent-slot output scheme, kept for comparison against the tree codec.

One symbol per intent, one combined symbol per (slot path, enum member)
pair, one terminator symbol per string-valued slot path; slot paths are
verb-relative dotted local names and are shared across intents.  COPY and
NEXT behave as in the tree codec; the terminator closes the open range at
the current cursor.  There is no FLUSH and no payload attachment, which
is the scheme's documented ceiling: a slot value that is not literally a
token slice of the utterance (carryover from an earlier turn, say) cannot
be produced at all, and sibling grouping under repeated structs is lost
in the projection.

Decoded streams build a :class:`~pocketnlu.trees.FlatFrame`; compare
against ``flatten(gold_tree)`` with ``frames_equal``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from pocketnlu.codec import AlignmentError, align
from pocketnlu.ontology import COPY, END, NEXT, STRING, Ontology
from pocketnlu.spans import Span
from pocketnlu.trees import EnumLeaf, FlatFrame, MrTree, StringLeaf, frames_equal, flatten
from pocketnlu.parser.network import Example, ParserNetwork
from pocketnlu.parser.decoding import span_labels

FLAT_CONTROL = (NEXT, COPY, END)


class FlatError(Exception):
    pass


class FlatInexpressibleError(FlatError):
    """The tree has no flat instruction stream over these tokens."""


class FlatStepError(FlatError):
    """An instruction the flat assembler rejects."""


class FlatScheme:
    """Symbol inventory and per-intent slot tables for one ontology."""

    def __init__(self, o: Ontology):
        self.ontology = o
        # intent -> slot symbol -> STRING or the enum name
        self.slots: dict[str, dict[str, str]] = {}
        for verb_q, verb in o.verbs.items():
            table: dict[str, str] = {}
            self._walk(verb_q, "", table)
            self.slots[verb_q] = table

    def _walk(self, context: str, prefix: str, out: dict[str, str]) -> None:
        o = self.ontology
        for attr in o.attrs_of(context).values():
            path = prefix + attr.name
            if attr.value_type == STRING:
                out[path] = STRING
            elif attr.value_type in o.enums:
                for member in o.enums[attr.value_type].members:
                    out[f"{path}={member}"] = attr.value_type
            elif attr.value_type in o.types:
                self._walk(attr.value_type, path + ".", out)

    def vocabulary(self) -> list[str]:
        names = set(self.ontology.verbs)
        for table in self.slots.values():
            names.update(table)
        return sorted(names) + list(FLAT_CONTROL)


@dataclass
class FlatState:
    scheme: FlatScheme
    tokens: tuple[str, ...]
    intent: Optional[str] = None
    cursor: int = 0
    open_start: Optional[int] = None
    covered: frozenset[int] = frozenset()
    slots: tuple[tuple[str, str], ...] = ()
    finished: bool = False
    emitted_at_cursor: int = 0

    def clone(self) -> "FlatState":
        return replace(self)


def flat_initial_state(scheme: FlatScheme, tokens: Sequence[str]) -> FlatState:
    if len(tokens) == 0:
        raise FlatStepError("cannot decode over zero tokens")
    return FlatState(scheme=scheme, tokens=tuple(tokens))


def flat_step(state: FlatState, sym: str) -> FlatState:
    if state.finished:
        raise FlatStepError(f"instruction {sym!r} after END")
    s = state.clone()

    if sym == NEXT:
        if s.cursor + 1 >= len(s.tokens):
            raise FlatStepError("NEXT past the last token")
        s.cursor += 1
        s.emitted_at_cursor = 0
        return s
    if sym == COPY:
        if s.intent is None:
            raise FlatStepError("COPY before any intent")
        if s.open_start is not None:
            raise FlatStepError("COPY while a copy range is already open")
        if s.cursor in s.covered:
            raise FlatStepError(f"token {s.cursor} is already covered by a copy")
        s.open_start = s.cursor
        s.emitted_at_cursor += 1
        return s
    if sym == END:
        if s.intent is None:
            raise FlatStepError("END with no intent decoded")
        if s.open_start is not None:
            raise FlatStepError("END with an open copy range")
        if s.cursor != len(s.tokens) - 1:
            raise FlatStepError("END before the final token")
        s.finished = True
        return s

    s.emitted_at_cursor += 1
    if sym in state.scheme.ontology.verbs:
        if s.intent is not None:
            raise FlatStepError(f"intent {sym!r} after the intent is set")
        s.intent = sym
        return s
    if s.intent is None:
        raise FlatStepError("slot symbol before any intent")
    kind = state.scheme.slots[s.intent].get(sym)
    if kind is None:
        raise FlatStepError(f"slot {sym!r} is not defined for intent {s.intent!r}")
    if kind == STRING:
        if s.open_start is None:
            raise FlatStepError(f"string slot {sym!r} with no copy range")
        rng = range(s.open_start, s.cursor + 1)
        value = " ".join(s.tokens[i] for i in rng)
        s.covered = s.covered | frozenset(rng)
        s.slots = s.slots + ((sym, value),)
        s.open_start = None
        return s
    if s.open_start is not None:
        raise FlatStepError("enum slot inside an open copy range")
    path, _, member = sym.partition("=")
    s.slots = s.slots + ((path, member),)
    return s


def flat_assemble(scheme: FlatScheme, symbols: Sequence[str],
                  tokens: Sequence[str]) -> FlatFrame:
    state = flat_initial_state(scheme, tokens)
    for sym in symbols:
        state = flat_step(state, sym)
    if not state.finished:
        raise FlatStepError("sequence did not END")
    return FlatFrame(intent=state.intent, slots=state.slots)


# ======================================================================
# Linearization


def flat_linearize(scheme: FlatScheme, tree: MrTree,
                   tokens: Sequence[str]) -> list[str]:
    """Flat instruction stream for a tree, or raise
    :class:`FlatInexpressibleError` when the scheme cannot carry it."""
    o = scheme.ontology
    table = scheme.slots.get(tree.verb)
    if table is None:
        raise FlatInexpressibleError(f"unknown intent {tree.verb!r}")
    try:
        # no payload spans: every string value must be a literal token slice
        alignment = align(o, tree, tokens, ())
    except AlignmentError as err:
        raise FlatInexpressibleError(str(err)) from err

    enums_at: dict[int, list[str]] = {}
    unanchored: list[str] = []
    ranges: list[tuple[tuple[int, int], str]] = []

    def visit(children, prefix: str) -> None:
        for attr_q in sorted(children):
            local = attr_q.partition(".")[2]
            for node in children[attr_q]:
                path = prefix + local
                if isinstance(node, StringLeaf):
                    rng = alignment.range_for(node)
                    ranges.append((rng, path))
                elif isinstance(node, EnumLeaf):
                    sym = f"{path}={node.member.partition('.')[2]}"
                    anchor = alignment.token_for(node)
                    if anchor is None:
                        unanchored.append(sym)
                    else:
                        enums_at.setdefault(anchor, []).append(sym)
                else:
                    visit(node.children, path + ".")

    visit(tree.children, "")
    for sym in unanchored + [s for syms in enums_at.values() for s in syms]:
        if sym not in table:
            raise FlatInexpressibleError(f"no symbol {sym!r} under {tree.verb!r}")
    for _, path in ranges:
        if table.get(path) != STRING:
            raise FlatInexpressibleError(f"no string slot {path!r} under {tree.verb!r}")

    ranges.sort()
    opens_at = {rng[0]: (rng, path) for rng, path in ranges}
    stream = [tree.verb] + list(unanchored)
    for t in range(len(tokens)):
        if t > 0:
            stream.append(NEXT)
        for rng, path in ranges:
            if rng[1] == t and rng[0] < t:
                stream.append(path)
        stream.extend(enums_at.get(t, ()))
        if t in opens_at:
            rng, path = opens_at[t]
            stream.append(COPY)
            if rng[1] == t:
                stream.append(path)
    stream.append(END)

    decoded = flat_assemble(scheme, stream, tokens)
    if not frames_equal(decoded, flatten(tree)):
        raise FlatInexpressibleError(
            "round-trip check rebuilt a different frame; the tree regroups "
            "siblings in a way the flat projection cannot carry")
    return stream


# ======================================================================
# Constrained decode


def _flat_live(state: FlatState) -> bool:
    if state.open_start is not None:
        table = state.scheme.slots[state.intent]
        return any(kind == STRING for kind in table.values())
    return True


def flat_legal_mask(state: FlatState, symbols: Sequence[str],
                    budget: int = 8) -> list[bool]:
    mask = []
    for sym in symbols:
        try:
            nxt = flat_step(state, sym)
        except FlatStepError:
            mask.append(False)
            continue
        mask.append(_flat_live(nxt))
    if state.emitted_at_cursor >= budget:
        advancing = [m and s in (NEXT, END) for m, s in zip(mask, symbols)]
        if any(advancing):
            return advancing
    return mask


def decode_flat(
    net: ParserNetwork,
    scheme: FlatScheme,
    tokens: Sequence[str],
    spans: Sequence[Span] = (),
    context_tokens: Sequence[str] = (),
    budget: int = 8,
) -> list[str]:
    """Greedy constrained decode under the flat scheme."""
    state = flat_initial_state(scheme, tokens)
    example = Example(list(tokens), span_labels(tokens, spans), list(context_tokens))
    enc, h = net.encode_example(example)
    prev = net.bos_id
    out: list[str] = []
    hard_cap = budget * (len(tokens) + 1)
    while not state.finished:
        if len(out) >= hard_cap:
            raise FlatStepError(f"decode exceeded {hard_cap} symbols")
        mask = flat_legal_mask(state, net.symbols, budget)
        if not any(mask):
            raise FlatStepError("no viable symbol from the current state")
        logits, h2 = net.step_np(enc, h, min(state.cursor, len(tokens) - 1), prev)
        masked = np.where(mask, logits.astype(np.float64), -np.inf)
        k = int(np.argmax(masked))
        sym = net.symbols[k]
        state = flat_step(state, sym)
        out.append(sym)
        prev = k
        h = h2
    return out


# ======================================================================
# Training


def build_flat_examples(
    net: ParserNetwork, scheme: FlatScheme, records
) -> tuple[list[Example], int]:
    """Teacher-forcing examples under the flat scheme.

    Returns (examples, skipped): turns whose gold tree the scheme cannot
    express are dropped and counted, they have no valid target stream.
    """
    from pocketnlu.corpus import context_for_turn, iter_training_turns
    from pocketnlu.context import featurize_system_action
    from pocketnlu.spans import tokenize

    examples: list[Example] = []
    skipped = 0
    for record, index, turn in iter_training_turns(records):
        tokens = tokenize(turn.utterance)
        if not tokens:
            continue
        try:
            stream = flat_linearize(scheme, turn.gold_tree, tokens)
        except FlatInexpressibleError:
            skipped += 1
            continue
        ctx = context_for_turn(record, index)
        examples.append(Example(
            tokens=tokens,
            labels=span_labels(tokens, turn.gold_spans),
            context=featurize_system_action(ctx.previous_action),
            target_ids=[net.sym_id[s] for s in stream],
        ))
    return examples, skipped


def train_flat(
    o: Ontology, records, config=None, log=None
) -> tuple[ParserNetwork, FlatScheme, list[float], int]:
    """Train a decoder over the flat scheme; mirrors ``training.train``."""
    from pocketnlu.parser import nn
    from pocketnlu.parser.training import TrainConfig

    cfg = config or TrainConfig()
    scheme = FlatScheme(o)
    net = ParserNetwork(scheme.vocabulary(), cfg.model, seed=cfg.seed)
    examples, skipped = build_flat_examples(net, scheme, records)
    if not examples:
        raise ValueError("no trainable turns under the flat scheme")
    opt = nn.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        total, steps = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[lo:lo + cfg.batch_size]]
            opt.zero_grad()
            loss = net.loss(net.pack(batch))
            nn.backward(loss)
            opt.step()
            total += float(loss.value)
            steps += 1
        history.append(total / steps)
        if log is not None:
            log(f"flat epoch {epoch + 1:>3}/{cfg.epochs}  loss {history[-1]:.4f}")
    return net, scheme, history, skipped
