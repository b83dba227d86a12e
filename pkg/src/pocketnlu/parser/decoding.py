"""Constrained greedy decoding.

The decoder never emits a symbol the assembler would reject: every
candidate is checked by actually stepping a cloned assembler state, so the
legality mask and the execution semantics cannot drift apart.  On top of
raw legality sit three guards that close off states which are legal now
but doomed later:

* a pending copy range must still have a consuming slot reachable from
  the current context (a string slot, or a struct slot matching the
  range's payload type), otherwise the instruction opening or keeping it
  is masked;
* entering a struct path without a copy range is masked unless an enum
  leaf is reachable, because COPY is illegal mid-path and string slots
  cannot be filled without a range;
* FLUSH is masked when nothing unflushed sits under a repeatable
  attribute, since a no-op flush can only burn budget;
* after ``budget`` symbols at one cursor position the mask narrows to
  cursor-advancing instructions where legal, and a hard cap proportional
  to the utterance length turns runaway decodes into an explicit error.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from pocketnlu.codec import AssembleError, AssemblerState, initial_state, step
from pocketnlu.ontology import END, FLUSH, NEXT, STRING, Ontology
from pocketnlu.parser.network import Example, ParserNetwork
from pocketnlu.spans import Span


class TruncatedDecodeError(Exception):
    """Decoding hit the symbol cap or ran out of legal moves."""

    def __init__(self, message: str, symbols: list[str]):
        super().__init__(message)
        self.symbols = symbols


def _deepest_path(o: Ontology, context: str, seen: frozenset = frozenset()) -> int:
    """Symbol count of the longest attribute path from ``context``."""
    if context in seen:
        return 0
    best = 0
    for a in o.attrs_of(context).values():
        if a.value_type == STRING:
            d = 1
        elif a.value_type in o.enums:
            d = 2
        else:
            d = 1 + _deepest_path(o, a.value_type, seen | {context})
        best = max(best, d)
    return best


def span_labels(tokens: Sequence[str], spans: Sequence[Span]) -> list[str]:
    """Per-token label channel for the encoder, "O" where no span applies."""
    labels = ["O"] * len(tokens)
    for sp in spans:
        for t in range(sp.start, sp.end + 1):
            if 0 <= t < len(labels):
                labels[t] = sp.label
    return labels


def _range_live(state: AssemblerState) -> bool:
    """True unless a pending copy range has no consuming slot left."""
    o = state.ontology
    if state.open_start is not None:
        # COPY is illegal mid-path, so the continuation context is the verb.
        ctx = state.tree.verb
        if o.string_reachable(ctx):
            return True
        return any(start == state.open_start and o.type_reachable(ctx, p.type_name)
                   for (start, _), p in state.payloads.items())
    if state.closed_range is not None:
        ctx = state.path_context if state.path else state.tree.verb
        payload = state.payloads.get(state.closed_range)
        if payload is not None:
            return o.type_reachable(ctx, payload.type_name)
        return o.string_reachable(ctx)
    return True


def _enum_reachable(o: Ontology, context: str, seen: frozenset = frozenset()) -> bool:
    """True if some attribute path from ``context`` ends at an enum."""
    if context in seen:
        return False
    for a in o.attrs_of(context).values():
        if a.value_type in o.enums and o.enums[a.value_type].members:
            return True
        if a.value_type in o.types and _enum_reachable(o, a.value_type, seen | {context}):
            return True
    return False


def _path_viable(state: AssemblerState) -> bool:
    """True unless an open path has no completing continuation."""
    if not state.path:
        return True
    ctx = state.path_context
    if ctx in state.ontology.enums:
        return bool(state.ontology.enums[ctx].members)
    if state.closed_range is not None:
        # _range_live vouches for the range's consumer.
        return True
    return _enum_reachable(state.ontology, ctx)


def _has_unflushed(state: AssemblerState) -> bool:
    if state.tree is None:
        return False
    o = state.ontology

    def walk(children) -> bool:
        for attr_q, entries in children.items():
            a = o.attr(attr_q)
            for e in entries:
                if a is not None and a.repeatable and not e.flushed:
                    return True
                sub = getattr(e.node, "children", None)
                if sub is not None and walk(sub):
                    return True
        return False

    return walk(state.tree.children)


def legal_mask(state: AssemblerState, symbols: Sequence[str], budget: int = 8) -> list[bool]:
    """One flag per symbol: emitting it keeps the decode on a viable path."""
    mask = []
    for sym in symbols:
        if sym == FLUSH and not _has_unflushed(state):
            mask.append(False)
            continue
        try:
            nxt = step(state, sym)
        except AssembleError:
            mask.append(False)
            continue
        mask.append(_range_live(nxt) and _path_viable(nxt))
    if state.emitted_at_cursor >= budget:
        advancing = [m and s in (NEXT, END) for m, s in zip(mask, symbols)]
        if any(advancing):
            return advancing
    return mask


def decode_greedy(
    net: ParserNetwork,
    o: Ontology,
    tokens: Sequence[str],
    spans: Sequence[Span] = (),
    context_tokens: Sequence[str] = (),
    budget: int = 8,
) -> list[str]:
    """Greedy constrained decode; returns the emitted instruction stream,
    END included.  Raises :class:`TruncatedDecodeError` when the stream
    would exceed ``(budget + deepest path) * (len(tokens) + 1)`` symbols.

    The cap is a backstop, not the working limit: budget narrowing forces
    a cursor advance soon after ``budget`` symbols pile up at a position,
    and the slack term covers a path begun just below the trigger, which
    must run to its leaf before narrowing can apply."""
    state = initial_state(o, list(tokens), spans)
    example = Example(list(tokens), span_labels(tokens, spans), list(context_tokens))
    enc, h = net.encode_example(example)
    prev = net.bos_id
    out: list[str] = []
    slack = max(_deepest_path(o, v) for v in o.verbs)
    hard_cap = (budget + slack) * (len(tokens) + 1)
    while not state.finished:
        if len(out) >= hard_cap:
            raise TruncatedDecodeError(f"decode exceeded {hard_cap} symbols", out)
        mask = legal_mask(state, net.symbols, budget)
        if not any(mask):
            raise TruncatedDecodeError("no viable symbol from the current state", out)
        logits, h2 = net.step_np(enc, h, min(state.cursor, len(tokens) - 1), prev)
        masked = np.where(mask, logits.astype(np.float64), -np.inf)
        k = int(np.argmax(masked))
        sym = net.symbols[k]
        state = step(state, sym)
        out.append(sym)
        prev = k
        h = h2
    return out
