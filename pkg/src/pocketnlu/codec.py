"""Token-synchronous codec between trees and tree-building instructions.

A parse is decoded as a sequence of instructions emitted while walking the
utterance left to right:

* a qualified name extends the current root-to-leaf path,
* ``NEXT`` advances to the following token,
* ``COPY`` opens a copy range at the current token; the first path
  instruction after it closes the range, and the covered slice fills the
  slot the path lands on,
* ``FLUSH`` marks every node currently under a repeatable attribute as
  complete, excluding it from reuse,
* ``END`` finishes the parse at the final token.

``linearize`` turns (tree, tokens, alignment) into instructions and
``assemble`` replays instructions back into a tree, reusing existing nodes
along shared path prefixes.  The two are inverses on expressible trees, and
``linearize`` verifies that round trip by default because global FLUSH scope
makes a small class of deeply nested sibling structures inexpressible:
flushing for a new sibling also retires every in-progress node under other
repeatable attributes, so a tree needing both at once cannot be emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from pocketnlu.ontology import (
    COPY,
    END,
    FLUSH,
    NEXT,
    STRING,
    AttrDef,
    Ontology,
)
from pocketnlu.spans import Span, lemmatize
from pocketnlu.trees import (
    EnumLeaf,
    MrTree,
    Node,
    StringLeaf,
    SubTree,
    UnfilledLeaf,
    _node_key,
    exact_match,
    normalize_string,
    validate_tree,
)

Instruction = str


class CodecError(Exception):
    """Base for alignment, linearization, and assembly failures."""


class AlignmentError(CodecError):
    pass


class AssembleError(CodecError):
    pass


def attr_in_context(o: Ontology, context: str, qualified: str) -> Optional[AttrDef]:
    """The attribute ``qualified`` as reachable from a verb or type context."""
    for attr in o.attrs_of(context).values():
        if attr.qualified == qualified:
            return attr
    return None


# ======================================================================
# Alignment


@dataclass
class Alignment:
    """Where each leaf of a tree surfaces in the utterance.

    Keyed by node identity, so it is only meaningful for the exact tree
    object it was computed from.  String leaves map to contiguous token
    ranges, enum leaves to a single evoking token or nothing (unaligned),
    and whole subtrees may map to ranges covered by a payload span.
    """

    copy_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)
    enum_tokens: dict[int, int] = field(default_factory=dict)
    payload_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)
    unaligned_enums: set[int] = field(default_factory=set)

    def range_for(self, leaf: StringLeaf) -> Optional[tuple[int, int]]:
        return self.copy_ranges.get(id(leaf))

    def token_for(self, leaf: EnumLeaf) -> Optional[int]:
        return self.enum_tokens.get(id(leaf))

    def payload_range_for(self, node: SubTree) -> Optional[tuple[int, int]]:
        return self.payload_ranges.get(id(node))


def align(
    o: Ontology,
    tree: MrTree,
    tokens: Sequence[str],
    spans: Sequence[Span] = (),
    lang: str = "en",
) -> Alignment:
    """Anchor tree leaves to utterance tokens.

    Payload-carrying spans are matched first: a subtree that equals a span's
    payload aligns to that span's range as a whole and its interior is not
    visited again.  Remaining leaves are walked depth-first in attribute
    order; each string leaf claims the leftmost unconsumed window whose text
    matches, each enum leaf the leftmost unconsumed token carrying one of
    its trigger lemmas.  Payload ranges do not consume tokens (they are
    virtual anchors), so an enum evoked inside one still aligns.

    Raises :class:`AlignmentError` for a string leaf with no contiguous
    match, since copy semantics cannot produce it.
    """
    alignment = Alignment()
    folded = [t.casefold() for t in tokens]
    consumed: set[int] = set()

    remaining = [s for s in sorted(spans, key=lambda s: (s.start, s.end)) if s.payload]

    def claim_payload(node: Node) -> bool:
        if not isinstance(node, SubTree):
            return False
        for i, span in enumerate(remaining):
            if span.payload.type_name == node.type_name and _node_key(
                span.payload
            ) == _node_key(node):
                alignment.payload_ranges[id(node)] = (span.start, span.end)
                remaining.pop(i)
                return True
        return False

    def visit(children: dict[str, list[Node]]) -> None:
        for attr_q in sorted(children):
            for child in children[attr_q]:
                if isinstance(child, UnfilledLeaf):
                    raise AlignmentError("cannot align a tree with unfilled slots")
                if claim_payload(child):
                    continue
                if isinstance(child, StringLeaf):
                    _claim_string(child)
                elif isinstance(child, EnumLeaf):
                    _claim_enum(child)
                else:
                    visit(child.children)

    def _claim_string(leaf: StringLeaf) -> None:
        words = normalize_string(leaf.text).split()
        width = len(words)
        for start in range(0, len(tokens) - width + 1):
            window = range(start, start + width)
            if any(i in consumed for i in window):
                continue
            if [folded[i] for i in window] == words:
                alignment.copy_ranges[id(leaf)] = (start, start + width - 1)
                consumed.update(window)
                return
        raise AlignmentError(
            f"string leaf {leaf.text!r} is not a contiguous slice of the utterance"
        )

    def _claim_enum(leaf: EnumLeaf) -> None:
        triggers = o.triggers.get(leaf.member, ())
        for index in range(len(tokens)):
            if index in consumed:
                continue
            if lemmatize(tokens[index], lang) in triggers:
                alignment.enum_tokens[id(leaf)] = index
                consumed.add(index)
                return
        alignment.unaligned_enums.add(id(leaf))

    visit(tree.children)
    return alignment


# ======================================================================
# Linearization


@dataclass
class _Event:
    """One emission unit: a root path ending at a leaf or payload subtree."""

    open_token: Optional[int]  # COPY position, None for plain paths
    close_token: int  # where the path symbols are emitted
    segments: tuple[str, ...]  # path after the verb, including member for enums
    order: int  # depth-first visit order, stabilizes within-token sorting
    needs_flush: bool = False
    unaligned: bool = False

    def first_token(self) -> int:
        return self.close_token if self.open_token is None else self.open_token


def linearize(
    o: Ontology,
    tree: MrTree,
    tokens: Sequence[str],
    alignment: Optional[Alignment] = None,
    spans: Sequence[Span] = (),
    verify: bool = True,
) -> list[Instruction]:
    """Emit the instruction sequence for a tree over its utterance.

    Per token, emission order is: the verb (token 0 only), unaligned paths
    (token 0 only, depth-first attribute order), terminators of copy ranges
    opened at an earlier token, aligned enum paths, then copy openings; a
    single-token range emits COPY and its terminator back to back.  FLUSH
    precedes the first symbol of every repeatable sibling after the first,
    in sibling order of first emission.  NEXT separates adjacent tokens and
    END closes the sequence, so length is exactly
    ``tokens + path segments (verb included) + copies + flushes``.

    With ``verify`` on (the default), the sequence is replayed through
    :func:`assemble` and checked against the input tree, raising
    :class:`CodecError` for trees outside the expressible class instead of
    returning instructions that would silently rebuild something else.
    """
    n = len(tokens)
    if n == 0:
        raise CodecError("cannot linearize over zero tokens")
    problem = validate_tree(o, tree)
    if problem is not None:
        raise CodecError(f"invalid tree: {problem}")
    if alignment is None:
        alignment = align(o, tree, tokens, spans)

    events: list[_Event] = []
    counter = iter(range(1_000_000))

    def visit(children: dict[str, list[Node]], prefix: tuple[str, ...]) -> list[_Event]:
        produced: list[_Event] = []
        for attr_q in sorted(children):
            siblings = children[attr_q]
            per_child: list[list[_Event]] = []
            for child in siblings:
                per_child.append(_child_events(child, prefix + (attr_q,)))
            if len(siblings) > 1:
                # Later siblings need a FLUSH so assembly starts a new node
                # instead of reusing the one just built.
                ordered = sorted(per_child, key=lambda evs: evs[0].first_token())
                for sibling_events in ordered[1:]:
                    sibling_events[0].needs_flush = True
                for sibling_events in ordered:
                    produced.extend(sibling_events)
            elif per_child:
                produced.extend(per_child[0])
        return produced

    def _child_events(child: Node, segs: tuple[str, ...]) -> list[_Event]:
        if isinstance(child, SubTree):
            rng = alignment.payload_range_for(child)
            if rng is not None:
                ev = _Event(rng[0], rng[1], segs, next(counter))
                events.append(ev)
                return [ev]
            nested = visit(child.children, segs)
            if not nested:
                raise CodecError(f"subtree at {segs[-1]} produced no emissions")
            return sorted(nested, key=lambda e: (e.first_token(), e.order))
        if isinstance(child, StringLeaf):
            rng = alignment.range_for(child)
            if rng is None:
                raise CodecError(
                    f"string leaf {child.text!r} has no alignment; align() first"
                )
            ev = _Event(rng[0], rng[1], segs, next(counter))
        else:
            assert isinstance(child, EnumLeaf)
            token = alignment.token_for(child)
            if token is None:
                ev = _Event(None, 0, segs + (child.member,), next(counter), unaligned=True)
            else:
                ev = _Event(None, token, segs + (child.member,), next(counter))
        events.append(ev)
        return [ev]

    visit(tree.children, ())

    # Emission phases within one token position.
    def phase(ev: _Event, t: int) -> int:
        if ev.unaligned:
            return 1
        if ev.open_token is not None and ev.open_token < t:
            return 2  # terminator of a range opened earlier
        if ev.open_token is None:
            return 3  # aligned plain path
        return 4  # copy opening (single-token ranges close immediately)

    instrs: list[Instruction] = [tree.verb]
    for t in range(n):
        todays = [ev for ev in events if ev.first_token() == t or ev.close_token == t]
        todays.sort(key=lambda ev: (phase(ev, t), ev.order))
        for ev in todays:
            symbols: list[Instruction] = []
            if ev.open_token is not None and ev.open_token == t:
                symbols.append(COPY)
                if ev.close_token == t:
                    symbols.extend(ev.segments)
            elif ev.open_token is not None and ev.close_token == t:
                symbols.extend(ev.segments)
            elif ev.open_token is None and (ev.close_token == t or (ev.unaligned and t == 0)):
                symbols.extend(ev.segments)
            if symbols and ev.needs_flush and ev.first_token() == t:
                symbols.insert(0, FLUSH)
            instrs.extend(symbols)
        if t < n - 1:
            instrs.append(NEXT)
    instrs.append(END)

    if verify:
        payload_spans = [
            Span(start=rng[0], end=rng[1], label="payload", payload=node)
            for node, rng in _payload_nodes(tree, alignment)
        ]
        rebuilt = assemble(o, instrs, tokens, payload_spans)
        if not exact_match(rebuilt, tree):
            raise CodecError(
                "tree is not expressible under global flush scope; "
                "round-trip check rebuilt a different tree"
            )
    return instrs


def _payload_nodes(tree: MrTree, alignment: Alignment):
    out = []

    def visit(children):
        for nodes in children.values():
            for node in nodes:
                if isinstance(node, SubTree):
                    rng = alignment.payload_ranges.get(id(node))
                    if rng is not None:
                        out.append((node, rng))
                    else:
                        visit(node.children)

    visit(tree.children)
    return out


# ======================================================================
# Assembly


@dataclass
class _Entry:
    node: object  # StringLeaf | EnumLeaf | _MutSub
    flushed: bool = False


@dataclass
class _MutSub:
    type_name: str
    children: dict[str, list[_Entry]] = field(default_factory=dict)


@dataclass
class _MutTree:
    verb: str
    children: dict[str, list[_Entry]] = field(default_factory=dict)


def _clone_children(children: dict[str, list[_Entry]]) -> dict[str, list[_Entry]]:
    out: dict[str, list[_Entry]] = {}
    for attr, entries in children.items():
        cloned = []
        for e in entries:
            node = e.node
            if isinstance(node, _MutSub):
                node = _MutSub(node.type_name, _clone_children(node.children))
            cloned.append(_Entry(node, e.flushed))
        out[attr] = cloned
    return out


def _from_public(node: SubTree) -> _MutSub:
    sub = _MutSub(node.type_name)
    for attr, nodes in node.children.items():
        sub.children[attr] = [
            _Entry(_from_public(n) if isinstance(n, SubTree) else n) for n in nodes
        ]
    return sub


def _to_public(children: dict[str, list[_Entry]]) -> dict[str, list[Node]]:
    out: dict[str, list[Node]] = {}
    for attr, entries in children.items():
        nodes: list[Node] = []
        for e in entries:
            if isinstance(e.node, _MutSub):
                nodes.append(SubTree(e.node.type_name, _to_public(e.node.children)))
            elif isinstance(e.node, StringLeaf):
                nodes.append(StringLeaf(e.node.text))
            else:
                nodes.append(EnumLeaf(e.node.member))
        out[attr] = nodes
    return out


@dataclass
class AssemblerState:
    """Replayable decoder-side state: the partial tree plus cursor, copy,
    and path bookkeeping.  ``step`` returns a new state, so any prefix of a
    sequence can be replayed deterministically."""

    ontology: Ontology
    tokens: tuple[str, ...]
    payloads: dict[tuple[int, int], SubTree]
    tree: Optional[_MutTree] = None
    cursor: int = 0
    open_start: Optional[int] = None
    closed_range: Optional[tuple[int, int]] = None
    path: tuple[str, ...] = ()
    path_context: Optional[str] = None
    covered: frozenset[int] = frozenset()
    finished: bool = False
    emitted_at_cursor: int = 0
    last_symbol: Optional[str] = None

    def clone(self) -> "AssemblerState":
        new = replace(self)
        if self.tree is not None:
            new.tree = _MutTree(self.tree.verb, _clone_children(self.tree.children))
        return new

    def snapshot(self):
        """Hashable view for determinism checks."""
        tree = None
        if self.tree is not None:
            tree = (self.tree.verb, _snapshot_children(self.tree.children))
        return (
            tree,
            self.cursor,
            self.open_start,
            self.closed_range,
            self.path,
            self.covered,
            self.finished,
        )


def _snapshot_children(children: dict[str, list[_Entry]]):
    items = []
    for attr in sorted(children):
        entry_keys = []
        for e in children[attr]:
            if isinstance(e.node, _MutSub):
                key = ("t", e.node.type_name, _snapshot_children(e.node.children))
            elif isinstance(e.node, StringLeaf):
                key = ("s", e.node.text)
            else:
                key = ("e", e.node.member)
            entry_keys.append((key, e.flushed))
        items.append((attr, tuple(entry_keys)))
    return tuple(items)


def initial_state(
    o: Ontology, tokens: Sequence[str], spans: Sequence[Span] = ()
) -> AssemblerState:
    if len(tokens) == 0:
        raise AssembleError("cannot assemble over zero tokens")
    payloads: dict[tuple[int, int], SubTree] = {}
    for span in spans:
        if span.payload is not None:
            payloads.setdefault((span.start, span.end), span.payload)
    return AssemblerState(ontology=o, tokens=tuple(tokens), payloads=payloads)


def step(state: AssemblerState, instr: Instruction) -> AssemblerState:
    """Apply one instruction, returning the successor state.

    Raises :class:`AssembleError` for every illegal transition: NEXT past
    the last token, COPY while a range is open or over an already-copied
    token, FLUSH inside a range, control instructions mid-path, paths that
    do not follow ontology edges, string slots without a copy range, END
    with unfinished business, and anything after END.
    """
    if state.finished:
        raise AssembleError(f"instruction {instr!r} after END")
    o = state.ontology
    s = state.clone()
    s.last_symbol = instr

    if instr == NEXT:
        if s.path:
            raise AssembleError("NEXT in the middle of a path")
        if s.cursor + 1 >= len(s.tokens):
            raise AssembleError("NEXT past the last token")
        s.cursor += 1
        s.emitted_at_cursor = 0
        return s

    if instr == COPY:
        if s.tree is None:
            raise AssembleError("COPY before any verb")
        if s.path:
            raise AssembleError("COPY in the middle of a path")
        if s.open_start is not None:
            raise AssembleError("COPY while a copy range is already open")
        if s.cursor in s.covered:
            raise AssembleError(f"token {s.cursor} is already covered by a copy")
        s.open_start = s.cursor
        s.emitted_at_cursor += 1
        return s

    if instr == FLUSH:
        if s.tree is None:
            raise AssembleError("FLUSH before any verb")
        if s.path:
            raise AssembleError("FLUSH in the middle of a path")
        if s.open_start is not None:
            raise AssembleError("FLUSH inside an open copy range")
        _flush_all(o, s.tree.verb, s.tree.children)
        s.emitted_at_cursor += 1
        return s

    if instr == END:
        if s.tree is None:
            raise AssembleError("END with no verb decoded")
        if s.path:
            raise AssembleError("END in the middle of a path")
        if s.open_start is not None:
            raise AssembleError("END with an open copy range")
        if s.cursor != len(s.tokens) - 1:
            raise AssembleError("END before the final token")
        s.finished = True
        return s

    # A path symbol: verb, attribute, or enum member.
    s.emitted_at_cursor += 1
    if s.tree is None:
        if not o.is_verb(instr):
            raise AssembleError(f"first instruction must be a verb, got {instr!r}")
        s.tree = _MutTree(instr)
        return s
    if o.is_verb(instr):
        raise AssembleError(f"verb {instr!r} after the root is set")

    if s.open_start is not None:
        # The first path instruction after COPY closes the range.
        rng = (s.open_start, s.cursor)
        s.closed_range = rng
        s.open_start = None
        s.covered = s.covered | frozenset(range(rng[0], rng[1] + 1))

    context = s.path_context if s.path else s.tree.verb

    if o.is_enum_member(instr):
        if o.member_enum(instr) != context:
            raise AssembleError(f"illegal edge {context!r} -> {instr!r}")
        if s.closed_range is not None:
            raise AssembleError("copy range cannot fill an enum slot")
        _attach(o, s.tree, s.path + (instr,), EnumLeaf(instr))
        s.path = ()
        s.path_context = None
        return s

    attr = attr_in_context(o, context, instr)
    if attr is None:
        raise AssembleError(f"illegal edge {context!r} -> {instr!r}")
    vt = attr.value_type

    if vt == STRING:
        if s.closed_range is None:
            raise AssembleError(f"string slot {instr!r} with no copy range")
        payload = s.payloads.get(s.closed_range)
        if payload is not None:
            raise AssembleError(
                f"range {s.closed_range} carries a payload and cannot fill a string slot"
            )
        text = " ".join(s.tokens[s.closed_range[0] : s.closed_range[1] + 1])
        _attach(o, s.tree, s.path + (instr,), StringLeaf(text))
        s.path = ()
        s.path_context = None
        s.closed_range = None
        return s

    if vt in o.enums:
        if s.closed_range is not None:
            raise AssembleError("copy range cannot reach an enum slot")
        s.path = s.path + (instr,)
        s.path_context = vt
        return s

    if vt in o.types:
        if s.closed_range is not None:
            payload = s.payloads.get(s.closed_range)
            if payload is not None and payload.type_name == vt:
                _attach(o, s.tree, s.path + (instr,), _from_public(payload))
                s.path = ()
                s.path_context = None
                s.closed_range = None
                return s
        s.path = s.path + (instr,)
        s.path_context = vt
        return s

    raise AssembleError(f"attribute {instr!r} has undefined type {vt!r}")


def _flush_all(o: Ontology, context: str, children: dict[str, list[_Entry]]) -> None:
    for attr_q, entries in children.items():
        attr = attr_in_context(o, context, attr_q)
        if attr is not None and attr.repeatable:
            for e in entries:
                e.flushed = True
        for e in entries:
            if isinstance(e.node, _MutSub):
                _flush_all(o, e.node.type_name, e.node.children)


def _attach(o: Ontology, tree: _MutTree, segments: tuple[str, ...], leaf) -> None:
    """Walk the path from the root, reusing unflushed nodes, and attach the
    leaf (or payload subtree).  If an unflushed child already occupies the
    final slot, the existing child is kept and the incoming value dropped;
    that is the reuse rule, and FLUSH exists to switch it off."""
    final = segments[-1]
    if o.is_enum_member(final):
        walk, attach_attr = segments[:-2], segments[-2]
    else:
        walk, attach_attr = segments[:-1], segments[-1]

    children = tree.children
    context = tree.verb
    for seg in walk:
        attr = attr_in_context(o, context, seg)
        assert attr is not None  # step() validated the path already
        entries = children.setdefault(seg, [])
        reuse = next((e for e in reversed(entries) if not e.flushed), None)
        if reuse is None:
            node = _MutSub(attr.value_type)
            entries.append(_Entry(node))
        else:
            node = reuse.node
        children = node.children
        context = attr.value_type

    entries = children.setdefault(attach_attr, [])
    if any(not e.flushed for e in entries):
        return
    entries.append(_Entry(leaf))


def assemble(
    o: Ontology,
    instrs: Iterable[Instruction],
    tokens: Sequence[str],
    spans: Sequence[Span] = (),
) -> MrTree:
    """Replay an instruction sequence into a tree.

    ``spans`` supplies payload interpretations for copy ranges; a closed
    range that exactly coincides with a payload span attaches the payload
    subtree instead of the raw slice.
    """
    state = initial_state(o, tokens, spans)
    for instr in instrs:
        state = step(state, instr)
    if not state.finished:
        raise AssembleError("sequence did not END")
    assert state.tree is not None
    tree = MrTree(verb=state.tree.verb, children=_to_public(state.tree.children))
    problem = validate_tree(o, tree)
    if problem is not None:
        raise AssembleError(f"assembled tree is invalid: {problem}")
    return tree
