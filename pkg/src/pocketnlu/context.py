"""Dialog context: system-action features, mentions, and query rewriting.

Three cheap, deterministic mechanisms make single-turn parsing contextual:

* the previous system action becomes a short token sequence the encoder
  reads alongside the utterance,
* heuristic mention rules link referring expressions ("the second from the
  bottom", "it") to entity-store records,
* query rewriting rules turn context-dependent follow-ups ("What about his
  wife?") into self-contained questions before knowledge routing.

Rules live in small data files so they can be extended without touching
code; each file row names an action or resolver implemented here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from pocketnlu.ontology import Ontology
from pocketnlu.spans import (
    EntityRecord,
    EntityStore,
    MatchConfig,
    Span,
    fuzzy_score,
    lemmatize,
    match_spans,
)
from pocketnlu.trees import PROMPT, SystemAction


@dataclass
class DialogContext:
    """Everything the previous turns contribute to parsing the current one."""

    previous_utterances: list[str] = field(default_factory=list)
    previous_action: Optional[SystemAction] = None
    store: EntityStore = field(default_factory=EntityStore)
    screen_length: Optional[int] = None


# ======================================================================
# System-action featurization

SYS_KINDS = ("none", "prompt", "inform", "confirm")


def featurize_system_action(action: Optional[SystemAction]) -> list[str]:
    """Encode the previous system action as context tokens.

    ``Prompt(Flight.book(from=?, departingAt=?))`` becomes
    ``[SYS:PROMPT, SLOT:Flight.from, SLOT:Flight.departingAt]``; prompts
    list the slots being asked for, inform/confirm list the slots being
    reported.  No action at all is the single token ``SYS:NONE``.
    """
    if action is None or action.kind == "none":
        return ["SYS:NONE"]
    tokens = [f"SYS:{action.kind.upper()}"]
    if action.payload is not None:
        if action.kind == PROMPT:
            slots = action.unfilled_attrs()
        else:
            slots = [
                attr
                for attr in action.payload.children
                if attr not in action.unfilled_attrs()
            ]
        tokens.extend(f"SLOT:{attr}" for attr in slots)
    return tokens


def context_token_vocabulary(o: Ontology) -> list[str]:
    """All context tokens an ontology can produce, in deterministic order."""
    vocab = [f"SYS:{kind.upper()}" for kind in SYS_KINDS]
    vocab.extend(f"SLOT:{a.qualified}" for a in sorted(o.all_attrs(), key=lambda a: a.qualified))
    return vocab


# ======================================================================
# Rule files


@dataclass(frozen=True)
class Rule:
    name: str
    pattern: re.Pattern
    action: str


def load_rules(path: str) -> list[Rule]:
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            name, pattern, action = fields
            rules.append(Rule(name=name, pattern=re.compile(pattern, re.IGNORECASE), action=action))
    return rules


def _default_rules(filename: str) -> list[Rule]:
    from importlib.resources import files

    return load_rules(str(files("pocketnlu") / "data" / filename))


# ======================================================================
# Query rewriting

_POSSESSIVE = re.compile(r"^(his|her|its|their)\b\s*", re.IGNORECASE)
_TRAILING_PUNCT = re.compile(r"[?.!\s]+$")
# Capitalized runs ("Barack Obama"), used to spot the focused entity.
_CAP_RUN = re.compile(r"\b[A-Z][\w]*(?:\s+[A-Z][\w]*)*")


def _strip_trailing(text: str) -> str:
    return _TRAILING_PUNCT.sub("", text)


def _focused_entity(prev: str, store: EntityStore) -> Optional[str]:
    """The entity the previous utterance is about.

    Prefer the longest capitalized run that does not start the sentence;
    fall back to the most recent store entity whose canonical form appears
    in the utterance.
    """
    runs = [m for m in _CAP_RUN.finditer(prev) if m.start() != 0]
    if runs:
        return max(runs, key=lambda m: len(m.group())).group()
    lowered = prev.casefold()
    for record in sorted(store, key=lambda r: r.recency):
        if record.canonical.casefold() in lowered:
            return record.canonical
    return None


def _action_replace_focus(match: re.Match, utterance: str, ctx: DialogContext) -> Optional[str]:
    if not ctx.previous_utterances:
        return None
    prev = ctx.previous_utterances[-1]
    x = _strip_trailing(match.group("x"))
    focus = _focused_entity(prev, ctx.store)
    if focus is None:
        return None
    poss = _POSSESSIVE.match(x)
    if poss:
        x = f"{focus}'s {x[poss.end():]}".rstrip()
    return _strip_trailing(prev.replace(focus, x, 1))


def _action_replace_closest(match: re.Match, utterance: str, ctx: DialogContext) -> Optional[str]:
    if not ctx.previous_utterances:
        return None
    prev = ctx.previous_utterances[-1]
    x = _strip_trailing(match.group("x"))
    words = prev.split()
    if not words:
        return None

    def norm(tokens: Sequence[str]) -> str:
        return " ".join(t.strip(".,!?;:()[]\"").casefold() for t in tokens)

    target = norm(x.split())
    widths = {w for w in (len(x.split()) - 1, len(x.split()), len(x.split()) + 1) if w >= 1}
    best: Optional[tuple[float, int, int]] = None
    for width in sorted(widths):
        for start in range(len(words) - width + 1):
            score = fuzzy_score(norm(words[start : start + width]), target)
            if best is None or score > best[0]:
                best = (score, start, width)
    if best is None or best[0] < 0.5:
        return None
    _, start, width = best
    replaced = words[:start] + x.split() + words[start + width :]
    return _strip_trailing(" ".join(replaced))


_BARE_PRONOUNS = {"it", "that", "him", "them", "her"}
_POSS_PRONOUNS = {"his", "its", "their", "her"}


def _action_substitute_top(match: re.Match, utterance: str, ctx: DialogContext) -> Optional[str]:
    top = ctx.store.most_recent()
    if top is None:
        return None
    words = utterance.split()
    for i, word in enumerate(words):
        bare = word.strip(".,!?;:").casefold()
        # "her"/"his" followed by a word act as possessives.
        if bare in _POSS_PRONOUNS and i + 1 < len(words):
            words[i] = f"{top.canonical}'s"
            return _strip_trailing(" ".join(words))
        if bare in _BARE_PRONOUNS:
            words[i] = top.canonical
            return _strip_trailing(" ".join(words))
    return None


_QR_ACTIONS: dict[str, Callable[[re.Match, str, DialogContext], Optional[str]]] = {
    "replace_focus": _action_replace_focus,
    "replace_closest": _action_replace_closest,
    "substitute_top": _action_substitute_top,
}


def rewrite_query_traced(
    utterance: str, ctx: DialogContext, rules: Optional[list[Rule]] = None
) -> tuple[str, Optional[str]]:
    """Rewrite plus the name of the rule that fired (None if untouched)."""
    if rules is None:
        rules = _default_rules("qr_rules.tsv")
    for rule in rules:
        match = rule.pattern.search(utterance)
        if match is None:
            continue
        action = _QR_ACTIONS.get(rule.action)
        if action is None:
            raise ValueError(f"rule {rule.name!r} names unknown action {rule.action!r}")
        result = action(match, utterance, ctx)
        if result is not None:
            return result, rule.name
    return utterance, None


def rewrite_query(
    utterance: str, ctx: DialogContext, rules: Optional[list[Rule]] = None
) -> str:
    """Make a context-dependent follow-up self-contained.

    At most one rule fires; an utterance no rule matches comes back
    unchanged, and rewriting is idempotent (a rewritten utterance no longer
    matches any rule's trigger pattern).
    """
    return rewrite_query_traced(utterance, ctx, rules)[0]


# ======================================================================
# Mention detection


@dataclass(frozen=True)
class Mention:
    """A referring expression resolved against the entity store."""

    start: int
    end: int
    entity_id: str
    rule: str


_ORDINALS = {
    "first": 1,
    "second": 2,
    "third": 3,
    "fourth": 4,
    "fifth": 5,
    "sixth": 6,
    "seventh": 7,
    "eighth": 8,
    "ninth": 9,
    "tenth": 10,
}


def _ordinal_value(word: str) -> Optional[int]:
    word = word.casefold()
    if word in _ORDINALS:
        return _ORDINALS[word]
    m = re.fullmatch(r"(\d+)(?:st|nd|rd|th)", word)
    return int(m.group(1)) if m else None


def _char_to_token_span(tokens: Sequence[str], start: int, end: int) -> tuple[int, int]:
    """Map a character span of the joined utterance back to token indexes."""
    joined_pos = 0
    first = last = 0
    for i, tok in enumerate(tokens):
        tok_start, tok_end = joined_pos, joined_pos + len(tok)
        if tok_start <= start < tok_end or (start <= tok_start and tok_end <= end):
            if tok_start <= start < tok_end:
                first = i
            if tok_start < end:
                last = i
        joined_pos = tok_end + 1
    return first, last


def _screen_items(ctx: DialogContext) -> list[EntityRecord]:
    # Insertion order of screen records mirrors top-to-bottom list order.
    return ctx.store.by_source("screen")


def _resolve_screen(ctx: DialogContext, match: re.Match, from_bottom: bool) -> Optional[str]:
    k = _ordinal_value(match.group("ord"))
    if k is None:
        return None
    items = _screen_items(ctx)
    length = ctx.screen_length if ctx.screen_length is not None else len(items)
    if not items or length < k:
        return None
    index = length - k if from_bottom else k - 1
    if not 0 <= index < len(items):
        return None
    return items[index].id


def _resolve_recent_compatible(
    ctx: DialogContext, tokens: Sequence[str], match: re.Match
) -> Optional[str]:
    labels = {r.label for r in ctx.store}
    wanted = {lemmatize(t) for t in tokens} & labels
    record = ctx.store.most_recent(wanted or None)
    return record.id if record else None


def _resolve_possessor(ctx: DialogContext, match: re.Match) -> Optional[str]:
    owner = match.group("owner").casefold()
    best: Optional[tuple[float, EntityRecord]] = None
    for record in ctx.store:
        for form in record.surface_forms():
            score = fuzzy_score(lemmatize(owner), lemmatize(form))
            if score >= 0.8 and (best is None or score > best[0]):
                best = (score, record)
    return best[1].id if best else None


def detect_mentions(
    tokens: Sequence[str],
    ctx: DialogContext,
    rules: Optional[list[Rule]] = None,
) -> list[Mention]:
    """Find referring expressions and resolve them to store records.

    Rules run in file order over the joined token sequence; every
    resolvable, non-overlapping match becomes a mention.  Unresolvable
    matches (no screen items, empty store) are simply skipped.
    """
    if rules is None:
        rules = _default_rules("mention_rules.tsv")
    joined = " ".join(tokens)
    mentions: list[Mention] = []

    def taken(a: int, b: int) -> bool:
        return any(m.start <= b and a <= m.end for m in mentions)

    for rule in rules:
        for match in rule.pattern.finditer(joined):
            entity_id: Optional[str] = None
            if rule.action == "screen_from_bottom":
                entity_id = _resolve_screen(ctx, match, from_bottom=True)
            elif rule.action == "screen_from_top":
                entity_id = _resolve_screen(ctx, match, from_bottom=False)
            elif rule.action == "recent_compatible":
                entity_id = _resolve_recent_compatible(ctx, tokens, match)
            elif rule.action == "possessor_entity":
                entity_id = _resolve_possessor(ctx, match)
            else:
                raise ValueError(f"rule {rule.name!r} names unknown resolver {rule.action!r}")
            if entity_id is None:
                continue
            start, end = _char_to_token_span(tokens, match.start(), match.end())
            if not taken(start, end):
                mentions.append(Mention(start=start, end=end, entity_id=entity_id, rule=rule.name))
    mentions.sort(key=lambda m: m.start)
    return mentions


def mentions_to_spans(mentions: Sequence[Mention], store: EntityStore) -> list[Span]:
    spans = []
    for m in mentions:
        record = store.get(m.entity_id)
        if record is None:
            continue
        spans.append(
            Span(
                start=m.start,
                end=m.end,
                label=record.label,
                entity_id=record.id,
                score=1.0,
                payload=record.payload,
            )
        )
    return spans


# ======================================================================
# Carryover and the combined featurization used at parse and train time


def carryover_spans(o: Ontology, tokens: Sequence[str], ctx: DialogContext) -> list[Span]:
    """Virtual spans for slots filled in earlier turns.

    When the system just prompted for missing slots of a verb, every other
    slot of that verb that a previous turn filled is still part of what the
    user means.  Each such stored value becomes a payload span anchored at
    successive token positions; copying the anchor attaches the stored
    subtree.
    """
    action = ctx.previous_action
    if action is None or action.kind != PROMPT or action.payload is None:
        return []
    verb = action.payload.verb
    if verb not in o.verbs:
        return []
    unfilled = set(action.unfilled_attrs())
    spans: list[Span] = []
    anchor = 0
    for attr in o.verbs[verb].attrs.values():
        if attr.qualified in unfilled:
            continue
        record = _latest_slot_record(ctx.store, attr.qualified)
        if record is None or record.payload is None:
            continue
        if anchor >= len(tokens):
            break
        spans.append(
            Span(
                start=anchor,
                end=anchor,
                label="carryover",
                entity_id=record.id,
                score=1.0,
                payload=record.payload,
            )
        )
        anchor += 1
    return spans


def _latest_slot_record(store: EntityStore, qualified: str) -> Optional[EntityRecord]:
    return store.most_recent({f"slot:{qualified}"})


def featurize_inputs(
    o: Ontology,
    tokens: Sequence[str],
    ctx: DialogContext,
    match_cfg: Optional[MatchConfig] = None,
    mention_rules: Optional[list[Rule]] = None,
) -> tuple[list[Span], list[str]]:
    """Spans plus context tokens for one turn, the parser's full input.

    Span sources are combined with a fixed precedence: carryover anchors,
    then resolved mentions, then fuzzy text matches; overlaps resolve in
    that order (score-descending within a source) so the result is
    overlap-free.
    """
    carry = carryover_spans(o, tokens, ctx)
    mention_spans = mentions_to_spans(detect_mentions(tokens, ctx, mention_rules), ctx.store)
    text_spans = match_spans(tokens, ctx.store, match_cfg)

    chosen: list[Span] = []
    for group in (carry, mention_spans, text_spans):
        for span in sorted(group, key=lambda s: (-s.score, s.start)):
            if not any(span.overlaps(existing) for existing in chosen):
                chosen.append(span)
    chosen.sort(key=lambda s: s.start)
    return chosen, featurize_system_action(ctx.previous_action)
