"""Routing across override, knowledge, and general parsers.

Order matters and is fixed: hand-authored override rules fire on the raw
utterance before any rewriting, because their patterns are written
against what the user literally says; the query rewrite then normalizes
contextual references; the knowledge gate inspects the rewritten form and
short-circuits to a stub query tree; everything else goes to the neural
parser.  Among overrides the most recently added rule wins, so a user
rule can shadow a built-in one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from importlib import resources

from pocketnlu.context import DialogContext, rewrite_query_traced
from pocketnlu.corpus import ROUTE_GENERAL, ROUTE_KNOWLEDGE
from pocketnlu.ontology import Ontology
from pocketnlu.parser.estimator import ContextualParser, ParseResult
from pocketnlu.spans import lemmatize, tokenize
from pocketnlu.trees import EnumLeaf, MrTree, Node, StringLeaf, SubTree, validate_tree

ROUTE_OVERRIDE = "override"

CAPTURE = "<x>"


class OverrideError(Exception):
    pass


@dataclass(frozen=True)
class OverrideRule:
    """A pattern-to-tree mapping for one hero utterance shape.

    ``pattern`` is a lemma sequence; at most one element may be the
    capture marker, which swallows one or more tokens.  ``slots`` assign
    verb-relative dotted attribute paths either the capture or a literal
    (qualified enum members become enum leaves, anything else a string).
    """

    name: str
    pattern: tuple[str, ...]
    verb: str
    slots: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.pattern.count(CAPTURE) > 1:
            raise OverrideError(f"rule {self.name!r}: more than one capture")
        if not self.pattern:
            raise OverrideError(f"rule {self.name!r}: empty pattern")

    def match(self, tokens: Sequence[str], lang: str = "en") -> Optional[str]:
        """The captured text, "" when the rule has no capture, None on
        no match.  The whole utterance must be consumed."""
        lemmas = [lemmatize(t, lang) for t in tokens]
        if CAPTURE not in self.pattern:
            return "" if tuple(lemmas) == self.pattern else None
        at = self.pattern.index(CAPTURE)
        prefix, suffix = self.pattern[:at], self.pattern[at + 1:]
        span = len(tokens) - len(prefix) - len(suffix)
        if span < 1:
            return None
        if tuple(lemmas[:len(prefix)]) != prefix:
            return None
        if suffix and tuple(lemmas[-len(suffix):]) != suffix:
            return None
        return " ".join(tokens[len(prefix):len(prefix) + span])

    def build(self, o: Ontology, capture: str) -> MrTree:
        children: dict[str, list[Node]] = {}
        for path, spec in self.slots:
            value = capture if spec == CAPTURE else spec
            if spec == CAPTURE and not capture:
                raise OverrideError(f"rule {self.name!r}: capture slot without a capture")
            self._place(o, children, self.verb, path.split("."), value)
        tree = MrTree(self.verb, children)
        problem = validate_tree(o, tree)
        if problem is not None:
            raise OverrideError(f"rule {self.name!r} builds an invalid tree: {problem}")
        return tree

    def _place(self, o, children, context, segments, value) -> None:
        local, rest = segments[0], segments[1:]
        attr = o.attrs_of(context).get(local)
        if attr is None:
            raise OverrideError(
                f"rule {self.name!r}: no attribute {local!r} under {context!r}")
        if rest:
            if attr.value_type not in o.types:
                raise OverrideError(
                    f"rule {self.name!r}: {local!r} is a leaf, cannot descend")
            siblings = children.setdefault(attr.qualified, [])
            # reuse a struct child laid down by an earlier slot of this rule
            sub = next((n for n in siblings if isinstance(n, SubTree)), None)
            if sub is None:
                sub = SubTree(attr.value_type, {})
                siblings.append(sub)
            self._place(o, sub.children, attr.value_type, rest, value)
            return
        leaf: Node
        if o.is_enum_member(value):
            leaf = EnumLeaf(value)
        else:
            leaf = StringLeaf(value)
        children.setdefault(attr.qualified, []).append(leaf)


def load_overrides(path, o: Ontology) -> list[OverrideRule]:
    """Read override rules from a tab-separated file and validate each
    against the ontology (a bad rule should fail at load, not at match)."""
    rules = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise OverrideError(f"{path}:{lineno}: expected 3 or 4 fields")
            name, pattern, verb = parts[0], tuple(parts[1].split()), parts[2]
            slots = []
            if len(parts) == 4 and parts[3]:
                for chunk in parts[3].split(";"):
                    slot_path, eq, spec = chunk.partition("=")
                    if not eq:
                        raise OverrideError(f"{path}:{lineno}: slot {chunk!r} has no value")
                    slots.append((slot_path.strip(), spec.strip()))
            if verb not in o.verbs:
                raise OverrideError(f"{path}:{lineno}: unknown verb {verb!r}")
            rule = OverrideRule(name, pattern, verb, tuple(slots))
            rule.build(o, "placeholder")  # path and type errors surface here
            rules.append(rule)
    return rules


def default_gate_words() -> frozenset[str]:
    text = (resources.files("pocketnlu") / "data/gate_keywords.txt").read_text("utf-8")
    return frozenset(w for w in text.split() if w and not w.startswith("#"))


@dataclass
class RouteResult:
    route: str  # override | knowledge | general
    tree: MrTree
    utterance: str
    rewritten: str
    override_rule: Optional[str] = None
    qr_rule: Optional[str] = None
    parse: Optional[ParseResult] = None


class Router:
    """Dispatches each utterance to exactly one parser."""

    def __init__(
        self,
        ontology: Ontology,
        parser: Optional[ContextualParser] = None,
        overrides: Sequence[OverrideRule] = (),
        gate_words: Optional[frozenset[str]] = None,
    ):
        self.ontology = ontology
        self.parser = parser
        self.overrides = list(overrides)
        self.gate_words = default_gate_words() if gate_words is None else gate_words

    def add_override(self, rule: OverrideRule) -> None:
        self.overrides.append(rule)

    def gate(self, text: str) -> bool:
        tokens = tokenize(text)
        return bool(tokens) and tokens[0] in self.gate_words

    def knowledge_tree(self, text: str) -> MrTree:
        return MrTree("Knowledge.query", {"Knowledge.text": [StringLeaf(text)]})

    def route(self, utterance: str, ctx: Optional[DialogContext] = None) -> RouteResult:
        ctx = ctx if ctx is not None else DialogContext()
        tokens = tokenize(utterance)
        for rule in reversed(self.overrides):
            capture = rule.match(tokens)
            if capture is not None:
                return RouteResult(ROUTE_OVERRIDE, rule.build(self.ontology, capture),
                                   utterance, utterance, override_rule=rule.name)
        rewritten, qr_rule = rewrite_query_traced(utterance, ctx)
        if self.gate(rewritten):
            return RouteResult(ROUTE_KNOWLEDGE, self.knowledge_tree(rewritten),
                               utterance, rewritten, qr_rule=qr_rule)
        if self.parser is None:
            raise ValueError("no general parser attached and no other route matched")
        result = self.parser.parse(rewritten, ctx)
        return RouteResult(ROUTE_GENERAL, result.tree, utterance, rewritten,
                           qr_rule=qr_rule, parse=result)
