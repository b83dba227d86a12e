"""Hierarchical meaning representations and the flat projection of them.

A meaning representation is a tree: a verb at the root, attribute-labeled
edges, and leaves that are either copied strings or enum members.  Trees are
treated as immutable after construction and compared as multisets under
repeatable attributes, so sibling order never matters for equality.

The flat projection (:func:`flatten`) collapses a tree into intent + slot
pairs the way span-tagging dialog systems do.  It exists so the two
representations can be compared head to head; :func:`frames_equal` documents
exactly where the flat form loses information.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from pocketnlu.ontology import STRING, Ontology


class TreeSyntaxError(Exception):
    """Raised when a rendered tree or action string fails to parse."""


@dataclass
class StringLeaf:
    text: str


@dataclass
class EnumLeaf:
    member: str  # qualified, e.g. "DayOfWeek.Sunday"


@dataclass
class UnfilledLeaf:
    """Placeholder for a slot the system is asking the user to fill."""


@dataclass
class SubTree:
    type_name: str
    children: dict[str, list["Node"]] = field(default_factory=dict)


Node = Union[StringLeaf, EnumLeaf, UnfilledLeaf, SubTree]


@dataclass
class MrTree:
    verb: str  # qualified, e.g. "Alarm.create"
    children: dict[str, list[Node]] = field(default_factory=dict)


# Kinds of system action a turn can respond with.
PROMPT = "prompt"
INFORM = "inform"
CONFIRM = "confirm"
NONE = "none"
ACTION_KINDS = (PROMPT, INFORM, CONFIRM, NONE)


@dataclass
class SystemAction:
    """What the system did after a turn; context for the following turn."""

    kind: str = NONE
    payload: Optional[MrTree] = None

    def unfilled_attrs(self) -> list[str]:
        """Qualified attribute names holding an unfilled placeholder."""
        if self.payload is None:
            return []
        out = []
        for attr, nodes in self.payload.children.items():
            if any(isinstance(n, UnfilledLeaf) for n in nodes):
                out.append(attr)
        return out


@dataclass(frozen=True)
class FlatFrame:
    """Intent plus (slot name, value) pairs; the non-hierarchical projection."""

    intent: str
    slots: tuple[tuple[str, str], ...]


# ======================================================================
# Validation


def validate_tree(
    ontology: Ontology, tree: MrTree, allow_unfilled: bool = False
) -> Optional[str]:
    """Return the first structural violation, or None when the tree is valid.

    Checks verb/attribute/type agreement with the ontology, cardinality of
    non-repeatable attributes, enum membership, and non-empty string leaves.
    ``allow_unfilled`` admits placeholder leaves (system prompt payloads).
    """
    if tree.verb not in ontology.verbs:
        return f"unknown verb {tree.verb!r}"
    return _validate_children(ontology, tree.verb, tree.children, allow_unfilled)


def _validate_children(
    ontology: Ontology,
    context: str,
    children: dict[str, list[Node]],
    allow_unfilled: bool,
) -> Optional[str]:
    attrs = {a.qualified: a for a in ontology.attrs_of(context).values()}
    for qualified, nodes in children.items():
        attr = attrs.get(qualified)
        if attr is None:
            return f"{qualified!r} is not an attribute of {context!r}"
        if not nodes:
            return f"{qualified!r} present with no children"
        if not attr.repeatable and len(nodes) > 1:
            return f"{qualified!r} is not repeatable but has {len(nodes)} children"
        for node in nodes:
            problem = _validate_node(ontology, attr.value_type, node, allow_unfilled)
            if problem is not None:
                return f"{qualified}: {problem}"
    return None


def _validate_node(
    ontology: Ontology, value_type: str, node: Node, allow_unfilled: bool
) -> Optional[str]:
    if isinstance(node, UnfilledLeaf):
        return None if allow_unfilled else "unfilled leaf in a completed tree"
    if value_type == STRING:
        if not isinstance(node, StringLeaf):
            return f"expected string leaf, got {type(node).__name__}"
        if not node.text.strip():
            return "empty string leaf"
        return None
    if value_type in ontology.enums:
        if not isinstance(node, EnumLeaf):
            return f"expected {value_type} member, got {type(node).__name__}"
        if ontology.member_enum(node.member) != value_type:
            return f"{node.member!r} is not a member of {value_type}"
        return None
    if value_type in ontology.types:
        if not isinstance(node, SubTree):
            return f"expected {value_type} subtree, got {type(node).__name__}"
        if node.type_name != value_type:
            return f"subtree typed {node.type_name!r}, expected {value_type!r}"
        if not node.children:
            return f"{value_type} subtree with no children"
        return _validate_children(ontology, value_type, node.children, allow_unfilled)
    return f"undefined value type {value_type!r}"


# ======================================================================
# Equality


def normalize_string(text: str) -> str:
    return " ".join(text.casefold().split())


def _node_key(node: Node):
    if isinstance(node, StringLeaf):
        return ("s", normalize_string(node.text))
    if isinstance(node, EnumLeaf):
        return ("e", node.member)
    if isinstance(node, UnfilledLeaf):
        return ("u",)
    return ("t", node.type_name, _children_key(node.children))


def _children_key(children: dict[str, list[Node]]):
    return tuple(
        (attr, tuple(sorted(_node_key(n) for n in nodes)))
        for attr, nodes in sorted(children.items())
    )


def tree_key(tree: MrTree):
    """Canonical hashable form; two trees match exactly iff their keys equal."""
    return ("v", tree.verb, _children_key(tree.children))


def exact_match(t1: MrTree, t2: MrTree) -> bool:
    """Order-insensitive tree equality.

    Children of repeatable attributes compare as multisets, string leaves
    compare case-insensitively with whitespace collapsed, enum leaves by
    qualified member name.
    """
    return tree_key(t1) == tree_key(t2)


# ======================================================================
# Flattening


def flatten(tree: MrTree) -> FlatFrame:
    """Project a tree onto intent + slot pairs.

    Slot names join attribute local names with dots; siblings under a
    repeatable attribute get ``#index`` suffixes.  The projection keeps leaf
    values but forgets how siblings group at depth, which is exactly the
    information :func:`frames_equal` documents as lost.
    """
    slots: list[tuple[str, str]] = []
    _flatten_children(tree.children, "", slots)
    return FlatFrame(intent=tree.verb, slots=tuple(slots))


def _flatten_children(
    children: dict[str, list[Node]], prefix: str, out: list[tuple[str, str]]
) -> None:
    for qualified, nodes in children.items():
        local = qualified.partition(".")[2]
        for index, node in enumerate(nodes):
            name = f"{prefix}{local}#{index}" if len(nodes) > 1 else f"{prefix}{local}"
            if isinstance(node, StringLeaf):
                out.append((name, node.text))
            elif isinstance(node, EnumLeaf):
                out.append((name, node.member.partition(".")[2]))
            elif isinstance(node, UnfilledLeaf):
                out.append((name, "?"))
            else:
                _flatten_children(node.children, name + ".", out)


_INDEX_RE = re.compile(r"#\d+")


def frames_equal(f1: FlatFrame, f2: FlatFrame) -> bool:
    """Flat-frame equality: intents match and slots match as a multiset
    after erasing repeatable indices and normalizing values.

    Erasing indices makes single-vs-multi indexing irrelevant and sibling
    order irrelevant, matching tree equality for shallow trees.  It also
    means the flat form cannot tell apart trees that regroup leaves across
    same-typed siblings below depth two; that lossiness is inherent to the
    projection and is pinned by a test.
    """
    if f1.intent != f2.intent:
        return False

    def canon(frame: FlatFrame):
        return sorted(
            (_INDEX_RE.sub("", name), normalize_string(value))
            for name, value in frame.slots
        )

    return canon(f1) == canon(f2)


# ======================================================================
# Canonical textual rendering


def render_node(node: Node) -> str:
    if isinstance(node, StringLeaf):
        return json.dumps(node.text)
    if isinstance(node, EnumLeaf):
        return node.member.partition(".")[2]
    if isinstance(node, UnfilledLeaf):
        return "?"
    return f"{node.type_name}({_render_children(node.children)})"


def _render_children(children: dict[str, list[Node]]) -> str:
    parts = []
    for qualified, nodes in children.items():
        local = qualified.partition(".")[2]
        if len(nodes) == 1:
            parts.append(f"{local}={render_node(nodes[0])}")
        else:
            parts.append(f"{local}=[{', '.join(render_node(n) for n in nodes)}]")
    return ", ".join(parts)


def render_tree(tree: MrTree) -> str:
    """Human-readable form, e.g.
    ``Alarm.create(name="fishing trip", recurrence=DateTime(dayOfWeek=Sunday))``.
    """
    return f"{tree.verb}({_render_children(tree.children)})"


def render_action(action: Optional[SystemAction]) -> str:
    if action is None or action.kind == NONE:
        return "None"
    label = action.kind.capitalize()
    if action.payload is None:
        return f"{label}()"
    return f"{label}({render_tree(action.payload)})"


# ======================================================================
# Parsing the rendering back (round-trip for CLI output and override files)

_TOKEN_RE = re.compile(
    r"""\s*(?:(?P<str>"(?:[^"\\]|\\.)*")|(?P<punct>[()\[\],=?])|(?P<name>[A-Za-z_][A-Za-z0-9_.]*))"""
)


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def next(self) -> Optional[tuple[str, str]]:
        if self.pos >= len(self.text):
            return None
        m = _TOKEN_RE.match(self.text, self.pos)
        if m is None or m.end() == self.pos:
            raise TreeSyntaxError(f"bad character at offset {self.pos}: {self.text[self.pos:self.pos + 10]!r}")
        self.pos = m.end()
        if m.group("str") is not None:
            return ("str", json.loads(m.group("str")))
        if m.group("punct") is not None:
            return ("punct", m.group("punct"))
        return ("name", m.group("name"))

    def expect(self, kind: str, value: Optional[str] = None) -> str:
        tok = self.next()
        if tok is None or tok[0] != kind or (value is not None and tok[1] != value):
            raise TreeSyntaxError(f"expected {value or kind}, got {tok!r}")
        return tok[1]

    def peek(self) -> Optional[tuple[str, str]]:
        saved = self.pos
        tok = self.next()
        self.pos = saved
        return tok


def parse_tree(ontology: Ontology, text: str) -> MrTree:
    """Parse the canonical rendering back into a tree.

    Attribute and enum member names appear in local form; the ontology
    disambiguates them from the enclosing verb or type context.
    """
    scanner = _Scanner(text)
    verb = scanner.expect("name")
    if verb not in ontology.verbs:
        raise TreeSyntaxError(f"unknown verb {verb!r}")
    scanner.expect("punct", "(")
    children = _parse_children(ontology, verb, scanner)
    if scanner.next() is not None:
        raise TreeSyntaxError("trailing text after tree")
    return MrTree(verb=verb, children=children)


def parse_action(ontology: Ontology, text: str) -> SystemAction:
    text = text.strip()
    if text == "None":
        return SystemAction()
    kind, _, rest = text.partition("(")
    kind = kind.strip().lower()
    if kind not in (PROMPT, INFORM, CONFIRM):
        raise TreeSyntaxError(f"unknown action kind {kind!r}")
    if not rest.endswith(")"):
        raise TreeSyntaxError("unterminated action")
    inner = rest[:-1].strip()
    payload = parse_tree(ontology, inner) if inner else None
    return SystemAction(kind=kind, payload=payload)


def _parse_children(
    ontology: Ontology, context: str, scanner: _Scanner
) -> dict[str, list[Node]]:
    children: dict[str, list[Node]] = {}
    tok = scanner.peek()
    if tok == ("punct", ")"):
        scanner.next()
        return children
    while True:
        local = scanner.expect("name")
        attr = ontology.attrs_of(context).get(local)
        if attr is None:
            raise TreeSyntaxError(f"{local!r} is not an attribute of {context!r}")
        scanner.expect("punct", "=")
        if scanner.peek() == ("punct", "["):
            scanner.next()
            nodes = [_parse_value(ontology, attr.value_type, scanner)]
            while scanner.peek() == ("punct", ","):
                scanner.next()
                nodes.append(_parse_value(ontology, attr.value_type, scanner))
            scanner.expect("punct", "]")
        else:
            nodes = [_parse_value(ontology, attr.value_type, scanner)]
        children.setdefault(attr.qualified, []).extend(nodes)
        tok = scanner.next()
        if tok == ("punct", ")"):
            return children
        if tok != ("punct", ","):
            raise TreeSyntaxError(f"expected ',' or ')', got {tok!r}")


def _parse_value(ontology: Ontology, value_type: str, scanner: _Scanner) -> Node:
    tok = scanner.next()
    if tok is None:
        raise TreeSyntaxError("unexpected end of input")
    kind, value = tok
    if kind == "punct" and value == "?":
        return UnfilledLeaf()
    if kind == "str":
        return StringLeaf(text=value)
    if kind == "name":
        if value_type in ontology.enums:
            qualified = f"{value_type}.{value}"
            if not ontology.is_enum_member(qualified):
                raise TreeSyntaxError(f"{value!r} is not a member of {value_type}")
            return EnumLeaf(member=qualified)
        if value_type in ontology.types:
            if value != value_type:
                raise TreeSyntaxError(f"expected {value_type} subtree, got {value!r}")
            scanner.expect("punct", "(")
            children = _parse_children(ontology, value_type, scanner)
            return SubTree(type_name=value_type, children=children)
    raise TreeSyntaxError(f"unexpected {tok!r} for value of type {value_type!r}")


# ======================================================================
# Structured serialization (the corpus format)


def tree_to_json(tree: Optional[MrTree]) -> Optional[dict]:
    if tree is None:
        return None
    return {"verb": tree.verb, "children": _children_to_json(tree.children)}


def _children_to_json(children: dict[str, list[Node]]) -> dict:
    return {attr: [_node_to_json(n) for n in nodes] for attr, nodes in children.items()}


def _node_to_json(node: Node) -> dict:
    if isinstance(node, StringLeaf):
        return {"string": node.text}
    if isinstance(node, EnumLeaf):
        return {"enum": node.member}
    if isinstance(node, UnfilledLeaf):
        return {"unfilled": True}
    return {"type": node.type_name, "children": _children_to_json(node.children)}


def tree_from_json(obj: Optional[dict]) -> Optional[MrTree]:
    if obj is None:
        return None
    return MrTree(verb=obj["verb"], children=_children_from_json(obj["children"]))


def _children_from_json(obj: dict) -> dict[str, list[Node]]:
    return {attr: [_node_from_json(n) for n in nodes] for attr, nodes in obj.items()}


def _node_from_json(obj: dict) -> Node:
    if "string" in obj:
        return StringLeaf(text=obj["string"])
    if "enum" in obj:
        return EnumLeaf(member=obj["enum"])
    if obj.get("unfilled"):
        return UnfilledLeaf()
    return SubTree(type_name=obj["type"], children=_children_from_json(obj["children"]))


def action_to_json(action: Optional[SystemAction]) -> Optional[dict]:
    if action is None or action.kind == NONE:
        return None
    return {"kind": action.kind, "payload": tree_to_json(action.payload)}


def action_from_json(obj: Optional[dict]) -> SystemAction:
    if obj is None:
        return SystemAction()
    return SystemAction(kind=obj["kind"], payload=tree_from_json(obj.get("payload")))
