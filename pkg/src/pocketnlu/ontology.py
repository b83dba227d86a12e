"""Ontology: the typed vocabulary that grounds every meaning representation.

An ontology declares domains, verbs (actions a device can perform), typed
attributes, structured value types, and enumerations.  Every node in a parse
tree, every decoder output symbol, and every synthetic-corpus template is
validated against it, so the ontology file is the single place where the
assistant's capabilities are written down.

Qualified names use ``Owner.local`` form throughout: ``Alarm.create`` is a
verb, ``Alarm.name`` an attribute, ``DateTime.dayOfWeek`` an attribute of a
value type, ``DayOfWeek.Sunday`` an enum member.  Qualified names are globally
unique; the loader rejects collisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

# The only primitive leaf type.  String slots are filled by copying a
# contiguous utterance slice; every other leaf is an enum member.
STRING = "string"

# Control symbols of the instruction language, in canonical vocabulary order.
NEXT = "NEXT"
COPY = "COPY"
FLUSH = "FLUSH"
END = "END"
CONTROL_SYMBOLS = (NEXT, COPY, FLUSH, END)


class OntologyError(Exception):
    """Raised for unparseable or inconsistent ontology files."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PathError(Exception):
    """Raised when a segment sequence does not follow ontology edges."""


@dataclass
class AttrDef:
    """A named, typed slot on a verb or value type.

    ``value_type`` is either :data:`STRING`, a type name, or an enum name.
    Repeatable attributes may hold several children; all others at most one.
    """

    name: str
    qualified: str
    owner: str
    value_type: str
    repeatable: bool = False


@dataclass
class VerbDef:
    name: str
    qualified: str
    domain: str
    attrs: dict[str, AttrDef] = field(default_factory=dict)


@dataclass
class TypeDef:
    name: str
    attrs: dict[str, AttrDef] = field(default_factory=dict)


@dataclass
class EnumDef:
    name: str
    members: tuple[str, ...] = ()

    def qualified_members(self) -> list[str]:
        return [f"{self.name}.{m}" for m in self.members]


@dataclass
class Ontology:
    """Parsed ontology plus lookup tables used by the rest of the pipeline."""

    domains: tuple[str, ...]
    verbs: dict[str, VerbDef]
    types: dict[str, TypeDef]
    enums: dict[str, EnumDef]
    # Qualified enum member -> surface lemmas that evoke it in an utterance.
    triggers: dict[str, tuple[str, ...]] = field(default_factory=dict)

    # ------------------------------------------------------------------
    # Lookups

    def attr(self, qualified: str) -> Optional[AttrDef]:
        owner, _, local = qualified.partition(".")
        for verb in self.verbs.values():
            if verb.domain == owner and local in verb.attrs:
                return verb.attrs[local]
        t = self.types.get(owner)
        if t is not None:
            return t.attrs.get(local)
        return None

    def attrs_of(self, context: str) -> dict[str, AttrDef]:
        """Attributes available under a verb (by qualified name) or type."""
        if context in self.verbs:
            return self.verbs[context].attrs
        if context in self.types:
            return self.types[context].attrs
        return {}

    def is_verb(self, symbol: str) -> bool:
        return symbol in self.verbs

    def is_enum_member(self, symbol: str) -> bool:
        enum, _, member = symbol.partition(".")
        e = self.enums.get(enum)
        return e is not None and member in e.members

    def member_enum(self, symbol: str) -> Optional[str]:
        enum = symbol.partition(".")[0]
        return enum if self.is_enum_member(symbol) else None

    def all_attrs(self) -> Iterator[AttrDef]:
        for verb in self.verbs.values():
            yield from verb.attrs.values()
        for t in self.types.values():
            yield from t.attrs.values()

    # ------------------------------------------------------------------
    # Reachability, used by alignment and by the decode legality mask.

    def string_reachable(self, context: str) -> bool:
        """True if some attribute path from ``context`` ends at a string slot."""
        return self._reaches(context, STRING)

    def type_reachable(self, context: str, type_name: str) -> bool:
        """True if some attribute under ``context`` is typed ``type_name``."""
        return self._reaches(context, type_name)

    def _reaches(self, context: str, target: str, _seen: frozenset = frozenset()) -> bool:
        if context in _seen:
            return False
        for a in self.attrs_of(context).values():
            if a.value_type == target:
                return True
            if a.value_type in self.types and self._reaches(
                a.value_type, target, _seen | {context}
            ):
                return True
        return False


# ======================================================================
# Loading


def load_ontology(path: str) -> Ontology:
    """Parse an ontology file.

    The format is line based::

        domain Alarm
        verb Alarm.create
          name: string
          recurrence: DateTime
        type DateTime
          dayOfWeek: DayOfWeek
        enum DayOfWeek
          Sunday

    Raises :class:`OntologyError` with a line number for syntax errors and
    duplicate qualified names.  Semantic problems that leave the file
    parseable (dangling type references, cycles, orphan types) are reported
    by :func:`lint` instead.
    """
    domains: list[str] = []
    verbs: dict[str, VerbDef] = {}
    types: dict[str, TypeDef] = {}
    enums: dict[str, EnumDef] = {}
    seen: dict[str, int] = {}  # qualified name -> defining line

    def claim(name: str, lineno: int) -> None:
        if name in seen:
            raise OntologyError(
                f"duplicate qualified name {name!r} (first defined on line {seen[name]})",
                lineno,
            )
        seen[name] = lineno

    block: Optional[tuple[str, object]] = None  # ("verb", VerbDef) etc.

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            indented = line[0] in " \t"
            text = line.strip()

            if not indented:
                block = None
                keyword, _, rest = text.partition(" ")
                rest = rest.strip()
                if not rest:
                    raise OntologyError(f"{keyword!r} needs a name", lineno)
                if keyword == "domain":
                    if rest in domains:
                        raise OntologyError(f"duplicate domain {rest!r}", lineno)
                    domains.append(rest)
                elif keyword == "verb":
                    domain, dot, local = rest.partition(".")
                    if not dot or not local:
                        raise OntologyError(
                            f"verb name must be Domain.name, got {rest!r}", lineno
                        )
                    if domain not in domains:
                        raise OntologyError(f"unknown domain {domain!r}", lineno)
                    claim(rest, lineno)
                    verb = VerbDef(name=local, qualified=rest, domain=domain)
                    verbs[rest] = verb
                    block = ("verb", verb)
                elif keyword == "type":
                    claim(rest, lineno)
                    t = TypeDef(name=rest)
                    types[rest] = t
                    block = ("type", t)
                elif keyword == "enum":
                    claim(rest, lineno)
                    e = EnumDef(name=rest)
                    enums[rest] = e
                    block = ("enum", e)
                else:
                    raise OntologyError(f"unknown directive {keyword!r}", lineno)
                continue

            if block is None:
                raise OntologyError("indented line outside a block", lineno)
            kind, owner = block
            if kind == "enum":
                assert isinstance(owner, EnumDef)
                member = text
                if not member.isidentifier():
                    raise OntologyError(f"bad enum member {member!r}", lineno)
                claim(f"{owner.name}.{member}", lineno)
                owner.members = owner.members + (member,)
                continue

            # Attribute line: "name: Type [repeated]"
            name, colon, spec_text = text.partition(":")
            if not colon:
                raise OntologyError(f"expected 'name: type', got {text!r}", lineno)
            name = name.strip()
            parts = spec_text.split()
            if not parts or len(parts) > 2 or (len(parts) == 2 and parts[1] != "repeated"):
                raise OntologyError(f"bad attribute spec {text!r}", lineno)
            value_type = parts[0]
            repeatable = len(parts) == 2
            owner_name = owner.domain if kind == "verb" else owner.name  # type: ignore[union-attr]
            qualified = f"{owner_name}.{name}"
            claim(qualified, lineno)
            attr = AttrDef(
                name=name,
                qualified=qualified,
                owner=owner_name,
                value_type=value_type,
                repeatable=repeatable,
            )
            owner.attrs[name] = attr  # type: ignore[union-attr]

    return Ontology(domains=tuple(domains), verbs=verbs, types=types, enums=enums)


def load_triggers(ontology: Ontology, path: str) -> None:
    """Load the enum trigger lexicon (member TAB lemma [TAB lemma ...])."""
    triggers: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split("\t")
            member, lemmas = fields[0], tuple(fields[1:])
            if not ontology.is_enum_member(member):
                raise OntologyError(f"trigger for unknown enum member {member!r}", lineno)
            if not lemmas:
                raise OntologyError(f"no lemmas for {member!r}", lineno)
            triggers[member] = lemmas
    ontology.triggers.update(triggers)


# ======================================================================
# Linting


def lint(ontology: Ontology) -> list[str]:
    """Report semantic problems: dangling references, cycles, orphan types.

    Returns a list of human-readable violations; empty means clean.
    """
    violations: list[str] = []
    known = set(ontology.types) | set(ontology.enums) | {STRING}
    for attr in ontology.all_attrs():
        if attr.value_type not in known:
            violations.append(
                f"{attr.qualified}: reference to undefined type {attr.value_type!r}"
            )

    # Cycles in the type reference graph make trees unbounded.
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {name: WHITE for name in ontology.types}

    def visit(name: str, trail: tuple[str, ...]) -> None:
        color[name] = GRAY
        for attr in ontology.types[name].attrs.values():
            ref = attr.value_type
            if ref not in ontology.types:
                continue
            if color[ref] == GRAY:
                cycle = " -> ".join(trail + (name, ref))
                violations.append(f"attribute cycle: {cycle}")
            elif color[ref] == WHITE:
                visit(ref, trail + (name,))
        color[name] = BLACK

    for name in ontology.types:
        if color[name] == WHITE:
            visit(name, ())

    # Every type and enum should be reachable from some verb.
    reachable: set[str] = set()
    frontier = [v.qualified for v in ontology.verbs.values()]
    while frontier:
        ctx = frontier.pop()
        for attr in ontology.attrs_of(ctx).values():
            ref = attr.value_type
            if ref in known and ref != STRING and ref not in reachable:
                reachable.add(ref)
                if ref in ontology.types:
                    frontier.append(ref)
    for name in list(ontology.types) + list(ontology.enums):
        if name not in reachable:
            violations.append(f"orphan type {name!r}: not reachable from any verb")

    for enum in ontology.enums.values():
        if not enum.members:
            violations.append(f"enum {enum.name!r} has no members")

    return violations


# ======================================================================
# Paths


@dataclass(frozen=True)
class Path:
    """A validated chain of qualified names from a verb toward a leaf."""

    segments: tuple[str, ...]

    def __iter__(self) -> Iterator[str]:
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)


def validate_path(
    ontology: Ontology, segments: Iterable[str], root: Optional[str] = None
) -> Path:
    """Check that consecutive segments follow ontology edges.

    The first segment must be a verb, or an attribute of ``root`` when a root
    verb is given.  Edges: verb -> its attribute; struct-typed attribute ->
    attribute of its value type; enum-typed attribute -> member of its enum.
    A string-typed attribute is terminal.  Raises :class:`PathError` naming
    the offending pair.
    """
    segs = tuple(segments)
    if not segs:
        raise PathError("empty path")

    first = segs[0]
    if ontology.is_verb(first):
        context = first
        rest = segs[1:]
    elif root is not None:
        if not ontology.is_verb(root):
            raise PathError(f"root {root!r} is not a verb")
        context = root
        rest = segs
    else:
        raise PathError(f"path must start at a verb, got {first!r}")

    for seg in rest:
        attrs = ontology.attrs_of(context)
        attr = next((a for a in attrs.values() if a.qualified == seg), None)
        if attr is not None:
            vt = attr.value_type
            if vt == STRING:
                context = STRING
            elif vt in ontology.types or vt in ontology.enums:
                context = vt
            else:
                raise PathError(f"{seg!r} has undefined type {vt!r}")
            continue
        if context in ontology.enums and ontology.member_enum(seg) == context:
            context = f"member:{seg}"
            continue
        raise PathError(f"illegal edge {context!r} -> {seg!r}")

    return Path(segs)


def path_is_complete(ontology: Ontology, path: Path) -> bool:
    """A complete path ends at an enum member or a string-typed attribute."""
    last = path.segments[-1]
    if ontology.is_enum_member(last):
        return True
    attr = ontology.attr(last)
    return attr is not None and attr.value_type == STRING


# ======================================================================
# Decoder vocabulary


def symbol_vocabulary(ontology: Ontology) -> list[str]:
    """Deterministic decoder output vocabulary.

    Sorted qualified names (verbs, attributes, enum members) followed by the
    four control symbols in fixed order.  The mapping between symbols and
    indices must be bijective and reproducible across runs, since model
    checkpoints store symbol indices.
    """
    names: list[str] = list(ontology.verbs)
    names.extend(a.qualified for a in ontology.all_attrs())
    for enum in ontology.enums.values():
        names.extend(enum.qualified_members())
    if len(set(names)) != len(names):  # pragma: no cover - loader enforces
        raise OntologyError("qualified names are not globally unique")
    return sorted(names) + list(CONTROL_SYMBOLS)
