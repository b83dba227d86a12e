"""Synthetic conversations: the only training data this pipeline ever sees.

Templates realize short single- and two-turn conversations over the toy
ontology with controlled lexical noise (politeness prefixes, synonym swaps,
inflected enum triggers).  The generator then runs the real featurization
pipeline over each turn, so gold spans and gold instruction sequences are
exactly what the parser would see at inference time, and writes everything
to a line-per-conversation JSONL format.

Also home to the random-tree fuzz helpers the codec tests use: trees drawn
uniformly from the expressible class, paired with token sequences their
leaves align against.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

from pocketnlu.codec import linearize
from pocketnlu.context import DialogContext, featurize_inputs, rewrite_query
from pocketnlu.ontology import Ontology, validate_path
from pocketnlu.spans import (
    EntityRecord,
    EntityStore,
    Span,
    record_from_json,
    record_to_json,
    span_from_json,
    span_to_json,
    tokenize,
)
from pocketnlu.trees import (
    EnumLeaf,
    MrTree,
    PROMPT,
    INFORM,
    StringLeaf,
    SubTree,
    SystemAction,
    UnfilledLeaf,
    action_from_json,
    action_to_json,
    tree_from_json,
    tree_to_json,
)

ROUTE_GENERAL = "general"
ROUTE_KNOWLEDGE = "knowledge"


@dataclass
class Turn:
    """One user turn with everything replay needs to reproduce it."""

    utterance: str
    gold_tree: MrTree
    response_action: SystemAction = field(default_factory=SystemAction)
    entities: list[EntityRecord] = field(default_factory=list)
    gold_spans: list[Span] = field(default_factory=list)
    instructions: Optional[list[str]] = None
    route: str = ROUTE_GENERAL


@dataclass
class ConversationRecord:
    id: str
    turns: list[Turn]


def context_for_turn(record: ConversationRecord, index: int) -> DialogContext:
    """Rebuild the dialog context the given turn was parsed under."""
    turn = record.turns[index]
    store = EntityStore(replace(r) for r in turn.entities)
    screen = len(store.by_source("screen")) or None
    return DialogContext(
        previous_utterances=[t.utterance for t in record.turns[:index]],
        previous_action=record.turns[index - 1].response_action if index > 0 else None,
        store=store,
        screen_length=screen,
    )


# ======================================================================
# JSONL serialization


def turn_to_json(turn: Turn) -> dict:
    return {
        "utterance": turn.utterance,
        "gold_tree": tree_to_json(turn.gold_tree),
        "response_action": action_to_json(turn.response_action),
        "entities": [record_to_json(r) for r in turn.entities],
        "gold_spans": [span_to_json(s) for s in turn.gold_spans],
        "instructions": " ".join(turn.instructions) if turn.instructions else None,
        "route": turn.route,
    }


def turn_from_json(obj: dict) -> Turn:
    instructions = obj.get("instructions")
    return Turn(
        utterance=obj["utterance"],
        gold_tree=tree_from_json(obj["gold_tree"]),
        response_action=action_from_json(obj.get("response_action")),
        entities=[record_from_json(r) for r in obj.get("entities", [])],
        gold_spans=[span_from_json(s) for s in obj.get("gold_spans", [])],
        instructions=instructions.split() if instructions else None,
        route=obj.get("route", ROUTE_GENERAL),
    )


def write_jsonl(records: Sequence[ConversationRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            obj = {"id": record.id, "turns": [turn_to_json(t) for t in record.turns]}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_jsonl(path: str) -> list[ConversationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(
                ConversationRecord(
                    id=obj["id"], turns=[turn_from_json(t) for t in obj["turns"]]
                )
            )
    return records


# ======================================================================
# Templates


@dataclass
class Template:
    """A conversation family: declared symbols plus a realization function.

    ``verbs`` and ``paths`` declare every ontology symbol the realizer can
    produce; generation validates them up front so a template referencing a
    renamed attribute fails loudly rather than emitting broken gold trees.
    """

    family: str
    weight: float
    verbs: tuple[str, ...]
    paths: tuple[tuple[str, ...], ...]
    realize: Callable[[random.Random], list[Turn]]


class TemplateError(Exception):
    pass


def validate_templates(o: Ontology, templates: Sequence[Template]) -> None:
    for t in templates:
        for verb in t.verbs:
            if verb not in o.verbs:
                raise TemplateError(f"template {t.family!r} references unknown verb {verb!r}")
        for path in t.paths:
            try:
                validate_path(o, path)
            except Exception as exc:
                raise TemplateError(
                    f"template {t.family!r} declares invalid path {path}: {exc}"
                ) from exc


# ----------------------------------------------------------------------
# Lexicons.  Curated so template filler words never collide with slot
# phrases or enum triggers.

ALARM_NAMES = (
    "fishing trip", "morning run", "study time", "team sync", "water plants",
    "pay rent", "book club", "grocery run", "piano practice", "laundry day",
    "workout", "meditation", "standup", "gym session", "dog walk",
)
CONTACTS = (
    "eugene", "mark", "emma", "alice", "boris", "nina", "ravi", "lena",
    "mom", "dad", "oleg", "tanya",
)
RELATION_NAMES = {"mom", "dad"}
CONTENTS = (
    "hello there", "running late", "call me back", "see you soon",
    "happy birthday", "on my way",
)
CITIES = (
    "paris", "london", "tokyo", "berlin", "madrid", "oslo", "rome", "cairo",
    "lima", "delhi", "new york", "san francisco",
)
SONGS = (
    "slow jazz", "morning mix", "focus beats", "summer hits",
    "road trip tunes", "quiet piano",
)
# Correction pairs are fuzzy-close on purpose: the rewrite rule replaces the
# closest window, and distant names would not clear its floor.
CORRECTION_PAIRS = (
    ("emma watson", "emily watson"),
    ("george miller", "george muller"),
    ("marie curie", "maria curie"),
    ("grace hopper", "grace hooper"),
    ("alan turing", "alan turling"),
    ("barack obama", "barak obama"),
)
PLACES = ("the eiffel tower", "mount fuji", "lake como", "the louvre")
DAYS = ("Sunday", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday")


def _string(text: str) -> StringLeaf:
    return StringLeaf(text)


def _location(name: str) -> SubTree:
    return SubTree("Location", {"Location.name": [_string(name)]})


def _contact_record(name: str) -> EntityRecord:
    label = "personRelation" if name in RELATION_NAMES else "contactName"
    return EntityRecord(id=f"contact:{name}", label=label, canonical=name, source="contacts")


def _realize_alarm_day(rng: random.Random) -> list[Turn]:
    prefix = rng.choice(("", "please ", "hey "))
    verb_word = rng.choice(("create", "make"))
    article = rng.choice(("a ", ""))
    name = rng.choice(ALARM_NAMES)
    day = rng.choice(DAYS)
    plural = rng.choice(("s", ""))
    utterance = f"{prefix}{verb_word} {article}{name} alarm on {day.lower()}{plural}"
    tree = MrTree(
        "Alarm.create",
        {
            "Alarm.name": [_string(name)],
            "Alarm.recurrence": [
                SubTree("DateTime", {"DateTime.dayOfWeek": [EnumLeaf(f"DayOfWeek.{day}")]})
            ],
        },
    )
    return [Turn(utterance=utterance, gold_tree=tree,
                 response_action=SystemAction(kind=INFORM, payload=tree))]


def _realize_alarm_time(rng: random.Random) -> list[Turn]:
    prefix = rng.choice(("", "please "))
    hour = str(rng.randint(1, 12))
    ampm = rng.choice(("am", "pm"))
    if rng.random() < 0.5:
        utterance = f"{prefix}set an alarm for {hour} {ampm}"
    else:
        utterance = f"{prefix}set a {hour} {ampm} alarm"
    tree = MrTree("Alarm.create", {"Alarm.time": [_string(f"{hour} {ampm}")]})
    return [Turn(utterance=utterance, gold_tree=tree,
                 response_action=SystemAction(kind=INFORM, payload=tree))]


def _realize_message(rng: random.Random) -> list[Turn]:
    noun = rng.choice(("message", "text", "note"))
    first, second, distractor = rng.sample(CONTACTS, 3)
    recipients = [first, second] if rng.random() < 0.5 else [first]
    tail = ""
    children: dict = {"Message.recipient": [_string(r) for r in recipients]}
    if rng.random() < 0.6:
        content = rng.choice(CONTENTS)
        tail = f" saying {content}"
        children["Message.content"] = [_string(content)]
    joined = " and ".join(recipients)
    utterance = f"send a {noun} to {joined}{tail}"
    tree = MrTree("Message.send", children)
    entities = [_contact_record(r) for r in recipients] + [_contact_record(distractor)]
    return [Turn(utterance=utterance, gold_tree=tree, entities=entities,
                 response_action=SystemAction(kind=INFORM, payload=tree))]


def _realize_flight(rng: random.Random) -> list[Turn]:
    prefix = rng.choice(("", "hi ", "can you "))
    me = rng.choice(("me ", ""))
    to_city, from_city = rng.sample(CITIES, 2)
    first_utt = f"{prefix}book {me}a flight to {to_city}"
    first_tree = MrTree("Flight.book", {"Flight.to": [_location(to_city)]})
    prompt = SystemAction(
        kind=PROMPT,
        payload=MrTree(
            "Flight.book",
            {"Flight.from": [UnfilledLeaf()], "Flight.departingAt": [UnfilledLeaf()]},
        ),
    )
    date_word = rng.choice(("today", "tomorrow"))
    member = "Date.Today" if date_word == "today" else "Date.Tomorrow"
    form = rng.randrange(3)
    if form == 0:
        second_utt = f"{date_word} from {from_city}"
    elif form == 1:
        second_utt = f"from {from_city} {date_word}"
    else:
        second_utt = f"leaving {date_word} from {from_city}"
    second_tree = MrTree(
        "Flight.book",
        {
            "Flight.from": [_location(from_city)],
            "Flight.to": [_location(to_city)],
            "Flight.departingAt": [
                SubTree("DateTime", {"DateTime.date": [EnumLeaf(member)]})
            ],
        },
    )
    carry = EntityRecord(
        id="turn0:Flight.to",
        label="slot:Flight.to",
        canonical=to_city,
        source="linguistic",
        payload=_location(to_city),
    )
    return [
        Turn(utterance=first_utt, gold_tree=first_tree, response_action=prompt),
        Turn(utterance=second_utt, gold_tree=second_tree, entities=[carry],
             response_action=SystemAction(kind=INFORM, payload=second_tree)),
    ]


def _realize_knowledge(rng: random.Random) -> list[Turn]:
    original, corrected = rng.choice(CORRECTION_PAIRS)
    if rng.random() < 0.5:
        original, corrected = corrected, original
    question = rng.choice(
        (
            f"how old is {original}",
            f"who is {original}",
            f"when was {original} born",
            f"where is {rng.choice(PLACES)}",
        )
    )
    first_tree = MrTree("Knowledge.query", {"Knowledge.text": [_string(question)]})
    turns = [
        Turn(utterance=question, gold_tree=first_tree, route=ROUTE_KNOWLEDGE,
             response_action=SystemAction(kind=INFORM, payload=first_tree))
    ]
    can_correct = original in question
    if can_correct and rng.random() < 0.7:
        correction_utt = f"i meant {corrected}"
        rewritten = rewrite_query(
            correction_utt, DialogContext(previous_utterances=[question])
        )
        second_tree = MrTree("Knowledge.query", {"Knowledge.text": [_string(rewritten)]})
        turns.append(
            Turn(utterance=correction_utt, gold_tree=second_tree, route=ROUTE_KNOWLEDGE,
                 response_action=SystemAction(kind=INFORM, payload=second_tree))
        )
    return turns


def _realize_music(rng: random.Random) -> list[Turn]:
    song = rng.choice(SONGS)
    verb_word = rng.choice(("play", "put on"))
    tail = rng.choice(("", " playlist"))
    utterance = f"{verb_word} {song}{tail}"
    tree = MrTree("Music.play", {"Music.query": [_string(song)]})
    entities = []
    if rng.random() < 0.5:
        entities.append(
            EntityRecord(id=f"playlist:{song.replace(' ', '-')}", label="playlist",
                         canonical=song.title(), source="app")
        )
    return [Turn(utterance=utterance, gold_tree=tree, entities=entities,
                 response_action=SystemAction(kind=INFORM, payload=tree))]


def default_templates() -> list[Template]:
    return [
        Template(
            family="alarm_day", weight=0.22, verbs=("Alarm.create",),
            paths=(("Alarm.create", "Alarm.name"),
                   ("Alarm.create", "Alarm.recurrence", "DateTime.dayOfWeek")),
            realize=_realize_alarm_day,
        ),
        Template(
            family="alarm_time", weight=0.12, verbs=("Alarm.create",),
            paths=(("Alarm.create", "Alarm.time"),),
            realize=_realize_alarm_time,
        ),
        Template(
            family="message", weight=0.20, verbs=("Message.send",),
            paths=(("Message.send", "Message.recipient"),
                   ("Message.send", "Message.content")),
            realize=_realize_message,
        ),
        Template(
            family="flight", weight=0.16, verbs=("Flight.book",),
            paths=(("Flight.book", "Flight.from", "Location.name"),
                   ("Flight.book", "Flight.to", "Location.name"),
                   ("Flight.book", "Flight.departingAt", "DateTime.date")),
            realize=_realize_flight,
        ),
        Template(
            family="knowledge", weight=0.18, verbs=("Knowledge.query",),
            paths=(("Knowledge.query", "Knowledge.text"),),
            realize=_realize_knowledge,
        ),
        Template(
            family="music", weight=0.12, verbs=("Music.play",),
            paths=(("Music.play", "Music.query"),),
            realize=_realize_music,
        ),
    ]


# ======================================================================
# Generation


def generate_synthetic(
    o: Ontology,
    templates: Optional[Sequence[Template]] = None,
    n: int = 1000,
    seed: int = 0,
) -> list[ConversationRecord]:
    """Generate ``n`` conversations, deterministically per seed.

    Every turn is post-processed with the parse-time featurization pipeline
    (gold spans) and, for generally-routed turns, the gold instruction
    sequence.  Knowledge-routed turns carry no instructions: their gold
    string is the rewritten query, which is not a slice of the current
    utterance and therefore cannot be produced by copy semantics.
    """
    templates = list(templates) if templates is not None else default_templates()
    validate_templates(o, templates)
    weights = [t.weight for t in templates]
    rng = random.Random(seed)
    records: list[ConversationRecord] = []
    for i in range(n):
        template = rng.choices(templates, weights=weights, k=1)[0]
        turns = template.realize(rng)
        previous_utterances: list[str] = []
        previous_action: Optional[SystemAction] = None
        for turn in turns:
            ctx = DialogContext(
                previous_utterances=list(previous_utterances),
                previous_action=previous_action,
                store=EntityStore(replace(r) for r in turn.entities),
            )
            tokens = tokenize(turn.utterance)
            spans, _ = featurize_inputs(o, tokens, ctx)
            turn.gold_spans = spans
            if turn.route == ROUTE_GENERAL:
                turn.instructions = linearize(
                    o, turn.gold_tree, tokens, spans=spans
                )
            previous_utterances.append(turn.utterance)
            previous_action = turn.response_action
        records.append(ConversationRecord(id=f"{template.family}-{i:05d}", turns=turns))
    return records


def coverage(records: Sequence[ConversationRecord]) -> dict[str, int]:
    """Per-family conversation counts, recovered from record ids."""
    counts: dict[str, int] = {}
    for record in records:
        family = record.id.rsplit("-", 1)[0]
        counts[family] = counts.get(family, 0) + 1
    return dict(sorted(counts.items()))


def iter_training_turns(
    records: Sequence[ConversationRecord],
) -> Iterator[tuple[ConversationRecord, int, Turn]]:
    """Turns the neural parser trains on: generally routed, with gold
    instructions.  Knowledge-routed turns are answered by the deterministic
    gate + stub instead and are deliberately absent here."""
    for record in records:
        for index, turn in enumerate(record.turns):
            if turn.route == ROUTE_GENERAL and turn.instructions:
                yield record, index, turn


def turn_count(records: Sequence[ConversationRecord]) -> int:
    return sum(len(r.turns) for r in records)


# ======================================================================
# Random expressible trees (codec fuzzing)


def random_expressible_tree(
    o: Ontology, rng: random.Random
) -> tuple[MrTree, list[str]]:
    """A random ontology-valid tree from the expressible class, plus tokens
    its leaves align against.

    Multi-child repeatable attributes are only produced at nodes whose
    ancestor chain contains no repeatable edge, and tokens appear in
    depth-first leaf order, so global FLUSH scope never poisons an
    in-progress node.  String leaves use unique synthetic words; aligned
    enum leaves contribute one trigger token.
    """
    verb_pool = sorted(v for v in o.verbs if o.verbs[v].attrs) + ["System.unsupported"]
    verb = rng.choice(verb_pool)
    word_counter = iter(range(10_000))
    tokens: list[str] = []

    def maybe_filler() -> None:
        if rng.random() < 0.4:
            tokens.append(f"f{next(word_counter)}")

    def build_children(context: str, under_repeatable: bool) -> dict:
        children: dict = {}
        attrs = list(o.attrs_of(context).values())
        for attr in sorted(attrs, key=lambda a: a.qualified):
            include = rng.random() < (0.2 if attr.value_type == "Source" else 0.6)
            if not include:
                continue
            if attr.repeatable and not under_repeatable:
                count = rng.randint(1, 3)
            else:
                count = 1
            nodes = []
            for _ in range(count):
                node = build_node(attr.value_type, under_repeatable or attr.repeatable)
                if node is None:
                    break
                nodes.append(node)
            if nodes:
                children[attr.qualified] = nodes
        return children

    def build_node(value_type: str, under_repeatable: bool):
        if value_type == "string":
            words = [f"w{next(word_counter)}" for _ in range(rng.randint(1, 2))]
            maybe_filler()
            tokens.extend(words)
            return StringLeaf(" ".join(words))
        if value_type in o.enums:
            member_local = rng.choice(o.enums[value_type].members)
            member = f"{value_type}.{member_local}"
            lemmas = o.triggers.get(member)
            if lemmas:
                maybe_filler()
                tokens.append(lemmas[0])
            return EnumLeaf(member)
        sub_children = build_children(value_type, under_repeatable)
        if not sub_children:
            return None  # empty subtrees are invalid; drop the slot instead
        return SubTree(value_type, sub_children)

    children = build_children(verb, under_repeatable=False)
    if not tokens:
        tokens.append(f"f{next(word_counter)}")
    return MrTree(verb, children), tokens
