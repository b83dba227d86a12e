"""Replay evaluation: conversation-level regression with user-facing triage.

Turn-level exact match treats every tree divergence as an error.  That
overstates what a user would notice: plenty of divergences never surface
in the system's response (a differently-inferred request source, say).
The harness therefore renders both trees through response sketches, plain
template sentences approximating what the assistant would say, and
separates exact-match errors from user-facing ones.

The fault injector exists to keep that machinery honest.  It corrupts
parses with a designed harmful fraction: harmful corruptions change the
response sketch by construction, benign ones touch only sketch-invisible
attributes.  A correct harness must measure a user-facing fraction close
to the designed rate; a harness that cannot is miswired.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from importlib import resources

from pocketnlu.corpus import ConversationRecord, Turn, context_for_turn
from pocketnlu.ontology import Ontology
from pocketnlu.trees import (
    EnumLeaf,
    MrTree,
    Node,
    StringLeaf,
    SubTree,
    exact_match,
    flatten,
    normalize_string,
)

# ======================================================================
# Response sketches

_PLACEHOLDER = re.compile(r"\{([\w.#]+)\}")

# attribute local name kept out of every sketch template; divergences
# confined to it are user-invisible by design
NON_SALIENT = "source"


def load_sketches(path=None) -> dict[str, str]:
    if path is None:
        path = resources.files("pocketnlu") / "data/sketch_templates.tsv"
    templates: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            verb, sep, template = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected verb<TAB>template")
            templates[verb.strip()] = template.strip()
    return templates


def render_sketch(tree: MrTree, templates: Optional[dict[str, str]] = None) -> str:
    """A one-line response approximation for a tree.

    Slot values come from the flattened frame; repeated slots join with
    "and"; placeholders with no value vanish.  Unknown verbs get a fixed
    apology so even a wildly wrong tree renders to something comparable.
    """
    if templates is None:
        templates = load_sketches()
    template = templates.get(tree.verb)
    if template is None:
        return "Sorry, I can't help with that."
    values: dict[str, list[str]] = {}
    for name, value in flatten(tree).slots:
        values.setdefault(re.sub(r"#\d+", "", name), []).append(value)

    def fill(m: re.Match) -> str:
        got = values.get(m.group(1))
        return " and ".join(got) if got else ""

    filled = re.sub(r"\s+", " ", _PLACEHOLDER.sub(fill, template)).strip()
    return re.sub(r"\s+([.,!?])", r"\1", filled)


def sketches_differ(a: MrTree, b: MrTree, templates=None) -> bool:
    return normalize_string(render_sketch(a, templates)) != normalize_string(
        render_sketch(b, templates))


# ======================================================================
# Replay

ParseFn = Callable[[ConversationRecord, int, Turn], MrTree]


def _first_divergence(gold: MrTree, pred: MrTree) -> str:
    """Triage key component: the first slot where the frames disagree."""
    if gold.verb != pred.verb:
        return "<verb>"
    strip = lambda name: re.sub(r"#\d+", "", name)
    g = sorted((strip(n), normalize_string(v)) for n, v in flatten(gold).slots)
    p = sorted((strip(n), normalize_string(v)) for n, v in flatten(pred).slots)
    for got, want in zip(p, g):
        if got != want:
            return want[0] if got[0] == want[0] else min(got[0], want[0])
    longer = g[len(p):] or p[len(g):]
    if longer:
        return longer[0][0]
    return "<grouping>"  # frames agree, trees differ in sibling grouping


@dataclass
class ReplayReport:
    turns: int = 0
    mismatches: int = 0
    user_facing: int = 0
    fallbacks: int = 0
    triage: dict[tuple[str, str, str], int] = field(default_factory=dict)

    @property
    def exact_match_rate(self) -> float:
        return 1.0 - self.mismatches / self.turns if self.turns else 1.0

    @property
    def user_facing_fraction(self) -> float:
        return self.user_facing / self.turns if self.turns else 0.0

    def top_triage(self, k: int = 10) -> list[tuple[tuple[str, str, str], int]]:
        return sorted(self.triage.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def replay(
    records: Sequence[ConversationRecord],
    parse_fn: Optional[ParseFn] = None,
    templates: Optional[dict[str, str]] = None,
    limit: Optional[int] = None,
    fallback_verb: str = "System.unsupported",
) -> ReplayReport:
    """Replay every turn, comparing a candidate parse against the stored
    baseline.  ``parse_fn`` None means self-replay: the baseline against
    itself, which must report zero of everything (the harness calibration
    point).

    A turn counts as a fallback when the candidate punts to
    ``fallback_verb`` on an utterance whose baseline tree is something
    else; punting where the baseline also punts is an exact match."""
    if templates is None:
        templates = load_sketches()
    report = ReplayReport()
    for record in records:
        for index, turn in enumerate(record.turns):
            if limit is not None and report.turns >= limit:
                return report
            report.turns += 1
            pred = turn.gold_tree if parse_fn is None else parse_fn(record, index, turn)
            if exact_match(pred, turn.gold_tree):
                continue
            report.mismatches += 1
            if pred.verb == fallback_verb and turn.gold_tree.verb != fallback_verb:
                report.fallbacks += 1
            if sketches_differ(pred, turn.gold_tree, templates):
                report.user_facing += 1
            key = (turn.gold_tree.verb, pred.verb, _first_divergence(turn.gold_tree, pred))
            report.triage[key] = report.triage.get(key, 0) + 1
    return report


def router_parse_fn(router) -> ParseFn:
    """Adapt a federation Router to the replay signature, rebuilding each
    turn's dialog context from the record."""

    def fn(record: ConversationRecord, index: int, turn: Turn) -> MrTree:
        ctx = context_for_turn(record, index)
        return router.route(turn.utterance, ctx).tree

    return fn


# ======================================================================
# Fault injection


def _clone_tree(node):
    if isinstance(node, SubTree):
        return SubTree(node.type_name,
                       {a: [_clone_tree(c) for c in cs] for a, cs in node.children.items()})
    return node  # leaves are frozen


def _clone(tree: MrTree) -> MrTree:
    return MrTree(tree.verb,
                  {a: [_clone_tree(c) for c in cs] for a, cs in tree.children.items()})


def _visible_string_slots(tree: MrTree, templates: dict[str, str]) -> list[tuple[dict, str, int]]:
    """(children dict, attr, index) triples for string leaves whose slot
    appears in the tree's sketch template."""
    template = templates.get(tree.verb, "")
    named = set(_PLACEHOLDER.findall(template))
    found = []

    def visit(children, prefix):
        for attr_q, nodes in children.items():
            local = attr_q.partition(".")[2]
            for i, node in enumerate(nodes):
                if isinstance(node, StringLeaf) and prefix + local in named:
                    found.append((children, attr_q, i))
                elif isinstance(node, SubTree):
                    visit(node.children, prefix + local + ".")

    visit(tree.children, "")
    return found


def inject_fault(
    o: Ontology,
    tree: MrTree,
    rng: random.Random,
    templates: dict[str, str],
    harmful_rate: float = 0.3,
) -> MrTree:
    """One corrupted copy of ``tree``.

    With probability ``harmful_rate`` the corruption is response-visible:
    a verb swap, or garbling a string slot the sketch renders.  Otherwise
    it only touches the non-salient source attribute, which no sketch
    mentions, so the response is unchanged while exact match still fails.
    """
    faulty = _clone(tree)
    if rng.random() < harmful_rate:
        visible = _visible_string_slots(faulty, templates)
        if visible and rng.random() < 0.5:
            children, attr_q, i = visible[rng.randrange(len(visible))]
            old = children[attr_q][i]
            children[attr_q][i] = StringLeaf(old.text + " indeed")
        else:
            other = [v for v in sorted(o.verbs) if v != faulty.verb]
            faulty = MrTree(rng.choice(other), faulty.children)
        return faulty
    source_attr = f"{faulty.verb.partition('.')[0]}.{NON_SALIENT}"
    members = ["Source.Voice", "Source.App"]
    existing = faulty.children.get(source_attr)
    if existing and isinstance(existing[0], EnumLeaf):
        flipped = members[1 - members.index(existing[0].member)] \
            if existing[0].member in members else members[0]
        existing[0] = EnumLeaf(flipped)
    else:
        faulty.children[source_attr] = [EnumLeaf(members[0])]
    return faulty


@dataclass
class FaultReport:
    turns: int
    designed_harmful_rate: float
    measured_user_facing: float
    exact_mismatches: int


def fault_injection_run(
    o: Ontology,
    records: Sequence[ConversationRecord],
    seed: int = 0,
    harmful_rate: float = 0.3,
    limit: int = 1000,
    templates: Optional[dict[str, str]] = None,
) -> FaultReport:
    """Corrupt every replayed turn and measure what fraction a user would
    see.  The measured fraction validates the harness: it must sit near
    the designed rate, or sketches are leaking non-salient attributes
    (too high) or masking real changes (too low)."""
    if templates is None:
        templates = load_sketches()
    rng = random.Random(seed)
    turns = user_facing = mismatches = 0
    for record in records:
        for turn in record.turns:
            if turns >= limit:
                break
            turns += 1
            faulty = inject_fault(o, turn.gold_tree, rng, templates, harmful_rate)
            if not exact_match(faulty, turn.gold_tree):
                mismatches += 1
            if sketches_differ(faulty, turn.gold_tree, templates):
                user_facing += 1
    return FaultReport(
        turns=turns,
        designed_harmful_rate=harmful_rate,
        measured_user_facing=user_facing / turns if turns else 0.0,
        exact_mismatches=mismatches,
    )


# ======================================================================
# Output-scheme comparison


@dataclass
class ComparisonReport:
    tree_vocab: int
    flat_vocab: int
    tree_exact_match: float
    flat_frame_match_all: float
    flat_frame_match_expressible: float
    flat_skipped_train: int
    flat_inexpressible_eval: int
    eval_turns: int
    # symbols added to each vocabulary by one new member in each enum
    enum_marginal_tree: dict[str, int] = field(default_factory=dict)
    enum_marginal_flat: dict[str, int] = field(default_factory=dict)

    def render(self) -> str:
        lines = [
            f"vocabulary: tree {self.tree_vocab}, flat {self.flat_vocab}",
            f"tree exact match:               {self.tree_exact_match:.3f}",
            f"flat frame match (all turns):   {self.flat_frame_match_all:.3f}",
            f"flat frame match (expressible): {self.flat_frame_match_expressible:.3f}",
            f"flat: {self.flat_skipped_train} training turns and "
            f"{self.flat_inexpressible_eval}/{self.eval_turns} eval turns inexpressible",
        ]
        for enum in sorted(self.enum_marginal_tree):
            lines.append(
                f"one new {enum} member adds {self.enum_marginal_tree[enum]} tree "
                f"symbol(s), {self.enum_marginal_flat[enum]} flat symbol(s)")
        return "\n".join(lines)


def _enum_marginals(o: Ontology) -> tuple[dict[str, int], dict[str, int]]:
    """Vocabulary cost of one extra member per enum, both schemes.

    The tree scheme names each member once.  The flat scheme mints one
    combined symbol per slot path reaching the enum, so the cost scales
    with how often the enum is used, which is the structural reason flat
    vocabularies outgrow hierarchical ones."""
    tree = {enum: 1 for enum in o.enums}
    flat = {enum: 0 for enum in o.enums}

    def walk(context, seen):
        for attr in o.attrs_of(context).values():
            if attr.value_type in o.enums:
                flat[attr.value_type] += 1
            elif attr.value_type in o.types and attr.value_type not in seen:
                walk(attr.value_type, seen | {attr.value_type})

    for verb_q in o.verbs:
        walk(verb_q, frozenset())
    return tree, flat


def compare_representations(
    o: Ontology,
    train_records: Sequence[ConversationRecord],
    eval_records: Sequence[ConversationRecord],
    config=None,
    log: Optional[Callable[[str], None]] = None,
) -> ComparisonReport:
    """Train both output schemes on the same corpus and score both.

    The synthetic corpus is far easier than production traffic, so the
    absolute numbers characterize this corpus only; the durable findings
    are structural: what each scheme can express at all, and how the two
    vocabularies grow with the ontology.
    """
    from pocketnlu.context import featurize_inputs
    from pocketnlu.corpus import iter_training_turns
    from pocketnlu.ontology import symbol_vocabulary
    from pocketnlu.parser.estimator import ContextualParser
    from pocketnlu.parser.flat import (
        FlatError,
        FlatInexpressibleError,
        FlatScheme,
        decode_flat,
        flat_assemble,
        flat_linearize,
        train_flat,
    )
    from pocketnlu.parser.training import TrainConfig
    from pocketnlu.spans import tokenize
    from pocketnlu.trees import frames_equal

    cfg = config or TrainConfig()

    parser = ContextualParser(ontology=o, epochs=cfg.epochs, batch_size=cfg.batch_size,
                              lr=cfg.lr, seed=cfg.seed, budget=cfg.budget)
    parser.fit(train_records, log=log)
    tree_em = parser.score(eval_records)

    flat_net, scheme, _, skipped = train_flat(o, train_records, cfg, log=log)

    hits = expressible_hits = expressible = inexpressible = total = 0
    for record, index, turn in iter_training_turns(eval_records):
        tokens = tokenize(turn.utterance)
        ctx = context_for_turn(record, index)
        spans, ctx_tokens = featurize_inputs(o, tokens, ctx)
        total += 1
        try:
            flat_linearize(scheme, turn.gold_tree, tokens)
            can_express = True
            expressible += 1
        except FlatInexpressibleError:
            can_express = False
            inexpressible += 1
        try:
            symbols = decode_flat(flat_net, scheme, tokens, spans, ctx_tokens,
                                  budget=cfg.budget)
            frame = flat_assemble(scheme, symbols, tokens)
            hit = frames_equal(frame, flatten(turn.gold_tree))
        except FlatError:
            hit = False
        hits += hit
        expressible_hits += hit and can_express

    marg_tree, marg_flat = _enum_marginals(o)
    return ComparisonReport(
        tree_vocab=len(symbol_vocabulary(o)),
        flat_vocab=len(scheme.vocabulary()),
        tree_exact_match=tree_em,
        flat_frame_match_all=hits / total if total else 0.0,
        flat_frame_match_expressible=(
            expressible_hits / expressible if expressible else 0.0),
        flat_skipped_train=skipped,
        flat_inexpressible_eval=inexpressible,
        eval_turns=total,
        enum_marginal_tree=marg_tree,
        enum_marginal_flat=marg_flat,
    )
