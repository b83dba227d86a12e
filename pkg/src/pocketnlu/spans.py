"""Span featurization: marking utterance slices that name known entities.

The parser cannot learn every contact, playlist, or on-screen item from
training data, so entity knowledge arrives at parse time as spans: token
ranges labeled with what the covered text refers to.  Matching is fuzzy at
the character level (misspellings, inflected forms) with a lemma table in
front so morphology does not eat the edit-distance budget.

Spans optionally carry a subtree payload.  A payload span tells the decoder
"copying this range means this structured value", which is how entities from
previous turns or from the screen get pulled into a new parse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from pocketnlu.trees import SubTree, tree_from_json, tree_to_json

_EDGE_PUNCT = ".,!?;:()[]{}\"¿¡"


def tokenize(text: str) -> list[str]:
    """Casefold, split on whitespace, strip edge punctuation.

    Internal apostrophes survive ("dentist's" stays one token).
    """
    tokens = []
    for raw in text.split():
        tok = raw.casefold().strip(_EDGE_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


# ======================================================================
# Lemmatization: a small, pluggable suffix-rule table per language.

# (suffix, replacement, minimum token length for the rule to apply)
_LEMMA_RULES: dict[str, list[tuple[str, str, int]]] = {
    "en": [
        ("'s", "", 3),
        ("ies", "y", 5),
        ("s", "", 4),
    ],
    # Final-vowel alternation covers nominative/accusative pairs well enough
    # for matching transliterated tokens ("pape" -> "papa").
    "ru": [
        ("e", "a", 3),
        ("u", "a", 3),
    ],
}


def register_lemma_rules(lang: str, rules: list[tuple[str, str, int]]) -> None:
    _LEMMA_RULES[lang] = list(rules)


def lemmatize(token: str, lang: str = "en") -> str:
    token = token.casefold()
    for suffix, replacement, min_len in _LEMMA_RULES.get(lang, []):
        if len(token) >= min_len and token.endswith(suffix):
            return token[: len(token) - len(suffix)] + replacement
    return token


# ======================================================================
# Fuzzy scoring


def _levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb))
            )
        previous = current
    return previous[-1]


def fuzzy_score(a: str, b: str) -> float:
    """Normalized similarity: 1 - edit_distance / max(len).

    Symmetric, 1.0 for equal strings, 0.0 when every character differs.
    "al" vs "albert" scores 2/6, far below any sane acceptance threshold,
    which is the point: prefixes of longer names must not pass.
    """
    a, b = a.casefold(), b.casefold()
    if a == b:
        return 1.0
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - _levenshtein(a, b) / longest


# ======================================================================
# Entity store


@dataclass
class EntityRecord:
    """One known entity: a contact, playlist, screen item, or carried-over
    slot value from earlier in the conversation."""

    id: str
    label: str  # feature label, e.g. "contactName", "playlist", "carryover"
    canonical: str
    alternates: tuple[str, ...] = ()
    source: str = "app"  # "contacts" | "app" | "screen" | "linguistic"
    payload: Optional[SubTree] = None
    recency: int = 0  # 0 = most recently touched

    def surface_forms(self) -> list[str]:
        return [self.canonical, *self.alternates]


class EntityStore:
    """Insertion-ordered collection of entity records with recency tracking.

    Insertion order is meaningful on its own: screen-sourced records keep
    the top-to-bottom order of the list the user is looking at.
    """

    def __init__(self, records: Iterable[EntityRecord] = ()):
        self._records: list[EntityRecord] = []
        for r in records:
            self._records.append(r)

    def __iter__(self):
        return iter(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def add(self, record: EntityRecord) -> None:
        """Insert as the most recent record, aging everything else."""
        for r in self._records:
            r.recency += 1
        record.recency = 0
        self._records.append(record)

    def by_source(self, source: str) -> list[EntityRecord]:
        return [r for r in self._records if r.source == source]

    def by_label(self, label: str) -> list[EntityRecord]:
        return [r for r in self._records if r.label == label]

    def most_recent(self, labels: Optional[set[str]] = None) -> Optional[EntityRecord]:
        best: Optional[EntityRecord] = None
        best_key: Optional[tuple[int, int]] = None
        for pos, r in enumerate(self._records):
            if labels is not None and r.label not in labels:
                continue
            key = (r.recency, -pos)  # recency ties break toward later insertion
            if best_key is None or key < best_key:
                best, best_key = r, key
        return best

    def get(self, entity_id: str) -> Optional[EntityRecord]:
        for r in self._records:
            if r.id == entity_id:
                return r
        return None


def record_to_json(record: EntityRecord) -> dict:
    return {
        "id": record.id,
        "label": record.label,
        "canonical": record.canonical,
        "alternates": list(record.alternates),
        "source": record.source,
        "payload": tree_to_json(_payload_as_tree(record.payload)),
        "recency": record.recency,
    }


def record_from_json(obj: dict) -> EntityRecord:
    return EntityRecord(
        id=obj["id"],
        label=obj["label"],
        canonical=obj["canonical"],
        alternates=tuple(obj.get("alternates", ())),
        source=obj.get("source", "app"),
        payload=_payload_from_tree(tree_from_json(obj.get("payload"))),
        recency=obj.get("recency", 0),
    )


def _payload_as_tree(payload: Optional[SubTree]):
    # Subtree payloads ride through JSON as a pseudo-tree keyed by type name.
    if payload is None:
        return None
    from pocketnlu.trees import MrTree

    return MrTree(verb=f"payload:{payload.type_name}", children=payload.children)


def _payload_from_tree(tree) -> Optional[SubTree]:
    if tree is None:
        return None
    return SubTree(type_name=tree.verb.partition(":")[2], children=tree.children)


# ======================================================================
# Spans


@dataclass(frozen=True)
class Span:
    """An inclusive token range [start, end] with an interpretation."""

    start: int
    end: int
    label: str
    entity_id: Optional[str] = None
    score: float = 1.0
    payload: Optional[SubTree] = None

    def overlaps(self, other: "Span") -> bool:
        return self.start <= other.end and other.start <= self.end

    def covers(self, index: int) -> bool:
        return self.start <= index <= self.end


def span_to_json(span: Span) -> dict:
    return {
        "start": span.start,
        "end": span.end,
        "label": span.label,
        "entity_id": span.entity_id,
        "score": span.score,
        "payload": tree_to_json(_payload_as_tree(span.payload)),
    }


def span_from_json(obj: dict) -> Span:
    return Span(
        start=obj["start"],
        end=obj["end"],
        label=obj["label"],
        entity_id=obj.get("entity_id"),
        score=obj.get("score", 1.0),
        payload=_payload_from_tree(tree_from_json(obj.get("payload"))),
    )


# ======================================================================
# Matching


DEFAULT_STOPWORDS = frozenset({"my", "the", "a", "an", "please"})


@dataclass
class MatchConfig:
    threshold: float = 0.8
    min_fuzzy_chars: int = 3
    lang: str = "en"
    stopwords: frozenset[str] = DEFAULT_STOPWORDS


def _candidate_variants(form: str, cfg: MatchConfig) -> list[list[str]]:
    """Token lists to try for one surface form.

    Stop-words are dropped from the candidate only: "My Morning Routine"
    also matches the bare mention "morning routine", but utterance
    stop-words are never skipped, so spans stay contiguous slices of what
    the user actually said.
    """
    tokens = tokenize(form)
    variants = [tokens]
    stripped = [t for t in tokens if t not in cfg.stopwords]
    if stripped and stripped != tokens:
        variants.append(stripped)
    return variants


def _window_score(
    window: Sequence[str], candidate: Sequence[str], cfg: MatchConfig
) -> float:
    a = " ".join(lemmatize(t, cfg.lang) for t in window)
    b = " ".join(lemmatize(t, cfg.lang) for t in candidate)
    if min(len(a), len(b)) < cfg.min_fuzzy_chars:
        return 1.0 if a == b else 0.0
    return fuzzy_score(a, b)


def match_spans(
    tokens: Sequence[str],
    store: EntityStore,
    cfg: Optional[MatchConfig] = None,
) -> list[Span]:
    """Mark utterance slices naming store entities.

    Every same-length window is scored against every candidate form; scores
    at or above ``cfg.threshold`` become span proposals.  Overlaps resolve
    best-first: higher score wins, ties break toward the more recent record,
    then the longer span.  The result is sorted by start and overlap-free.
    """
    cfg = cfg or MatchConfig()
    proposals: list[tuple[float, int, int, Span]] = []
    for record in store:
        for form in record.surface_forms():
            for candidate in _candidate_variants(form, cfg):
                width = len(candidate)
                if width == 0 or width > len(tokens):
                    continue
                for start in range(len(tokens) - width + 1):
                    window = tokens[start : start + width]
                    score = _window_score(window, candidate, cfg)
                    if score >= cfg.threshold:
                        span = Span(
                            start=start,
                            end=start + width - 1,
                            label=record.label,
                            entity_id=record.id,
                            score=score,
                            payload=record.payload,
                        )
                        proposals.append((score, record.recency, width, span))

    # Best first: score desc, recency asc, width desc.
    proposals.sort(key=lambda p: (-p[0], p[1], -p[2], p[3].start))
    chosen: list[Span] = []
    for _, _, _, span in proposals:
        if not any(span.overlaps(existing) for existing in chosen):
            chosen.append(span)
    chosen.sort(key=lambda s: s.start)
    return chosen


# ======================================================================
# Estimator-shaped wrapper


def check_tokens(tokens) -> list[str]:
    """Validate a token sequence argument; accepts a raw string too."""
    if isinstance(tokens, str):
        return tokenize(tokens)
    if not isinstance(tokens, (list, tuple)) or not all(
        isinstance(t, str) and t for t in tokens
    ):
        raise ValueError("tokens must be a string or a sequence of non-empty strings")
    return list(tokens)


class SpanMatcher(BaseEstimator):
    """Transform-shaped front end over :func:`match_spans`.

    ``fit`` ingests the entity inventory, ``transform`` maps utterances to
    span lists.  Parameters mirror :class:`MatchConfig` so grid search and
    cloning work the standard way.
    """

    def __init__(self, threshold: float = 0.8, min_fuzzy_chars: int = 3, lang: str = "en"):
        self.threshold = threshold
        self.min_fuzzy_chars = min_fuzzy_chars
        self.lang = lang

    def fit(self, X: Iterable[EntityRecord], y=None) -> "SpanMatcher":
        if isinstance(X, EntityStore):
            self.store_ = X
        else:
            records = list(X)
            if not all(isinstance(r, EntityRecord) for r in records):
                raise ValueError("X must be an EntityStore or iterable of EntityRecord")
            self.store_ = EntityStore(records)
        return self

    def transform(self, X: Iterable[Union[str, Sequence[str]]]) -> list[list[Span]]:
        if not hasattr(self, "store_"):
            raise NotFittedError("SpanMatcher is not fitted; call fit first")
        cfg = MatchConfig(
            threshold=self.threshold, min_fuzzy_chars=self.min_fuzzy_chars, lang=self.lang
        )
        return [match_spans(check_tokens(x), self.store_, cfg) for x in X]
