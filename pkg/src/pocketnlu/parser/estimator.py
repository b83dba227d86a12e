"""Scikit-learn shaped front door for the trainable parser.

``ContextualParser`` follows the estimator protocol: constructor arguments
are stored verbatim, ``fit`` learns from a corpus of conversation records
and hangs the result on trailing-underscore attributes, ``predict`` and
``score`` work on the same record shape.  ``parse`` is the single-turn
entry point the dialog runtime uses: featurize against the dialog
context, decode under the legality mask, assemble the tree.

Anything that cannot produce a tree (empty utterance, over-length input,
a truncated decode) falls back to the unsupported-action verb rather than
raising; a pipeline stage that throws on odd input would take the whole
turn down with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from pocketnlu.codec import AssembleError, assemble
from pocketnlu.context import DialogContext, featurize_inputs
from pocketnlu.corpus import ConversationRecord, context_for_turn, iter_training_turns
from pocketnlu.ontology import Ontology
from pocketnlu.parser.decoding import TruncatedDecodeError, decode_greedy
from pocketnlu.parser.network import ModelConfig
from pocketnlu.parser.training import TrainConfig, train
from pocketnlu.spans import Span, tokenize
from pocketnlu.trees import MrTree, exact_match

FALLBACK_VERB = "System.unsupported"


@dataclass
class ParseResult:
    tree: MrTree
    symbols: list[str] = field(default_factory=list)
    tokens: list[str] = field(default_factory=list)
    spans: list[Span] = field(default_factory=list)
    context_tokens: list[str] = field(default_factory=list)
    fallback: Optional[str] = None  # reason, when the tree is the fallback


class ContextualParser(BaseEstimator):
    """Token-synchronous neural parser over ontology-grounded trees."""

    def __init__(
        self,
        ontology: Optional[Ontology] = None,
        epochs: int = 15,
        batch_size: int = 64,
        lr: float = 2e-3,
        seed: int = 0,
        budget: int = 8,
    ):
        self.ontology = ontology
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.budget = budget

    # ------------------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this ContextualParser is not fitted; call fit "
                                 "or attach a loaded network to .net_")

    def train_config(self) -> TrainConfig:
        return TrainConfig(model=ModelConfig(), epochs=self.epochs,
                           batch_size=self.batch_size, lr=self.lr,
                           seed=self.seed, budget=self.budget)

    def fit(self, X: Sequence[ConversationRecord], y=None, log=None):
        """Train on conversation records (gold spans and instruction
        streams ride along inside each turn)."""
        if self.ontology is None:
            raise ValueError("ContextualParser needs an ontology to fit")
        self.net_, self.loss_history_ = train(self.ontology, list(X),
                                              self.train_config(), log=log)
        return self

    # ------------------------------------------------------------------

    def _fallback(self, tokens, reason: str) -> ParseResult:
        return ParseResult(tree=MrTree(FALLBACK_VERB, {}), tokens=list(tokens),
                           fallback=reason)

    def parse(self, utterance: str, context: Optional[DialogContext] = None) -> ParseResult:
        self._require_fitted()
        o = self.ontology
        ctx = context if context is not None else DialogContext()
        tokens = tokenize(utterance)
        if not tokens:
            return self._fallback(tokens, "empty utterance")
        spans, ctx_tokens = featurize_inputs(o, tokens, ctx)
        try:
            symbols = decode_greedy(self.net_, o, tokens, spans, ctx_tokens,
                                    budget=self.budget)
            tree = assemble(o, symbols, tokens, spans)
        except (TruncatedDecodeError, AssembleError, ValueError) as err:
            return self._fallback(tokens, str(err))
        return ParseResult(tree=tree, symbols=symbols, tokens=tokens,
                           spans=spans, context_tokens=ctx_tokens)

    def predict(
        self,
        X: Sequence[Union[str, tuple[str, Optional[DialogContext]]]],
    ) -> list[MrTree]:
        """Trees for bare utterances or (utterance, context) pairs."""
        self._require_fitted()
        out = []
        for item in X:
            utterance, ctx = item if isinstance(item, tuple) else (item, None)
            out.append(self.parse(utterance, ctx).tree)
        return out

    def score(self, X: Sequence[ConversationRecord], y=None) -> float:
        """Exact-match rate over the generally-routed turns of ``X``,
        replaying each turn under its recorded dialog context."""
        self._require_fitted()
        hits, total = 0, 0
        for record, index, turn in iter_training_turns(X):
            ctx = context_for_turn(record, index)
            result = self.parse(turn.utterance, ctx)
            total += 1
            if result.fallback is None and exact_match(result.tree, turn.gold_tree):
                hits += 1
        if total == 0:
            raise ValueError("no scoreable turns in the given records")
        return hits / total
