"""Training loop for the instruction decoder.

Deliberately plain: Adam over teacher-forced cross-entropy, full passes in
a seeded shuffle order.  Everything that could introduce run-to-run drift
is pinned down, so two trainings from the same seed and corpus produce
bitwise-identical parameters; the determinism tests rely on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from pocketnlu.corpus import ConversationRecord, context_for_turn, iter_training_turns
from pocketnlu.context import featurize_system_action
from pocketnlu.ontology import Ontology, symbol_vocabulary
from pocketnlu.parser import nn
from pocketnlu.parser.decoding import span_labels
from pocketnlu.parser.network import Example, ModelConfig, ParserNetwork
from pocketnlu.spans import tokenize


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    budget: int = 8


def build_examples(
    net: ParserNetwork, records: Sequence[ConversationRecord]
) -> list[Example]:
    """Teacher-forcing examples from generally-routed turns with gold
    instruction streams."""
    examples = []
    for record, index, turn in iter_training_turns(records):
        tokens = tokenize(turn.utterance)
        if not tokens:
            continue
        ctx = context_for_turn(record, index)
        examples.append(Example(
            tokens=tokens,
            labels=span_labels(tokens, turn.gold_spans),
            context=featurize_system_action(ctx.previous_action),
            target_ids=[net.sym_id[s] for s in turn.instructions],
        ))
    return examples


def train(
    o: Ontology,
    records: Sequence[ConversationRecord],
    config: Optional[TrainConfig] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[ParserNetwork, list[float]]:
    """Train a parser network on a synthetic corpus.

    Returns the network and the per-epoch mean loss trace.
    """
    cfg = config or TrainConfig()
    net = ParserNetwork(symbol_vocabulary(o), cfg.model, seed=cfg.seed)
    examples = build_examples(net, records)
    if not examples:
        raise ValueError("no trainable turns in the given records")
    opt = nn.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        total, steps = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch_examples = [examples[i] for i in order[lo:lo + cfg.batch_size]]
            opt.zero_grad()
            loss = net.loss(net.pack(batch_examples))
            nn.backward(loss)
            opt.step()
            total += float(loss.value)
            steps += 1
        history.append(total / steps)
        if log is not None:
            log(f"epoch {epoch + 1:>3}/{cfg.epochs}  loss {history[-1]:.4f}")
    return net, history
