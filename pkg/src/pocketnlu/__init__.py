"""Ontology-grounded contextual semantic parsing for on-device assistants.

The pipeline turns an utterance plus dialog context into a typed, hierarchical
meaning representation by decoding a sequence of tree-building instructions,
one token at a time.  Supporting layers provide span featurization against a
personal entity store, heuristic reference resolution, federated routing
between specialist and general parsers, synthetic corpus generation, and a
replay-based evaluation harness.
"""

from pocketnlu.ontology import Ontology, load_ontology, symbol_vocabulary
from pocketnlu.trees import MrTree, SystemAction, exact_match, flatten, render_tree
from pocketnlu.codec import align, assemble, linearize

__all__ = [
    "Ontology",
    "load_ontology",
    "symbol_vocabulary",
    "MrTree",
    "SystemAction",
    "exact_match",
    "flatten",
    "render_tree",
    "align",
    "assemble",
    "linearize",
]

__version__ = "0.1.0"
