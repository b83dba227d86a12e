"""Token-synchronous neural parser: model, training, constrained decoding."""

from pocketnlu.parser.checkpoint import load_model, quantize, save_model
from pocketnlu.parser.decoding import TruncatedDecodeError, decode_greedy, span_labels
from pocketnlu.parser.estimator import ContextualParser, ParseResult
from pocketnlu.parser.network import Example, ModelConfig, ParserNetwork
from pocketnlu.parser.training import TrainConfig, build_examples, train

__all__ = [
    "ContextualParser", "Example", "ModelConfig", "ParseResult",
    "ParserNetwork", "TrainConfig", "TruncatedDecodeError", "build_examples",
    "decode_greedy", "load_model", "quantize", "save_model", "span_labels",
    "train",
]
