"""Expert-annotated neural machine translation with a copy-generator and self-critical training."""

from .corpus import BpeCodes, Vocabulary, apply_bpe, build_vocab, learn_bpe, tokenize
from .decode import beam, greedy, sample
from .expert import PhraseTable, annotate, find_rare_spans, load_phrase_table
from .model import ModelConfig, ModelParams, init_params

__version__ = "0.1.0"

__all__ = [
    "BpeCodes",
    "ModelConfig",
    "ModelParams",
    "PhraseTable",
    "Vocabulary",
    "annotate",
    "apply_bpe",
    "beam",
    "build_vocab",
    "find_rare_spans",
    "greedy",
    "init_params",
    "learn_bpe",
    "load_phrase_table",
    "sample",
    "tokenize",
]
