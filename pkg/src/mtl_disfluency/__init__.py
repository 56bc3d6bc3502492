"""Incremental multi-task sequence labelling for disfluency detection.

One LSTM reads the words left to right; CRF heads tag disfluency structure,
utterance boundaries and POS, and a softmax head predicts the next word.
"""

from .corpus import Dialogue, load_corpus, read_corpus
from .evaluation import EvalReport, evaluate
from .incremental import HypothesisLog, IncrementalTagger, replay
from .model import LossMode, ModelConfig, TaggerModel, predict_final
from .synthetic import GenConfig, generate
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dialogue",
    "load_corpus",
    "read_corpus",
    "EvalReport",
    "evaluate",
    "HypothesisLog",
    "IncrementalTagger",
    "replay",
    "LossMode",
    "ModelConfig",
    "TaggerModel",
    "predict_final",
    "GenConfig",
    "generate",
    "TrainConfig",
    "train",
]
