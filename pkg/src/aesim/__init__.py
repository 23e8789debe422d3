"""ESIM and attention-boosted aESIM for sentence-pair inference, on a small numpy autodiff core."""

from .data import LabeledPair, SequenceBatch, Vocab, tokenize
from .model import AlignmentExport, EsimConfig, EsimModel
from .tensor import Tensor, backward, grad_check, no_grad, precision, set_precision
from .train import AdamState, TrainConfig, TrainReport, adam_step, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AlignmentExport",
    "EsimConfig",
    "EsimModel",
    "LabeledPair",
    "SequenceBatch",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "Vocab",
    "adam_step",
    "backward",
    "evaluate",
    "grad_check",
    "no_grad",
    "precision",
    "set_precision",
    "tokenize",
    "train",
]
