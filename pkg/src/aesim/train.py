"""Adam optimisation, the training loop, and accuracy evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledPair, label_index, make_batches
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .model import EsimModel
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters without an entry in ``grads`` are left alone but still share
    the step counter.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.0005
    patience: Optional[int] = 5
    seed: int = 0
    clip_norm: Optional[float] = None
    max_len: int = 64

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be positive, got {self.max_len}")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    dev_accuracy: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def best_accuracy(self) -> Optional[float]:
        return None if self.best_epoch is None else self.dev_accuracy[self.best_epoch]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["best_accuracy"] = self.best_accuracy
        return doc


def batch_loss(model: EsimModel, batch, training: bool = True) -> Tensor:
    premise, hypothesis, labels = batch
    return T.cross_entropy(model.forward(premise, hypothesis, training=training), labels)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def train_epoch(model: EsimModel, pairs: Sequence[LabeledPair], config: TrainConfig, state: AdamState, epoch: int) -> float:
    """One pass over ``pairs``; returns the example-weighted mean loss."""
    params = dict(model.named_parameters())
    batches = make_batches(pairs, model.vocab, config.batch_size, config.seed * 100_003 + epoch, config.max_len)
    total, count = 0.0, 0
    for batch in batches:
        model.zero_grad()
        try:
            loss = batch_loss(model, batch)
        except NumericError as exc:
            raise TrainingError(f"epoch {epoch}: forward pass diverged ({exc})") from exc
        T.backward(loss)
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        if config.clip_norm is not None:
            _clip(grads, config.clip_norm)
        adam_step(params, grads, state)
        n = len(batch[2])
        total += float(loss.data) * n
        count += n
    return total / count


def evaluate(model: EsimModel, pairs: Sequence[LabeledPair], batch_size: int = 128, max_len: int = 64) -> float:
    """Fraction of pairs whose arg-max prediction matches the gold label."""
    if not pairs:
        raise ContractError("cannot evaluate on an empty list of pairs")
    return float(np.mean(predict_labels(model, pairs, batch_size, max_len) == gold_labels(pairs)))


def predict_labels(model: EsimModel, pairs: Sequence[LabeledPair], batch_size: int = 128, max_len: int = 64) -> np.ndarray:
    if model.vocab is None:
        raise ContractError("model has no vocabulary attached")
    preds = []
    with T.no_grad():
        for premise, hypothesis, _ in make_batches(pairs, model.vocab, batch_size, None, max_len):
            preds.append(model.forward(premise, hypothesis, training=False).data.argmax(axis=1))
    return np.concatenate(preds)


def gold_labels(pairs: Sequence[LabeledPair]) -> np.ndarray:
    return np.array([label_index(p.label) for p in pairs])


def train(
    model: EsimModel,
    train_pairs: Sequence[LabeledPair],
    dev_pairs: Optional[Sequence[LabeledPair]],
    config: TrainConfig,
    state: Optional[AdamState] = None,
) -> tuple[TrainReport, dict[str, np.ndarray]]:
    """Train with Adam and keep the weights of the best dev-accuracy epoch.

    When ``dev_pairs`` is None, selection uses accuracy on the training
    pairs. On return the model holds the best weights, which are also
    returned as a state dict. With zero epochs the report is empty and the
    initial weights are returned.
    """
    config.validate()
    if model.vocab is None:
        raise ContractError("model has no vocabulary attached")
    if not train_pairs:
        raise ContractError("no training pairs")
    state = state if state is not None else AdamState(lr=config.lr)
    state.lr = config.lr
    selection = dev_pairs if dev_pairs else train_pairs
    report = TrainReport()
    best = model.state_dict()
    stale = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        loss = train_epoch(model, train_pairs, config, state, epoch)
        if not np.isfinite(loss):
            raise TrainingError(f"epoch {epoch}: loss became {loss}")
        acc = evaluate(model, selection, config.batch_size, config.max_len)
        report.train_loss.append(loss)
        report.dev_accuracy.append(acc)
        report.wall_time.append(time.perf_counter() - started)
        logger.info("epoch %d loss=%.4f dev_acc=%.4f (%.1fs)", epoch, loss, acc, report.wall_time[-1])
        if report.best_epoch is None or acc > report.dev_accuracy[report.best_epoch]:
            report.best_epoch = epoch
            best = model.state_dict()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                logger.info("early stop after epoch %d", epoch)
                break
    model.load_state_dict(best)
    return report, best
