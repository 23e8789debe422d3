"""ESIM and aESIM sentence-pair classifiers.

The pipeline has four stages: input encoding, local inference by soft
alignment, inference composition, and pooled classification. The two
variants differ only in the encoder used by the first and third stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import SequenceBatch, Vocab, labels_for
from .errors import ConfigError, DataError, DimensionError, InvalidMaskError
from .layers import BiaLstmParams, BiLstmParams, Encoder, Linear, encode, named_parameters
from .tensor import Tensor

VARIANTS = ("esim", "aesim")
DIRECTIONS = ("premise_rows", "hypothesis_cols")


@dataclass
class EsimConfig:
    variant: str = "aesim"
    embed_dim: int = 300
    hidden_dim: int = 300
    attention_dim: Optional[int] = None  # defaults to hidden_dim
    num_classes: int = 3
    dropout_rate: float = 0.2
    classifier_hidden: int = 300

    def __post_init__(self):
        if self.attention_dim is None:
            self.attention_dim = self.hidden_dim
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        for name in ("embed_dim", "hidden_dim", "attention_dim", "classifier_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Classifier:
    hidden: Linear
    output: Linear


@dataclass
class EsimParams:
    embedding: Tensor
    encoder1: Encoder
    projection: Linear
    encoder2: Encoder
    classifier: Classifier


@dataclass
class AlignmentExport:
    premise: list[str]
    hypothesis: list[str]
    weights: np.ndarray  # l_p x l_q
    direction: str

    def to_dict(self) -> dict:
        return {
            "premise": list(self.premise),
            "hypothesis": list(self.hypothesis),
            "weights": self.weights.tolist(),
            "direction": self.direction,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> AlignmentExport:
        return cls(doc["premise"], doc["hypothesis"], np.asarray(doc["weights"], dtype=float), doc["direction"])


def similarity_matrix(p_bar: Tensor, q_bar: Tensor) -> Tensor:
    """Dot products between every premise and hypothesis token, ``(B, l_p, l_q)``."""
    if p_bar.shape[-1] != q_bar.shape[-1]:
        raise DimensionError(f"feature widths differ: {p_bar.shape} vs {q_bar.shape}")
    return T.matmul(p_bar, T.transpose(q_bar))


def soft_align(
    sim: Tensor, p_bar: Tensor, q_bar: Tensor, p_mask: np.ndarray, q_mask: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Attention-weighted summaries of the other sentence for every token.

    Premise token ``i`` attends over hypothesis tokens with weights
    ``softmax_j(sim[i, :])``; hypothesis token ``j`` attends over premise
    tokens with ``softmax_i(sim[:, j])``. Padding is excluded from both.
    """
    p_mask, q_mask = np.asarray(p_mask, bool), np.asarray(q_mask, bool)
    if sim.shape != p_mask.shape + q_mask.shape[-1:] or sim.shape[:-2] + sim.shape[-1:] != q_mask.shape:
        raise DimensionError(f"similarity {sim.shape} does not fit masks {p_mask.shape}, {q_mask.shape}")
    if not q_mask.any(axis=-1).all() or not p_mask.any(axis=-1).all():
        raise InvalidMaskError("soft_align: a sentence has no unmasked token")
    to_q = T.masked_softmax(sim, q_mask[..., None, :])
    to_p = T.masked_softmax(T.transpose(sim), p_mask[..., None, :])
    return T.matmul(to_q, q_bar), T.matmul(to_p, p_bar)


def enhance(x_bar: Tensor, x_tilde: Tensor) -> Tensor:
    """Concatenate ``[x; x~; x - x~; x * x~]`` along the feature axis."""
    if x_bar.shape != x_tilde.shape:
        raise DimensionError(f"enhance: shapes {x_bar.shape} and {x_tilde.shape} differ")
    return T.concat([x_bar, x_tilde, T.sub(x_bar, x_tilde), T.mul(x_bar, x_tilde)], axis=-1)


def _as_batch(x) -> SequenceBatch:
    if isinstance(x, SequenceBatch):
        return x
    return SequenceBatch.from_ids([list(x)])


class EsimModel:
    """Parameters and forward computation for either model variant.

    Premise and hypothesis share every weight. ``vocab`` is optional but
    needed for token-level helpers such as :meth:`export_alignment`.
    """

    def __init__(
        self,
        config: EsimConfig,
        vocab_size: Optional[int] = None,
        *,
        vocab: Optional[Vocab] = None,
        embeddings: Optional[np.ndarray] = None,
        seed: int = 0,
    ):
        config.validate()
        self.config = config
        self.vocab = vocab
        if vocab_size is None:
            if embeddings is not None:
                vocab_size = embeddings.shape[0]
            elif vocab is not None:
                vocab_size = len(vocab)
            else:
                raise ConfigError("need a vocabulary size, a vocabulary, or an embedding matrix")
        init_rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng([seed, 1])
        self.params = self._init_params(config, vocab_size, init_rng, embeddings)

    @staticmethod
    def _init_params(cfg: EsimConfig, vocab_size: int, rng, embeddings) -> EsimParams:
        if embeddings is None:
            embeddings = rng.normal(0.0, 0.1, size=(vocab_size, cfg.embed_dim))
            embeddings[0] = 0.0
        embeddings = np.asarray(embeddings)
        if embeddings.shape != (vocab_size, cfg.embed_dim):
            raise DimensionError(f"embedding matrix {embeddings.shape} != ({vocab_size}, {cfg.embed_dim})")
        d_h, d_a = cfg.hidden_dim, cfg.attention_dim

        def encoder(d_in: int) -> Encoder:
            if cfg.variant == "aesim":
                return BiaLstmParams.init(d_in, d_h, d_a, rng)
            return BiLstmParams.init(d_in, d_h, rng)

        encoder1 = encoder(cfg.embed_dim)
        projection = Linear.init(8 * d_h, d_h, rng)
        encoder2 = encoder(d_h)
        classifier = Classifier(
            Linear.init(8 * d_h, cfg.classifier_hidden, rng),
            Linear.init(cfg.classifier_hidden, cfg.num_classes, rng),
        )
        return EsimParams(Tensor(embeddings, requires_grad=True), encoder1, projection, encoder2, classifier)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return named_parameters(self.params)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: saved shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], order="C")

    @property
    def labels(self) -> tuple[str, ...]:
        return labels_for(self.config.num_classes)

    # -- pipeline stages ------------------------------------------------------

    def _dropout(self, x: Tensor, training: bool) -> Tensor:
        return T.dropout(x, self.config.dropout_rate, training, self.rng)

    def _embed(self, batch: SequenceBatch, training: bool) -> Tensor:
        table = self.params.embedding
        idx = batch.indices
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise DataError(f"token index out of range for vocabulary of size {table.shape[0]}")
        return self._dropout(T.embedding(table, idx), training)

    def encode_inputs(
        self, premise: SequenceBatch, hypothesis: SequenceBatch, training: bool = False
    ) -> tuple[Tensor, Tensor]:
        enc = self.params.encoder1
        p_bar = encode(self._embed(premise, training), premise.mask, enc)
        q_bar = encode(self._embed(hypothesis, training), hypothesis.mask, enc)
        return p_bar, q_bar

    def compose(
        self, m_p: Tensor, m_q: Tensor, p_mask: np.ndarray, q_mask: np.ndarray, training: bool = False
    ) -> tuple[Tensor, Tensor]:
        """Project the enhanced features down with selu, then run the second encoder."""
        proj, enc = self.params.projection, self.params.encoder2
        v_p = encode(self._dropout(T.selu(proj(m_p)), training), p_mask, enc)
        v_q = encode(self._dropout(T.selu(proj(m_q)), training), q_mask, enc)
        return v_p, v_q

    def pool_and_classify(
        self, v_p: Tensor, v_q: Tensor, p_mask: np.ndarray, q_mask: np.ndarray, training: bool = False
    ) -> Tensor:
        pooled = T.concat(
            [
                T.masked_mean(v_p, 1, p_mask),
                T.masked_max(v_p, 1, p_mask),
                T.masked_mean(v_q, 1, q_mask),
                T.masked_max(v_q, 1, q_mask),
            ],
            axis=-1,
        )
        clf = self.params.classifier
        hidden = T.selu(clf.hidden(self._dropout(pooled, training)))
        return clf.output(self._dropout(hidden, training))

    def forward(self, premise: SequenceBatch, hypothesis: SequenceBatch, training: bool = False) -> Tensor:
        """Raw class logits of shape ``(B, num_classes)``."""
        if len(premise) != len(hypothesis):
            raise DimensionError(f"batch sizes differ: {len(premise)} premises, {len(hypothesis)} hypotheses")
        p_mask, q_mask = premise.mask, hypothesis.mask
        p_bar, q_bar = self.encode_inputs(premise, hypothesis, training)
        sim = similarity_matrix(p_bar, q_bar)
        p_tilde, q_tilde = soft_align(sim, p_bar, q_bar, p_mask, q_mask)
        v_p, v_q = self.compose(enhance(p_bar, p_tilde), enhance(q_bar, q_tilde), p_mask, q_mask, training)
        return self.pool_and_classify(v_p, v_q, p_mask, q_mask, training)

    __call__ = forward

    def predict_proba(self, premise: SequenceBatch, hypothesis: SequenceBatch) -> np.ndarray:
        with T.no_grad():
            logits = self.forward(premise, hypothesis, training=False).data
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    # -- inspection -----------------------------------------------------------

    def export_alignment(
        self, premise: Sequence[str], hypothesis: Sequence[str], direction: str = "premise_rows"
    ) -> AlignmentExport:
        """Soft-alignment weights between two tokenised sentences (eval mode).

        ``premise_rows`` normalises each row over hypothesis tokens;
        ``hypothesis_cols`` normalises each column over premise tokens. The
        matrix is always ``l_p x l_q``.
        """
        if direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        if self.vocab is None:
            raise ConfigError("export_alignment needs a model with a vocabulary")
        if not premise or not hypothesis:
            raise DataError("premise and hypothesis must both contain tokens")
        p_ids = SequenceBatch.from_ids([self.vocab.encode(premise, max_len=None)])
        q_ids = SequenceBatch.from_ids([self.vocab.encode(hypothesis, max_len=None)])
        with T.no_grad():
            p_bar, q_bar = self.encode_inputs(p_ids, q_ids)
            sim = similarity_matrix(p_bar, q_bar)
            if direction == "premise_rows":
                weights = T.masked_softmax(sim, q_ids.mask[:, None, :]).data[0]
            else:
                weights = T.masked_softmax(T.transpose(sim), p_ids.mask[:, None, :]).data[0].T
        return AlignmentExport(list(premise), list(hypothesis), np.ascontiguousarray(weights), direction)


def aesim_surplus(hidden_dim: int, attention_dim: int) -> int:
    """Extra parameters aESIM carries over ESIM across its two encoder layers."""
    per_layer = 2 * (hidden_dim * attention_dim + 2 * attention_dim) + 2 * (hidden_dim * hidden_dim + hidden_dim)
    return 2 * per_layer
