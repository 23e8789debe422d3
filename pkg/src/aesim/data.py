"""Corpus loading, tokenisation, vocabularies, embeddings and batching."""

from __future__ import annotations

import json
import logging
import re
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, ParseError

logger = logging.getLogger(__name__)

NLI_LABELS = ("entailment", "neutral", "contradiction")
QUORA_LABELS = ("not_duplicate", "duplicate")
PAD, OOV = "<pad>", "<oov>"
PAD_INDEX, OOV_INDEX = 0, 1
MAX_LEN = 64
OOV_STD = 0.1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def labels_for(num_classes: int) -> tuple[str, ...]:
    if num_classes == 3:
        return NLI_LABELS
    if num_classes == 2:
        return QUORA_LABELS
    raise DataError(f"no label set has {num_classes} classes")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens.

    >>> tokenize("A dog is in the water.")
    ['a', 'dog', 'is', 'in', 'the', 'water', '.']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class LabeledPair:
    premise: tuple[str, ...]
    hypothesis: tuple[str, ...]
    label: str

    def __post_init__(self):
        if not self.premise or not self.hypothesis:
            raise DataError("premise and hypothesis must both contain tokens")
        if self.label not in NLI_LABELS and self.label not in QUORA_LABELS:
            raise DataError(f"unknown label {self.label!r}")

    @classmethod
    def from_text(cls, premise: str, hypothesis: str, label: str) -> LabeledPair:
        return cls(tuple(tokenize(premise)), tuple(tokenize(hypothesis)), label)


def load_snli_jsonl(path) -> list[LabeledPair]:
    """Read SNLI/MultiNLI JSON lines, dropping pairs whose gold label is '-'."""
    pairs, dropped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                label = record["gold_label"]
                s1, s2 = record["sentence1"], record["sentence2"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if label == "-":
                dropped += 1
                continue
            if label not in NLI_LABELS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            try:
                pairs.append(LabeledPair.from_text(s1, s2, label))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    logger.info("%s: kept %d pairs, dropped %d unlabeled", path, len(pairs), dropped)
    return pairs


def load_quora_tsv(path) -> list[LabeledPair]:
    """Read the 6-column Quora question-pair TSV. A header row is skipped."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ParseError(f"{path}:{lineno}: expected 6 tab-separated columns, found {len(cols)}")
            if lineno == 1 and cols[0] == "id":
                continue
            flag = cols[5].strip()
            if flag not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: is_duplicate must be 0 or 1, got {flag!r}")
            try:
                pairs.append(LabeledPair.from_text(cols[3], cols[4], QUORA_LABELS[int(flag)]))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return pairs


def load_pairs(path) -> list[LabeledPair]:
    """Dispatch on file extension: ``.tsv`` is Quora, anything else JSON lines."""
    if str(path).endswith(".tsv"):
        return load_quora_tsv(path)
    return load_snli_jsonl(path)


class Vocab:
    """Token to index map with padding at 0 and the OOV bucket at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, OOV]
        self.stoi: dict[str, int] = {PAD: PAD_INDEX, OOV: OOV_INDEX}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, pairs: Iterable[LabeledPair], min_freq: int = 1) -> Vocab:
        """Vocabulary of training tokens seen at least ``min_freq`` times, in first-seen order."""
        counts: Counter = Counter()
        for pair in pairs:
            counts.update(pair.premise)
            counts.update(pair.hypothesis)
        return cls(tok for tok, n in counts.items() if n >= min_freq)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, OOV_INDEX)

    def encode(self, tokens: Sequence[str], max_len: Optional[int] = MAX_LEN) -> list[int]:
        ids = [self.index(t) for t in tokens]
        return ids[:max_len] if max_len else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass
class SequenceBatch:
    """Padded index matrix with its mask and lengths."""

    indices: np.ndarray  # (B, T) int64
    mask: np.ndarray  # (B, T) bool
    lengths: np.ndarray  # (B,) int64

    @classmethod
    def from_ids(cls, sequences: Sequence[Sequence[int]], pad_to: Optional[int] = None) -> SequenceBatch:
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        if len(sequences) == 0 or (lengths == 0).any():
            raise DataError("every sequence in a batch needs at least one token")
        width = int(lengths.max()) if pad_to is None else pad_to
        if width < lengths.max():
            raise ContractError(f"pad_to={pad_to} is shorter than the longest sequence")
        indices = np.zeros((len(sequences), width), dtype=np.int64)
        for row, seq in enumerate(sequences):
            indices[row, : len(seq)] = seq
        mask = np.arange(width)[None, :] < lengths[:, None]
        return cls(indices, mask, lengths)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def max_len(self) -> int:
        return self.indices.shape[1]


def _token_rng(token: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(token.encode("utf-8"))])


def load_glove_text(path, vocab: Vocab, dim: int = 300, seed: int = 0) -> np.ndarray:
    """Embedding matrix for ``vocab`` from a GloVe-style text file.

    Rows of tokens found in the file are copied verbatim. Every other row,
    the OOV bucket included, is drawn from N(0, 0.1**2) with a generator
    keyed on the token itself, so the row does not depend on vocabulary
    order. The padding row is zero.
    """
    table = np.zeros((len(vocab), dim), dtype=np.float64)
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ParseError(
                    f"{path}:{lineno}: vector for {token!r} has {len(values)} values, expected {dim}"
                )
            if token not in vocab:
                continue
            try:
                row = np.array([float(v) for v in values])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric value in vector for {token!r}") from exc
            idx = vocab.index(token)
            table[idx] = row
            found[idx] = True
    found[PAD_INDEX] = True
    for idx in np.flatnonzero(~found):
        table[idx] = _token_rng(vocab.itos[idx], seed).normal(0.0, OOV_STD, size=dim)
    logger.info("embeddings: %d/%d tokens found in %s", int(found.sum()) - 1, len(vocab) - 1, path)
    return table


def random_embeddings(vocab: Vocab, dim: int, seed: int = 0) -> np.ndarray:
    """Gaussian rows for every token (used when no pre-trained file is given)."""
    table = np.zeros((len(vocab), dim))
    for idx in range(1, len(vocab)):
        table[idx] = _token_rng(vocab.itos[idx], seed).normal(0.0, OOV_STD, size=dim)
    return table


Batch = tuple[SequenceBatch, SequenceBatch, np.ndarray]


def make_batches(
    pairs: Sequence[LabeledPair],
    vocab: Vocab,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    max_len: int = MAX_LEN,
) -> list[Batch]:
    """Group pairs into padded batches; the last batch may be short.

    With ``shuffle_seed=None`` the input order is kept.
    """
    if not pairs:
        raise ContractError("cannot batch an empty list of pairs")
    if batch_size < 1:
        raise ContractError(f"batch size must be positive, got {batch_size}")
    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(pairs))
    batches = []
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        premise = SequenceBatch.from_ids([vocab.encode(p.premise, max_len) for p in chunk])
        hypothesis = SequenceBatch.from_ids([vocab.encode(p.hypothesis, max_len) for p in chunk])
        labels = np.array([label_index(p.label) for p in chunk], dtype=np.int64)
        batches.append((premise, hypothesis, labels))
    return batches


def label_index(label: str) -> int:
    if label in NLI_LABELS:
        return NLI_LABELS.index(label)
    if label in QUORA_LABELS:
        return QUORA_LABELS.index(label)
    raise DataError(f"unknown label {label!r}")


def num_classes_of(pairs: Sequence[LabeledPair]) -> int:
    """3 for NLI corpora, 2 for Quora; mixing the two is an error."""
    kinds = {3 if p.label in NLI_LABELS else 2 for p in pairs}
    if len(kinds) != 1:
        raise DataError("pairs mix NLI and duplicate-question labels" if kinds else "no pairs")
    return kinds.pop()


def find_split(data_dir, split: str) -> list[Path]:
    """Files in ``data_dir`` whose name contains ``split`` and ends in .jsonl/.tsv."""
    root = Path(data_dir)
    return sorted(p for p in root.iterdir() if split in p.name and p.suffix in (".jsonl", ".tsv"))
