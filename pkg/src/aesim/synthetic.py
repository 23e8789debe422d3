"""Rule-labelled toy NLI corpus for smoke tests and convergence checks.

Premises are short strings of content words. The hypothesis label follows
from a fixed rule:

* entailment: the hypothesis is a subsequence of the premise;
* contradiction: a premise subsequence with the negation word inserted;
* neutral: content words that do not occur in the premise.
"""

from __future__ import annotations

import numpy as np

from .data import NLI_LABELS, LabeledPair

NEGATION = "not"


def toy_vocabulary(size: int = 40) -> list[str]:
    """``size`` word types: the negation word plus ``size - 1`` content words."""
    return [NEGATION] + [f"w{i:02d}" for i in range(size - 1)]


def toy_corpus(n_pairs: int = 64, vocab_size: int = 40, seed: int = 0) -> list[LabeledPair]:
    rng = np.random.default_rng(seed)
    content = toy_vocabulary(vocab_size)[1:]
    pairs = []
    for k in range(n_pairs):
        label = NLI_LABELS[k % 3]
        premise = rng.choice(content, size=int(rng.integers(4, 7)), replace=False).tolist()
        if label == "neutral":
            unused = [w for w in content if w not in premise]
            hypothesis = rng.choice(unused, size=int(rng.integers(2, 4)), replace=False).tolist()
        else:
            keep = np.sort(rng.choice(len(premise), size=int(rng.integers(2, 4)), replace=False))
            hypothesis = [premise[i] for i in keep]
            if label == "contradiction":
                hypothesis.insert(int(rng.integers(0, len(hypothesis) + 1)), NEGATION)
        pairs.append(LabeledPair(tuple(premise), tuple(hypothesis), label))
    return pairs
