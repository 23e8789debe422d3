"""Finite-difference gradient checks for each layer and the full models."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .data import SequenceBatch
from .errors import ConfigError
from .model import EsimConfig, EsimModel
from .tensor import Tensor

THRESHOLD = 1e-4
# At the default init scale some toy-model gradients fall near 1e-9, below
# what float64 central differences at eps=1e-5 can resolve (~1e-11 absolute).
FULL_MODEL_WEIGHT_SCALE = 2.0

Check = Callable[[np.random.Generator, Callable[[Tensor], Tensor]], tuple[Callable[[], Tensor], list[Tensor]]]


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, 0.5, size=shape), requires_grad=True)


def _readout(out: Tensor) -> Tensor:
    """Project an output onto fixed random weights to get a scalar."""
    weights = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return T.sum(T.mul(out, weights))


def _params(obj) -> list[Tensor]:
    return [t for _, t in L.named_parameters(obj)]


_MASK = np.array([[True, True, True], [True, True, False]])


def _check_lstm_step(rng, hook):
    p = L.LstmParams.init(3, 4, rng)
    xs = [_param(rng, 3) for _ in range(3)]

    def f():
        h = c = Tensor(np.zeros(4))
        for x in xs:
            h, c = L.lstm_step(x, h, c, p)
        return _readout(hook(T.concat([h, c], axis=0)))

    return f, xs + _params(p)


def _check_bilstm(rng, hook):
    fwd, bwd = L.LstmParams.init(3, 4, rng), L.LstmParams.init(3, 4, rng)
    x = _param(rng, 2, 3, 3)

    def f():
        a, b = L.bilstm(x, _MASK, fwd, bwd)
        return _readout(hook(T.concat([a, b], axis=-1)))

    return f, [x] + _params(fwd) + _params(bwd)


def _check_word_attention(rng, hook):
    p = L.WordAttentionParams.init(4, 4, rng)
    states = _param(rng, 2, 3, 4)
    return (lambda: _readout(hook(L.word_attention(states, _MASK, p)))), [states] + _params(p)


def _check_direction_fuse(rng, hook):
    p = L.DirectionFusionParams.init(4, rng)
    s_f, s_b = _param(rng, 2, 3, 4), _param(rng, 2, 3, 4)
    return (lambda: _readout(hook(L.direction_fuse(s_f, s_b, p)))), [s_f, s_b] + _params(p)


def _check_bialstm(rng, hook):
    p = L.BiaLstmParams.init(3, 4, 4, rng)
    x = _param(rng, 2, 3, 3)
    return (lambda: _readout(hook(L.bialstm(x, _MASK, p)))), [x] + _params(p)


def _full_model(variant: str):
    def check(rng, hook):
        cfg = EsimConfig(variant=variant, embed_dim=4, hidden_dim=4, classifier_hidden=4, dropout_rate=0.2)
        model = EsimModel(cfg, vocab_size=10, seed=int(rng.integers(1 << 31)))
        for t in model.parameters():
            t.data *= FULL_MODEL_WEIGHT_SCALE
        premise = SequenceBatch.from_ids([[2, 5, 7], [3, 9]])
        hypothesis = SequenceBatch.from_ids([[4, 5], [8, 1, 6]])
        labels = np.array([0, 2])

        def f():
            logits = model.forward(premise, hypothesis, training=False)
            return T.cross_entropy(hook(logits), labels)

        return f, model.parameters()

    return check


CHECKS: dict[str, Check] = {
    "lstm_step": _check_lstm_step,
    "bilstm": _check_bilstm,
    "word_attention": _check_word_attention,
    "direction_fuse": _check_direction_fuse,
    "bialstm": _check_bialstm,
    "esim_model": _full_model("esim"),
    "aesim_model": _full_model("aesim"),
}


def _faulty_identity(x: Tensor) -> Tensor:
    """Identity whose backward pass is deliberately wrong."""
    return T.make_op(x.data.copy(), (x,), lambda g: (1.5 * g,), "faulty_identity")


def run_grad_checks(seed: int = 0, corrupt: Optional[str] = None, eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error for every named check, in a fixed order.

    ``corrupt`` names a check whose gradient is deliberately broken, which
    lets callers confirm the checker actually detects errors.
    """
    if corrupt is not None and corrupt not in CHECKS:
        raise ConfigError(f"unknown check {corrupt!r}; expected one of {sorted(CHECKS)}")
    results = {}
    with T.precision("f64"):
        for name, build in CHECKS.items():
            rng = np.random.default_rng([seed, len(results)])
            hook = _faulty_identity if name == corrupt else (lambda t: t)
            f, inputs = build(rng, hook)
            results[name] = T.grad_check(f, inputs, eps)
    return results
