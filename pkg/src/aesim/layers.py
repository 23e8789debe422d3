"""Sequence encoders: LSTM, Bi-LSTM, word attention, direction fusion, Bi-aLSTM.

All functions take batched input of shape ``(B, T, d)`` with a boolean mask
of shape ``(B, T)`` marking real tokens. Sequences are left-aligned, so
padding only ever sits at the end of a row.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor in a dataclass tree."""
    for field in dataclasses.fields(obj):
        value = getattr(obj, field.name)
        name = f"{prefix}{field.name}"
        if isinstance(value, Tensor):
            yield name, value
        elif dataclasses.is_dataclass(value):
            yield from named_parameters(value, name + ".")


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> Linear:
        return cls(glorot(rng, d_in, d_out), zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.w), self.b)


@dataclass
class LstmParams:
    """Gate weights of one LSTM direction (input, forget, output, candidate)."""

    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_c: Tensor
    u_i: Tensor
    u_f: Tensor
    u_o: Tensor
    u_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> LstmParams:
        w = {f"w_{g}": glorot(rng, d_in, d_h) for g in "ifoc"}
        u = {f"u_{g}": glorot(rng, d_h, d_h) for g in "ifoc"}
        b = {f"b_{g}": zeros(d_h) for g in "ifoc"}
        b["b_f"] = Tensor(np.ones(d_h), requires_grad=True)
        return cls(**w, **u, **b)

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_i.shape[1]

    def fused(self) -> tuple[Tensor, Tensor, Tensor]:
        """Gate blocks concatenated in (i, f, o, c) order."""
        w = T.concat([self.w_i, self.w_f, self.w_o, self.w_c], axis=1)
        u = T.concat([self.u_i, self.u_f, self.u_o, self.u_c], axis=1)
        b = T.concat([self.b_i, self.b_f, self.b_o, self.b_c], axis=0)
        return w, u, b


@dataclass
class BiLstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> BiLstmParams:
        return cls(LstmParams.init(d_in, d_h, rng), LstmParams.init(d_in, d_h, rng))

    @property
    def output_dim(self) -> int:
        return 2 * self.fwd.hidden_dim


@dataclass
class WordAttentionParams:
    w: Tensor  # d_h x d_a
    b: Tensor  # d_a
    u_w: Tensor  # d_a context vector

    @classmethod
    def init(cls, d_h: int, d_a: int, rng: np.random.Generator) -> WordAttentionParams:
        return cls(glorot(rng, d_h, d_a), zeros(d_a), glorot(rng, d_a, 1, shape=(d_a,)))


@dataclass
class DirectionFusionParams:
    w_f: Tensor
    b_f: Tensor
    w_b: Tensor
    b_b: Tensor

    @classmethod
    def init(cls, d_h: int, rng: np.random.Generator) -> DirectionFusionParams:
        return cls(glorot(rng, d_h, d_h), zeros(d_h), glorot(rng, d_h, d_h), zeros(d_h))


@dataclass
class BiaLstmParams:
    fwd: LstmParams
    bwd: LstmParams
    attn_fwd: WordAttentionParams
    attn_bwd: WordAttentionParams
    fusion: DirectionFusionParams

    @classmethod
    def init(cls, d_in: int, d_h: int, d_a: int, rng: np.random.Generator) -> BiaLstmParams:
        return cls(
            LstmParams.init(d_in, d_h, rng),
            LstmParams.init(d_in, d_h, rng),
            WordAttentionParams.init(d_h, d_a, rng),
            WordAttentionParams.init(d_h, d_a, rng),
            DirectionFusionParams.init(d_h, rng),
        )

    @property
    def output_dim(self) -> int:
        return 2 * self.fwd.hidden_dim


Encoder = Union[BiLstmParams, BiaLstmParams]


def _cell(gates: Tensor, c_prev: Tensor, d_h: int) -> tuple[Tensor, Tensor]:
    sig = T.sigmoid(T.narrow(gates, -1, 0, 3 * d_h))
    i = T.narrow(sig, -1, 0, d_h)
    f = T.narrow(sig, -1, d_h, 2 * d_h)
    o = T.narrow(sig, -1, 2 * d_h, 3 * d_h)
    cand = T.tanh(T.narrow(gates, -1, 3 * d_h, 4 * d_h))
    c = T.add(T.mul(f, c_prev), T.mul(i, cand))
    h = T.mul(o, T.tanh(c))
    return h, c


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM transition; accepts single vectors or ``(B, d)`` rows."""
    d_h = p.hidden_dim
    if x_t.shape[-1] != p.input_dim or h_prev.shape[-1] != d_h or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not fit d_in={p.input_dim}, d_h={d_h}"
        )
    vector = x_t.ndim == 1
    if vector:
        x_t, h_prev, c_prev = (T.reshape(v, (1, -1)) for v in (x_t, h_prev, c_prev))
    w, u, b = p.fused()
    gates = T.add(T.add_bias(T.matmul(x_t, w), b), T.matmul(h_prev, u))
    h, c = _cell(gates, c_prev, d_h)
    if vector:
        h, c = T.reshape(h, (d_h,)), T.reshape(c, (d_h,))
    return h, c


def _scan(x: Tensor, mask: np.ndarray, p: LstmParams, reverse: bool) -> Tensor:
    batch, steps, d_in = x.shape
    if d_in != p.input_dim:
        raise DimensionError(f"input width {d_in} does not match LSTM input width {p.input_dim}")
    d_h = p.hidden_dim
    w, u, b = p.fused()
    projected = T.add_bias(T.matmul(x, w), b)
    h = Tensor(np.zeros((batch, d_h), dtype=x.dtype))
    c = Tensor(np.zeros((batch, d_h), dtype=x.dtype))
    outputs: list[Tensor] = [None] * steps  # type: ignore[list-item]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        gates = T.add(T.select(projected, 1, t), T.matmul(h, u))
        h_new, c_new = _cell(gates, c, d_h)
        live = mask[:, t : t + 1]
        h = T.where(live, h_new, h)
        c = T.where(live, c_new, c)
        outputs[t] = h
    return T.apply_mask(T.stack(outputs, axis=1), mask)


def _check_sequence(x: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise DimensionError(f"expected (B, T, d) input with (B, T) mask, got {x.shape} and {mask.shape}")
    if x.shape[1] == 0:
        raise ContractError("cannot encode an empty sequence")
    return mask


def bilstm(x: Tensor, mask: np.ndarray, fwd: LstmParams, bwd: LstmParams) -> tuple[Tensor, Tensor]:
    """Left-to-right and right-to-left hidden states, zero at padded steps."""
    mask = _check_sequence(x, mask)
    return _scan(x, mask, fwd, reverse=False), _scan(x, mask, bwd, reverse=True)


def attention_weights(states: Tensor, mask: np.ndarray, p: WordAttentionParams) -> Tensor:
    """Normalised word importances over the time axis, shape ``(B, T)``."""
    u = T.tanh(T.add_bias(T.matmul(states, p.w), p.b))
    d_a = p.u_w.shape[0]
    scores = T.matmul(u, T.reshape(p.u_w, (d_a, 1)))
    scores = T.reshape(scores, states.shape[:-1])
    return T.masked_softmax(scores, mask)


def word_attention(states: Tensor, mask: np.ndarray, p: WordAttentionParams) -> Tensor:
    """Rescale each token state by its attention weight (no pooling)."""
    return T.scale_rows(states, attention_weights(states, mask, p))


def direction_fuse(s_fwd: Tensor, s_bwd: Tensor, p: DirectionFusionParams) -> Tensor:
    """``tanh([W_F s_fwd + b_F ; W_B s_bwd + b_B])`` on the last axis."""
    d_h = p.w_f.shape[0]
    if s_fwd.shape != s_bwd.shape or s_fwd.shape[-1] != d_h:
        raise DimensionError(f"direction_fuse: {s_fwd.shape} and {s_bwd.shape} do not fit d_h={d_h}")
    vector = s_fwd.ndim == 1
    if vector:
        s_fwd, s_bwd = T.reshape(s_fwd, (1, d_h)), T.reshape(s_bwd, (1, d_h))
    fwd = T.add_bias(T.matmul(s_fwd, p.w_f), p.b_f)
    bwd = T.add_bias(T.matmul(s_bwd, p.w_b), p.b_b)
    out = T.tanh(T.concat([fwd, bwd], axis=-1))
    return T.reshape(out, (2 * d_h,)) if vector else out


def bialstm(x: Tensor, mask: np.ndarray, p: BiaLstmParams) -> Tensor:
    """Bi-LSTM, per-direction word attention, then adaptive direction fusion."""
    mask = _check_sequence(x, mask)
    f_fwd, f_bwd = bilstm(x, mask, p.fwd, p.bwd)
    s_fwd = word_attention(f_fwd, mask, p.attn_fwd)
    s_bwd = word_attention(f_bwd, mask, p.attn_bwd)
    return T.apply_mask(direction_fuse(s_fwd, s_bwd, p.fusion), mask)


def encode(x: Tensor, mask: np.ndarray, p: Encoder) -> Tensor:
    """Run either encoder kind; both produce ``(B, T, 2*d_h)``."""
    if isinstance(p, BiaLstmParams):
        return bialstm(x, mask, p)
    f_fwd, f_bwd = bilstm(x, mask, p.fwd, p.bwd)
    return T.concat([f_fwd, f_bwd], axis=-1)
