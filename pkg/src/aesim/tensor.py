"""Dense tensors with reverse-mode automatic differentiation.

Every layer in the package is built from the operations below. A tensor
wraps a C-ordered numpy array; operations on tensors that require gradients
record their inputs and a local-gradient closure, and :func:`backward`
replays those records in reverse topological order.

Broadcasting is deliberately absent from the binary elementwise ops: shapes
must agree exactly. Bias rows are added with :func:`add_bias` and per-row
scaling goes through :func:`scale_rows`, which keeps every gradient path
explicit and easy to check against finite differences.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, InvalidMaskError, NumericError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_state = threading.local()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float64)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_precision() -> str:
    return "f64" if _dtype() is np.float64 else "f32"


def set_precision(mode: str) -> None:
    """Set the floating-point width for newly created tensors ("f64" or "f32")."""
    if mode not in _PRECISIONS:
        raise ConfigError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _state.dtype = _PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording of operations inside the block."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional array that may take part in gradient computation.

    Leaf tensors created with ``requires_grad=True`` receive a ``grad`` array
    of the same shape after :func:`backward`. Intermediate results do not
    keep gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype(), order="C")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    name: str,
) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn`` maps the gradient of the output to one gradient (or
    None) per parent. It is only kept when some parent requires a gradient
    and recording is enabled.
    """
    if not np.isfinite(data).all():
        raise NumericError(f"{name} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = name
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Operations reachable from an output, in topological order.

    Each record appears after every record that produced one of its inputs;
    :meth:`backward` visits each record exactly once, last to first.
    """

    def __init__(self, records: list[Tensor]):
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        root = self.records[-1]
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.records):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``grad`` buffers, so call
    :meth:`Tensor.zero_grad` between independent passes.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring a gradient")
    tape = Tape.record(loss)
    tape.backward(np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` either has the same leading
    axes or is a plain 2-D matrix shared across the batch (a weight).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(out, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return make_op(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} to {tuple(shape)}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise DimensionError(
                f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        index = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return make_op(out, tuple(tensors), grad_fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError(f"cannot stack shapes {[t.shape for t in tensors]}")
    ax = axis % (tensors[0].ndim + 1)
    out = np.stack([t.data for t in tensors], axis=ax)

    def grad_fn(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return make_op(out, tuple(tensors), grad_fn, "stack")


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis``, dropping that axis."""
    ax = axis % a.ndim
    shape = a.shape
    out = np.take(a.data, index, axis=ax)

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return make_op(out, (a,), grad_fn, "select")


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``, keeping the axis."""
    ax = axis % a.ndim
    shape = a.shape
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return make_op(out, (a,), grad_fn, "narrow")


def embedding(table: Tensor, indices: np.ndarray, padding_idx: Optional[int] = 0) -> Tensor:
    """Gather rows of ``table``; the padding row never receives gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"index out of range for embedding table with {table.shape[0]} rows")
    out = table.data[idx]
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    return make_op(out, (table,), grad_fn, "embedding")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D ``bias`` to every row along the last axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    n = bias.shape[0]
    return make_op(x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each last-axis vector of ``x`` by the matching scalar in ``weights``."""
    if weights.shape != x.shape[:-1]:
        raise DimensionError(f"scale_rows: weights {weights.shape} do not fit {x.shape}")
    xd, wd = x.data, weights.data[..., None]
    return make_op(xd * wd, (x, weights), lambda g: (g * wd, (g * xd).sum(axis=-1)), "scale_rows")


def where(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``condition`` holds and ``b`` elsewhere."""
    _same_shape("where", a, b)
    cond = np.broadcast_to(np.asarray(condition, dtype=bool), a.shape)
    out = np.where(cond, a.data, b.data)
    return make_op(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)), "where")


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero every position whose mask entry is false; ``mask`` covers the leading axes."""
    m = np.asarray(mask, dtype=bool)
    cond = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    cond = np.broadcast_to(cond, x.shape)
    return make_op(np.where(cond, x.data, 0.0), (x,), lambda g: (np.where(cond, g, 0.0),), "apply_mask")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,), "exp")


def selu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    neg_exp = np.exp(np.minimum(xd, 0.0))
    y = SELU_LAMBDA * np.where(pos, xd, SELU_ALPHA * (neg_exp - 1.0))
    local = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * neg_exp)
    return make_op(y, (x,), lambda g: (g * local,), "selu")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "selu": selu,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch to a named elementwise op (add, sub, mul, tanh, sigmoid, exp, selu)."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# normalisation, pooling, reductions
# ---------------------------------------------------------------------------


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is true.

    Masked positions get weight exactly 0. ``mask`` must broadcast to the
    logits' shape and leave at least one valid entry per row.
    """
    try:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    except ValueError as exc:
        raise DimensionError(f"mask shape {np.shape(mask)} does not fit logits {logits.shape}") from exc
    if not m.any(axis=-1).all():
        raise InvalidMaskError("masked_softmax: a row has no unmasked position")
    shifted = np.where(m, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (logits,), grad_fn, "masked_softmax")


def _expand_mask(mask: Optional[np.ndarray], x: Tensor, axis: int) -> np.ndarray:
    if mask is None:
        return np.ones(x.shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[: axis + 1]:
        raise DimensionError(f"mask {m.shape} must match the leading axes {x.shape[: axis + 1]}")
    return np.broadcast_to(m.reshape(m.shape + (1,) * (x.ndim - axis - 1)), x.shape)


def masked_max(x: Tensor, axis: int = 0, mask: Optional[np.ndarray] = None) -> Tensor:
    """Maximum over ``axis`` ignoring masked steps; ties go to the first index."""
    ax = axis % x.ndim
    m = _expand_mask(mask, x, ax)
    if not m.any(axis=ax).all():
        raise InvalidMaskError("masked_max: every step is masked")
    vals = np.where(m, x.data, -np.inf)
    arg = np.expand_dims(np.argmax(vals, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax).squeeze(ax)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return make_op(out, (x,), grad_fn, "masked_max")


def masked_mean(x: Tensor, axis: int = 0, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over ``axis`` counting only unmasked steps."""
    ax = axis % x.ndim
    m = _expand_mask(mask, x, ax)
    counts = m.sum(axis=ax, keepdims=True)
    if (counts == 0).any():
        raise InvalidMaskError("masked_mean: every step is masked")
    weights = m / counts
    out = (np.where(m, x.data, 0.0) * weights).sum(axis=ax)
    return make_op(out, (x,), lambda g: (np.expand_dims(g, ax) * weights,), "masked_mean")


def reduce(op: str, t: Tensor, axis: int = 0, mask: Optional[np.ndarray] = None) -> Tensor:
    if op == "max":
        return masked_max(t, axis, mask)
    if op == "mean":
        return masked_mean(t, axis, mask)
    raise ContractError(f"unknown reduction {op!r}")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),), "mean")


def dropout(t: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(t.dtype)
    return make_op(t.data * keep, (t,), lambda g: (g * keep,), "dropout")


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)
    return make_op(y, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy: label outside the class range")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / len(labels)),)

    return make_op(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def gradient_errors(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> list[float]:
    """Max relative gradient error for each of ``inputs``.

    ``f`` is called with no arguments and must return a scalar tensor that
    depends on the tensors in ``inputs``; their data is perturbed in place
    and restored afterwards.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("gradient checks must run in 64-bit precision")
        if not t.requires_grad:
            raise ContractError("gradient checks need inputs with requires_grad=True")
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    errors = []
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
                flat[i] = orig
                numeric[i] = (hi - lo) / (2.0 * eps)
            a = a.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            errors.append(float((np.abs(a - numeric) / denom).max()) if flat.size else 0.0)
    return errors


def grad_check(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    errors = gradient_errors(f, inputs, eps)
    return max(errors) if errors else 0.0
