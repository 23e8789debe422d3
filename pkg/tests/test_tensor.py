import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aesim import tensor as T
from aesim.errors import ConfigError, ContractError, DimensionError, InvalidMaskError
from aesim.tensor import Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


def triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][r] * b[r][j] for r in range(k)) for j in range(n)] for i in range(m)]


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_by_column(self):
        assert triple_loop_matmul([[1, 2]], [[3], [4]]) == [[11]]
        np.testing.assert_array_equal(T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])

    def test_random_against_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a.tolist(), b.tolist()), atol=1e-12)

    def test_inner_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_shared_weight_gradient_sums_over_batch(self, rng):
        x, w = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 2)))
        assert T.grad_check(lambda: T.sum(T.tanh(T.matmul(x, w))), [x, w]) < 1e-6


class TestElementwise:
    def test_known_values(self):
        assert T.tanh(Tensor(0.0)).item() == 0.0
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert T.selu(Tensor(0.0)).item() == 0.0
        assert T.selu(Tensor(1.0)).item() == 1.0507009873554805

    def test_selu_negative_branch(self):
        expected = 1.0507009873554805 * 1.6732632423543772 * (math.exp(-2.0) - 1.0)
        assert T.selu(Tensor(-2.0)).item() == pytest.approx(expected, rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(DimensionError):
            T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_dispatch(self):
        np.testing.assert_array_equal(T.elementwise("sub", Tensor([3.0]), Tensor([1.0])).data, [2.0])
        with pytest.raises(ContractError):
            T.elementwise("relu", Tensor([1.0]))

    def test_bias_and_row_scaling(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(T.add_bias(x, Tensor([1.0, 2.0, 3.0])).data, [[1, 3, 5], [4, 6, 8]])
        np.testing.assert_array_equal(T.scale_rows(x, Tensor([2.0, 0.5])).data, [[0, 2, 4], [1.5, 2, 2.5]])
        with pytest.raises(DimensionError):
            T.add_bias(x, Tensor([1.0, 2.0]))

    def test_bounded_inputs_stay_finite(self, rng):
        x = Tensor(rng.uniform(-50, 50, size=1000))
        for op in ("tanh", "sigmoid", "exp", "selu"):
            assert np.isfinite(T.elementwise(op, x).data).all()


class TestMaskedSoftmax:
    def test_uniform(self):
        out = T.masked_softmax(Tensor([0.0, 0.0, 0.0]), np.array([True, True, True]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_two_of_three(self):
        e = math.e
        out = T.masked_softmax(Tensor([1.0, 2.0, 3.0]), np.array([True, True, False]))
        np.testing.assert_allclose(out.data, [1 / (1 + e), e / (1 + e), 0.0], atol=1e-15)
        assert out.data[2] == 0.0

    def test_fully_masked_row(self):
        with pytest.raises(InvalidMaskError):
            T.masked_softmax(Tensor([1.0, 2.0]), np.array([False, False]))

    def test_large_logits_do_not_overflow(self):
        out = T.masked_softmax(Tensor([1000.0, 999.0]), np.array([True, True]))
        np.testing.assert_allclose(out.data.sum(), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(
        rows=st.integers(1, 5),
        cols=st.integers(1, 7),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_normalisation_property(self, rows, cols, seed):
        gen = np.random.default_rng(seed)
        logits = gen.uniform(-50, 50, size=(rows, cols))
        mask = gen.random((rows, cols)) < 0.6
        mask[np.arange(rows), gen.integers(0, cols, size=rows)] = True
        out = T.masked_softmax(Tensor(logits), mask).data
        assert (out >= 0).all()
        assert (out[~mask] == 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestConcatAndReduce:
    def test_concat_columns(self):
        out = T.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
        np.testing.assert_array_equal(out.data, [[1, 3], [2, 4]])

    def test_concat_enhancement_width(self):
        parts = [Tensor(np.ones((1, 600))) for _ in range(4)]
        assert T.concat(parts, axis=1).shape == (1, 2400)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))], axis=1)

    def test_max_and_mean(self):
        x = Tensor([[1.0, 5.0], [3.0, 2.0]])
        np.testing.assert_array_equal(T.reduce("max", x).data, [3, 5])
        np.testing.assert_array_equal(T.reduce("mean", x).data, [2, 3.5])
        np.testing.assert_array_equal(T.reduce("mean", x, mask=np.array([True, False])).data, [1, 5])

    def test_all_masked(self):
        x = Tensor([[1.0, 5.0], [3.0, 2.0]])
        for op in ("max", "mean"):
            with pytest.raises(InvalidMaskError):
                T.reduce(op, x, mask=np.array([False, False]))

    def test_max_gradient_goes_to_first_tie(self):
        x = leaf([[2.0, 1.0], [2.0, 3.0]])
        T.backward(T.sum(T.masked_max(x, 0)))
        np.testing.assert_array_equal(x.grad, [[1, 0], [0, 1]])


class TestDropout:
    def test_identity_cases(self, rng):
        x = Tensor(rng.normal(size=10))
        assert T.dropout(x, 0.0, True, rng) is x
        assert T.dropout(x, 0.5, False, rng) is x

    def test_inverted_scaling_mean(self):
        out = T.dropout(Tensor(np.ones(100_000)), 0.2, True, np.random.default_rng(7))
        assert abs(out.data.mean() - 1.0) < 0.02
        assert set(np.unique(out.data)) <= {0.0, 1.25}

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate, rng):
        with pytest.raises(ConfigError):
            T.dropout(Tensor([1.0]), rate, True, rng)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(3, 2)))
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square(self):
        x = leaf([1.0, 2.0, 3.0])
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_two_consumers_accumulate(self, rng):
        x = leaf(rng.normal(size=4))
        a, b = T.tanh(x), T.exp(x)
        T.backward(T.sum(T.add(a, b)))
        np.testing.assert_allclose(x.grad, (1 - np.tanh(x.data) ** 2) + np.exp(x.data), rtol=1e-14)

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            T.backward(T.tanh(leaf([1.0, 2.0])))

    def test_tape_is_topological(self, rng):
        x = leaf(rng.normal(size=3))
        y = T.tanh(x)
        loss = T.sum(T.mul(y, T.exp(y)))
        tape = T.Tape.record(loss)
        position = {id(node): i for i, node in enumerate(tape.records)}
        for node in tape.records:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]
        assert len(position) == len(tape.records)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.tanh(x)
        assert not y.requires_grad

    def test_embedding_padding_row_frozen(self):
        table = leaf(np.arange(8.0).reshape(4, 2))
        T.backward(T.sum(T.embedding(table, np.array([[0, 2, 2]]))))
        np.testing.assert_array_equal(table.grad, [[0, 0], [0, 0], [2, 2], [0, 0]])


def _random_inputs(gen):
    return leaf(gen.uniform(-2, 2, size=(3, 4))), leaf(gen.uniform(-2, 2, size=(4, 3)))


def _readout(out):
    """Contract an op's output with fixed weights so every entry reaches the loss linearly."""
    return T.sum(T.mul(out, Tensor(np.random.default_rng(5).normal(size=out.shape))))


_MASK3 = np.array([True, False, True])

PRIMITIVES = {
    "matmul": lambda a, b: T.matmul(a, b),
    "add": lambda a, b: T.add(a, T.transpose(b)),
    "sub": lambda a, b: T.sub(a, T.transpose(b)),
    "mul": lambda a, b: T.mul(a, T.transpose(b)),
    "tanh": lambda a, b: T.tanh(a),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "exp": lambda a, b: T.exp(a),
    "selu": lambda a, b: T.selu(a),
    "add_bias": lambda a, b: T.add_bias(a, T.select(b, 1, 0)),
    "scale_rows": lambda a, b: T.scale_rows(a, T.select(b, 0, 0)),
    "masked_softmax": lambda a, b: T.masked_softmax(a, np.array([True, True, False, True])),
    "concat": lambda a, b: T.concat([a, T.transpose(b)], axis=1),
    "transpose": lambda a, b: T.transpose(a),
    "narrow": lambda a, b: T.narrow(a, 1, 1, 3),
    "stack": lambda a, b: T.stack([a, T.transpose(b)], axis=1),
    "where": lambda a, b: T.where(np.array([[True], [False], [True]]), a, T.transpose(b)),
    "masked_max": lambda a, b: T.masked_max(a, 0, _MASK3),
    "masked_mean": lambda a, b: T.masked_mean(a, 0, _MASK3),
    "embedding": lambda a, b: T.embedding(b, np.array([[1, 2], [3, 3]]), padding_idx=None),
    "cross_entropy": lambda a, b: T.cross_entropy(a, np.array([0, 3, 1])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    gen = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        a, b = _random_inputs(gen)
        op = PRIMITIVES[name]
        loss = (lambda: op(a, b)) if name == "cross_entropy" else (lambda: _readout(op(a, b)))
        worst = max(worst, T.grad_check(loss, [a, b]))
    assert worst < 1e-6


def test_grad_check_rejects_float32():
    with T.precision("f32"):
        x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.sum(x), [x])
