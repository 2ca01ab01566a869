import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import matmul_loop
from xncaps.tensor import (
    ShapeError,
    as_tensor,
    broadcast_leading,
    l2norm_last,
    matmul_last2,
    mean_abs_axis,
    softmax_axis,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)
# squares of |c| < 1e-100 underflow; homogeneity is only meaningful away from that
scalars = st.one_of(st.just(0.0), st.floats(1e-3, 100), st.floats(-100, -1e-3))
moderate = st.one_of(st.just(0.0), st.floats(1e-50, 1e3), st.floats(-1e3, -1e-50))


def test_matmul_identity():
    out = matmul_last2(np.eye(2), [[3, 4], [5, 6]])
    np.testing.assert_array_equal(out, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert matmul_last2([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_matmul_broadcast_shape():
    a = np.ones((2, 1, 1, 3, 4))
    b = np.ones((1, 5, 1, 4, 2))
    out = matmul_last2(a, b)
    assert out.shape == (2, 5, 1, 3, 2)
    assert np.all(out == 4)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul_last2(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_rejects_non_unit_stretch():
    with pytest.raises(ShapeError):
        matmul_last2(np.ones((2, 3, 4)), np.ones((3, 4, 2)))


def test_broadcast_leading_rules():
    assert broadcast_leading((2, 1), (5,)) == (2, 5)
    assert broadcast_leading((), (3,)) == (3,)
    with pytest.raises(ShapeError):
        broadcast_leading((2,), (3,))


def test_empty_axis_rejected():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))


def test_dtype_contract():
    assert matmul_last2(np.ones((2, 2), np.float32), np.ones((2, 2), np.float32)).dtype == np.float32
    assert matmul_last2(np.ones((2, 2)), np.ones((2, 2), np.float32)).dtype == np.float64
    assert softmax_axis([1, 2, 3], 0).dtype == np.float32


@given(
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 2**32 - 1),
)
def test_matmul_matches_loop_on_integers(lead, m, k, n, seed):
    rng = np.random.default_rng(seed)
    # products of 2^10-sized integers summed over k <= 4 stay exact in float64
    a = rng.integers(-(2**10), 2**10, (lead, 1, m, k)).astype(np.float64)
    b = rng.integers(-(2**10), 2**10, (1, 2, k, n)).astype(np.float64)
    np.testing.assert_array_equal(matmul_last2(a, b), matmul_loop(a, b))


def test_matmul_exact_at_large_integer_magnitude():
    rng = np.random.default_rng(3)
    a = rng.integers(-(2**20), 2**20, (3, 4, 5)).astype(np.float64)
    b = rng.integers(-(2**20), 2**20, (3, 5, 2)).astype(np.float64)
    np.testing.assert_array_equal(matmul_last2(a, b), matmul_loop(a, b))


def test_softmax_uniform_on_zeros():
    np.testing.assert_allclose(softmax_axis(np.zeros(10), 0), np.full(10, 0.1), rtol=1e-6)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax_axis([0.0, math.log(3)], 0), [0.25, 0.75], rtol=1e-6)


def test_softmax_large_logits_do_not_overflow():
    out = softmax_axis([1e4, 1e4 + math.log(3)], 0)
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=1e-6)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite), st.data())
def test_softmax_sums_to_one_and_shift_invariant(x, data):
    axis = data.draw(st.integers(0, x.ndim - 1))
    shift = data.draw(st.floats(-50, 50, width=32))
    out = softmax_axis(x, axis)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax_axis(x + np.float32(shift), axis), out, atol=1e-5)


def test_l2norm_examples():
    assert l2norm_last([3.0, 4.0])[0] == 5.0
    assert l2norm_last([0.0, 0.0])[0] == 0.0
    assert l2norm_last([0.0, 1.0, 0.0])[0] == 1.0


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=moderate),
    scalars,
)
def test_l2norm_absolute_homogeneity(x, c):
    lhs = l2norm_last(c * x)
    rhs = abs(c) * l2norm_last(x)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


def test_mean_abs_examples():
    assert mean_abs_axis([1.0, -1.0, 1.0, -1.0], 0) == 1.0
    assert mean_abs_axis([2.0, -4.0, 6.0, 0.0], 0) == 3.0


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=moderate),
    scalars,
    st.integers(0, 1),
)
def test_mean_abs_absolute_homogeneity(x, c, axis):
    np.testing.assert_allclose(mean_abs_axis(c * x, axis), abs(c) * mean_abs_axis(x, axis), rtol=1e-6)


def test_mean_abs_axis_out_of_range():
    with pytest.raises(ShapeError):
        mean_abs_axis(np.ones((2, 3)), 2)
