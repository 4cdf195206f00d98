import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prvr.numerics import (
    DegenerateRowError,
    OracleFailureError,
    UndefinedSimilarityError,
    cosine,
    cosine_matrix,
    finite_diff_grad,
    grad_check,
    layer_norm,
    relative_error,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_softmax_symmetric_row():
    assert softmax_rows(t([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]


@pytest.mark.parametrize("x", [-7.5, 0.0, 3.0, 1e3])
def test_softmax_constant_row(x):
    np.testing.assert_allclose(softmax_rows(t([[x, x, x]])).numpy(), np.full((1, 3), 1 / 3), atol=1e-15)


def test_softmax_against_mpmath():
    mpmath.mp.dps = 40
    row = [1, 2, 3]
    denom = sum(mpmath.e**v for v in row)
    expected = [float(mpmath.e**v / denom) for v in row]
    got = softmax_rows(t([row]))[0].numpy()
    np.testing.assert_allclose(got, expected, atol=1e-12)
    np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_mask_zeroes_invalid():
    out = softmax_rows(t([[1.0, 5.0, 2.0]]), torch.tensor([[True, False, True]]))
    assert out[0, 1].item() == 0.0
    assert abs(out.sum().item() - 1) < 1e-15


def test_softmax_degenerate_row():
    with pytest.raises(DegenerateRowError):
        softmax_rows(t([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([[True, True], [False, False]]))


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = softmax_rows(torch.from_numpy(x)).numpy()
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite),
       st.lists(finite, min_size=5, max_size=5))
def test_softmax_shift_invariant(x, shifts):
    c = np.array(shifts[: x.shape[0]])[:, None]
    a = softmax_rows(torch.from_numpy(x)).numpy()
    b = softmax_rows(torch.from_numpy(x + c)).numpy()
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_layer_norm_constant_row():
    out = layer_norm(t([[1.0, 1.0, 1.0]]), torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert out.tolist() == [[0.0, 0.0, 0.0]]


def test_layer_norm_two_values():
    # mean 0, population std 1
    out = layer_norm(t([[1.0, -1.0]]), torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64),
                     eps=1e-300)
    np.testing.assert_allclose(out.numpy(), [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_zero_gain_gives_bias():
    bias = t([0.3, -2.0, 5.0])
    out = layer_norm(t([[4.0, 1.0, -9.0], [0.0, 2.0, 2.0]]), torch.zeros(3, dtype=torch.float64), bias)
    np.testing.assert_array_equal(out.numpy(), np.stack([bias.numpy()] * 2))


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        layer_norm(t([[1.0, 2.0]]), torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), eps=0)


def test_cosine_examples():
    assert cosine([2.0, 3.0], [2.0, 3.0]) == pytest.approx(1.0)
    assert cosine([1.0, 0.0], [0.0, 4.0]) == 0.0
    assert cosine([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(UndefinedSimilarityError):
        cosine([0.0, 0.0], [1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (2, 4), elements=finite))
def test_cosine_matrix_matches_scalar(a, b):
    if (np.linalg.norm(a, axis=1) < 1e-6).any() or (np.linalg.norm(b, axis=1) < 1e-6).any():
        return
    m = cosine_matrix(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    for i in range(3):
        for j in range(2):
            assert abs(m[i, j] - cosine(a[i], b[j])) < 1e-12
    assert (np.abs(m) <= 1 + 1e-12).all()


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda p: float(p[0] ** 2), [3.0], 1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_and_sum():
    assert finite_diff_grad(lambda p: 4.2, np.ones(3)).tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(finite_diff_grad(lambda p: float(p.sum()), np.arange(4.0)), np.ones(4), atol=1e-9)


def test_finite_diff_oracle_failure():
    with pytest.raises(OracleFailureError):
        finite_diff_grad(lambda p: float("nan"), [1.0])


def test_grad_check_detects_wrong_gradient():
    x = torch.tensor([0.5, -1.2], dtype=torch.float64)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            ctx.save_for_backward(a)
            return (a**3).sum()

        @staticmethod
        def backward(ctx, g):
            (a,) = ctx.saved_tensors
            return g * 2 * a  # should be 3 a^2

    assert grad_check(lambda: (x**3).sum(), {"x": x}).max_relative_error < 1e-8
    assert grad_check(lambda: Wrong.apply(x), {"x": x}).max_relative_error > 0.1


def test_relative_error_floor():
    assert relative_error([0.0], [1e-9])[0] == pytest.approx(1e-4)
