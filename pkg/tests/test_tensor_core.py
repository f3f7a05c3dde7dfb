import numpy as np
import pytest

from semiprune.errors import NumericError, ShapeError
from semiprune.tensor_core import as_matrix, finite_diff_grad, matmul, reduce


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m, k, n = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        np.testing.assert_allclose(matmul(a, b), loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match="2x3 by 2x3"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_vectors():
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))


def test_reduce_axes():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(reduce(a, "cols"), [[3.0, 5.0, 7.0]])
    np.testing.assert_array_equal(reduce(a, "rows"), [[3.0], [12.0]])
    with pytest.raises(ValueError):
        reduce(a, 0)


def test_finite_diff_on_quadratic_is_exact():
    q = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([[0.3, -1.2]])
    g = finite_diff_grad(lambda v: (v @ q @ v.T).item(), x)
    np.testing.assert_allclose(g, x @ (q + q.T), rtol=1e-9)


def test_finite_diff_does_not_modify_input():
    x = np.ones((2, 2))
    finite_diff_grad(lambda v: float(v.sum()), x)
    np.testing.assert_array_equal(x, np.ones((2, 2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_nonfinite():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda v: float(np.log(v).sum()), np.zeros((1, 1)))
