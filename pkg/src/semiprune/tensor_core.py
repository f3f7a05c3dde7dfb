"""Dense matrix helpers and a central-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 with two
dimensions. The helpers here only add validation on top of numpy.
"""

import numpy as np

from .errors import NumericError, ShapeError

__all__ = ["as_matrix", "matmul", "reduce", "finite_diff_grad"]


def as_matrix(x, name="matrix"):
    """Return `x` as a 2-D float64 array, raising ShapeError otherwise."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    """Matrix product ``a @ b`` with an explicit shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def reduce(a, axis):
    """Sum a matrix along one axis, keeping it 2-D.

    Parameters
    ----------
    a : array_like
        Input matrix.
    axis : {"rows", "cols"}
        ``"cols"`` gives the ``1 x cols`` column sums, ``"rows"`` gives the
        ``rows x 1`` row sums.
    """
    a = as_matrix(a)
    if axis == "cols":
        return a.sum(axis=0, keepdims=True)
    if axis == "rows":
        return a.sum(axis=1, keepdims=True)
    raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function of a matrix.

    Each entry is ``(f(x + eps e_ij) - f(x - eps e_ij)) / (2 eps)``; the
    truncation error is O(eps**2).

    Parameters
    ----------
    f : callable
        Maps an array shaped like `x` to a real scalar.
    x : array_like
        Evaluation point. Not modified.
    eps : float
        Step size, strictly positive.

    Returns
    -------
    grad : ndarray
        Array shaped like `x`.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    probe = x.copy()
    for idx in np.ndindex(x.shape):
        orig = probe[idx]
        probe[idx] = orig + eps
        fp = float(f(probe))
        probe[idx] = orig - eps
        fm = float(f(probe))
        probe[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near entry {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad
