"""Dense real linear algebra for small systems (state dimensions of a few up to ~16).

Everything operates on float64 numpy arrays. Matrices are two-dimensional, vectors
one-dimensional; shapes are checked at the boundary so downstream solver code can
assume conformability. Factorizations report singularity instead of dividing by a
tiny pivot.
"""

from dataclasses import dataclass

import numpy as np

# A pivot below this multiple of the largest row sum is treated as exactly zero.
PIVOT_RTOL = 1e-14


class SingularMatrix(Exception):
    """Raised when LU elimination hits a pivot indistinguishable from zero."""


def as_matrix(a, square=False):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    if square and a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def as_vector(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {x.shape}")
    return x


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def matvec(a, x):
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {x.shape}")
    return a @ x


def transpose(a):
    return as_matrix(a).T.copy()


def identity(d):
    return np.eye(d)


def norm_inf(a):
    """Max-abs for vectors, maximum absolute row sum for matrices."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return float(np.max(np.abs(a))) if a.size else 0.0
    if a.ndim == 2:
        return float(np.max(np.abs(a).sum(axis=1))) if a.size else 0.0
    raise ValueError(f"expected 1-d or 2-d array, got shape {a.shape}")


def norm_2(x):
    """Euclidean norm for vectors, Frobenius norm for matrices."""
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2):
        raise ValueError(f"expected 1-d or 2-d array, got shape {x.shape}")
    return float(np.sqrt(np.sum(x * x)))


@dataclass(frozen=True)
class LUFactorization:
    """Packed L\\U factors (unit lower diagonal implied) and the row permutation."""

    lu: np.ndarray
    perm: np.ndarray

    @property
    def dim(self):
        return self.lu.shape[0]


def lu_factor(a):
    """PA = LU with partial pivoting.

    Raises SingularMatrix when the pivot magnitude falls below
    PIVOT_RTOL * norm_inf(a).
    """
    a = as_matrix(a, square=True)
    n = a.shape[0]
    lu = a.copy()
    perm = np.arange(n)
    tiny = PIVOT_RTOL * norm_inf(a)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= tiny:
            raise SingularMatrix(f"pivot {lu[p, k]:.3e} at column {k} below threshold {tiny:.3e}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return LUFactorization(lu=lu, perm=perm)


def lu_solve(fac, b):
    """Solve A x = b given lu_factor(A). Accepts a vector or a matrix of columns."""
    lu, perm = fac.lu, fac.perm
    n = fac.dim
    b = np.asarray(b, dtype=float)
    vector = b.ndim == 1
    if b.shape[0] != n:
        raise ValueError(f"rhs has {b.shape[0]} rows, factorization is {n}x{n}")
    x = b[perm].reshape(n, -1).copy()
    for k in range(1, n):  # forward substitution, unit lower triangle
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):  # back substitution
        x[k] -= lu[k, k + 1:] @ x[k + 1:]
        x[k] /= lu[k, k]
    return x[:, 0] if vector else x


def solve(a, b):
    return lu_solve(lu_factor(a), b)


def determinant(a):
    """Determinant via the LU factorization (sign from the pivot permutation)."""
    try:
        fac = lu_factor(a)
    except SingularMatrix:
        return 0.0
    # permutation parity by cycle counting
    perm = fac.perm
    seen = np.zeros(len(perm), dtype=bool)
    swaps = 0
    for i in range(len(perm)):
        if seen[i]:
            continue
        j = i
        length = 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        swaps += length - 1
    sign = -1.0 if swaps % 2 else 1.0
    return float(sign * np.prod(np.diag(fac.lu)))
