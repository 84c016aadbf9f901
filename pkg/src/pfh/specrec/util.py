"""Numerical utility functions."""

from __future__ import annotations

import zlib

import numpy as np
from numba import njit, prange


__all__ = [
    "csr_matvec",
    "csr_contains",
    "rng_stream",
]


def __dir__():
    return __all__


@njit(parallel=True, cache=True)
def _csr_matvec(indptr, indices, data, x, out):
    for row in prange(len(indptr) - 1):
        acc = 0.0
        for p in range(indptr[row], indptr[row + 1]):
            acc += data[p] * x[indices[p]]
        out[row] = acc


def csr_matvec(a, x):
    """
    Multiply a CSR matrix by a dense vector.

    Rows are processed in parallel. Each output entry is accumulated in
    storage order, so the result does not depend on the thread count.

    Parameters
    ----------
    a : scipy.sparse.csr_matrix, shape (M, N)
        The sparse matrix. Its index arrays are used as-is.
    x : array of float, shape (N,)
        The dense vector.

    Returns
    -------
    ndarray of float, shape (M,)
        The product ``a @ x``
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (a.shape[1],):
        raise ValueError(f"`x` must have shape ({a.shape[1]},), got {x.shape}")
    out = np.empty(a.shape[0])
    _csr_matvec(a.indptr, a.indices, a.data.astype(np.float64, copy=False), x, out)
    return out


@njit(cache=True)
def _csr_contains(indptr, indices, rows, cols, out):
    # Requires sorted column indices within each row
    for n in range(len(rows)):
        lo = indptr[rows[n]]
        hi = indptr[rows[n] + 1]
        col = cols[n]
        found = False
        while lo < hi:
            mid = (lo + hi) // 2
            if indices[mid] < col:
                lo = mid + 1
            elif indices[mid] > col:
                hi = mid
            else:
                found = True
                break
        out[n] = found


def csr_contains(a, rows, cols):
    """
    Test whether each `(row, col)` coordinate is stored in a CSR matrix.

    Parameters
    ----------
    a : scipy.sparse.csr_matrix
        A matrix with sorted indices (``a.has_sorted_indices``).
    rows, cols : array of int, shape (K,)
        The coordinates to test.

    Returns
    -------
    ndarray of bool, shape (K,)
    """
    if not a.has_sorted_indices:
        a = a.sorted_indices()
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    out = np.empty(len(rows), dtype=np.bool_)
    _csr_contains(a.indptr, a.indices, rows, cols, out)
    return out


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    Build an independent random generator for a named component.

    All randomness in the library flows from a single integer seed. Each
    component (eg, ``"split"``, ``"init"``, ``"sampler"``) draws from its own
    sub-stream so it can be re-seeded without disturbing the others.

    Parameters
    ----------
    seed : int
        The global seed.
    name : string
        The component name.
    extra : int, optional
        Additional entropy, such as an epoch number.

    Returns
    -------
    numpy.random.Generator
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extra]))
