"""
Matrix primitives and symmetric eigensolvers.

Operators are never stored as explicit matrices. A `SparseSymmetricOperator`
carries an *apply plan*: a function that evaluates ``y = L @ x`` through a
composition of sparse factors. The eigensolvers only need matrix-vector
products, so the hypergraph Laplacians (which densify when multiplied out)
can be used at full scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from pfh.specrec.util import csr_matvec, rng_stream


__all__ = [
    "ConvergenceError",
    "SparseSymmetricOperator",
    "SpectralBasis",
    "apply_operator",
    "lanczos_smallest",
    "dense_symmetric_eig",
    "DENSE_LIMIT",
]


def __dir__():
    return __all__


_logger = logging.getLogger(__name__)

DENSE_LIMIT = 2000  # Largest dimension that may be densified


class ConvergenceError(RuntimeError):
    """The eigensolver failed to converge on the requested eigenpairs."""

    def __init__(self, message: str, residuals) -> None:
        super().__init__(message)
        self.residuals = np.asarray(residuals)


@dataclass(frozen=True)
class SparseSymmetricOperator:
    """
    A symmetric linear operator defined by a matrix-free apply plan.

    Parameters
    ----------
    dim : int
        The number of rows (and columns) of the operator.
    plan : callable
        Maps a vector of shape (dim,) to ``L @ x``.
    nnz_estimate : int
        Stored nonzeros across all factors of the plan. The cost of one
        application is proportional to this count.
    """

    dim: int
    plan: Callable[[np.ndarray], np.ndarray]
    nnz_estimate: int

    @classmethod
    def identity(cls, dim: int) -> SparseSymmetricOperator:
        return cls(dim, lambda x: x.copy(), dim)

    @classmethod
    def zero(cls, dim: int) -> SparseSymmetricOperator:
        return cls(dim, np.zeros_like, 0)

    @classmethod
    def from_matrix(cls, a) -> SparseSymmetricOperator:
        """
        Wrap an explicit symmetric matrix.

        Parameters
        ----------
        a : array_like or scipy.sparse matrix, shape (n, n)
            The matrix. Symmetry is verified up to 1e-10.
        """
        if scipy.sparse.issparse(a):
            a = scipy.sparse.csr_matrix(a, dtype=np.float64)
            asym = abs(a - a.T).max() if a.nnz else 0.0
        else:
            a = np.asarray(a, dtype=np.float64)
            asym = np.abs(a - a.T).max() if a.size else 0.0
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"`a` must be a square matrix, got shape {a.shape}")
        if asym > 1e-10:
            raise ValueError(f"`a` is not symmetric (max asymmetry {asym:.3g})")
        if scipy.sparse.issparse(a):
            a.sort_indices()
            return cls(a.shape[0], lambda x: csr_matvec(a, x), a.nnz)
        return cls(a.shape[0], lambda x: a @ x, int(np.count_nonzero(a)))

    def __call__(self, x):
        return apply_operator(self, x)

    def to_dense(self, max_dim: int = DENSE_LIMIT):
        """
        Assemble the explicit matrix by applying the plan to each basis vector.

        Only intended for tests and small problems.
        """
        if self.dim > max_dim:
            raise ValueError(
                f"Refusing to densify an operator of dim {self.dim} (> {max_dim})"
            )
        a = np.empty((self.dim, self.dim))
        e = np.zeros(self.dim)
        for n in range(self.dim):
            e[n] = 1
            a[:, n] = self.plan(e)
            e[n] = 0
        return a

    def as_linear_operator(self):
        """Adapt the operator for use with `scipy.sparse.linalg` routines."""
        return scipy.sparse.linalg.LinearOperator(
            (self.dim, self.dim),
            matvec=lambda x: self.plan(np.ravel(x)),
            rmatvec=lambda x: self.plan(np.ravel(x)),
            dtype=np.float64,
        )


@dataclass(frozen=True)
class SpectralBasis:
    """
    A block of eigenvectors with their eigenvalues ("frequencies").

    Parameters
    ----------
    vectors : array of float, shape (n, k)
        Column-orthonormal eigenvectors.
    frequencies : array of float, shape (k,)
        The eigenvalues in ascending order.
    """

    vectors: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("`vectors` must be a 2D array")
        if self.frequencies.shape != (self.vectors.shape[1],):
            raise ValueError("`frequencies` must have one entry per vector")

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def count(self) -> int:
        return self.vectors.shape[1]

    def truncate(self, count: int) -> SpectralBasis:
        """Keep the `count` lowest frequencies."""
        if not 1 <= count <= self.count:
            raise ValueError(f"`count` must be in [1, {self.count}]")
        return SpectralBasis(self.vectors[:, :count], self.frequencies[:count])

    def check(self, op: SparseSymmetricOperator | None = None, tol: float = 1e-8):
        """
        Verify the basis invariants, raising `ValueError` on a violation.

        Parameters
        ----------
        op : SparseSymmetricOperator, optional
            If given, also verify each residual ``||L v - lambda v|| < tol``.
        tol : float
            The residual bound.
        """
        V = self.vectors
        ortho = np.abs(V.T @ V - np.eye(self.count)).max(initial=0.0)
        if not np.all(np.isfinite(V)) or ortho >= 1e-8:
            raise ValueError(f"Basis is not orthonormal (error {ortho:.3g})")
        if np.any(np.diff(self.frequencies) < 0):
            raise ValueError("Frequencies are not in ascending order")
        if np.any(self.frequencies < -1e-10):
            raise ValueError("Frequencies must be non-negative")
        if op is not None:
            if op.dim != self.dim:
                raise ValueError("Operator and basis dimensions disagree")
            residuals = _residuals(op, V, self.frequencies)
            if np.any(residuals >= tol):
                raise ValueError(f"Max eigenpair residual {residuals.max():.3g}")
        return self


def apply_operator(op: SparseSymmetricOperator, x):
    """
    Evaluate ``L @ x`` through the operator's apply plan.

    Parameters
    ----------
    op : SparseSymmetricOperator
    x : array_like of float, shape (op.dim,)

    Returns
    -------
    ndarray of float, shape (op.dim,)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (op.dim,):
        raise ValueError(f"`x` must have shape ({op.dim},), got {x.shape}")
    return np.asarray(op.plan(x), dtype=np.float64)


def _residuals(op, V, frequencies):
    return np.array(
        [
            np.linalg.norm(op.plan(V[:, n]) - frequencies[n] * V[:, n])
            for n in range(V.shape[1])
        ]
    )


def _canonicalize(frequencies, vectors):
    """
    Clamp round-off negatives, fix eigenvector signs, and order the pairs.

    Each eigenvector is flipped so its largest-magnitude entry is positive.
    Pairs are sorted by ascending frequency; frequencies within 1e-10 of each
    other are ordered by the value of their first nonzero entry.
    """
    frequencies = np.where(
        (frequencies < 0) & (frequencies >= -1e-10), 0.0, frequencies
    )
    vectors = vectors.copy()
    if vectors.shape[0]:
        peaks = np.argmax(np.abs(vectors), axis=0)
        signs = np.sign(vectors[peaks, np.arange(vectors.shape[1])])
        vectors *= np.where(signs == 0, 1.0, signs)

    order = np.argsort(frequencies, kind="stable")
    frequencies, vectors = frequencies[order], vectors[:, order]
    group = np.concatenate([[0], np.cumsum(np.diff(frequencies) > 1e-10)])
    nonzero = np.abs(vectors) > 1e-12
    first = np.argmax(nonzero, axis=0)
    leading = vectors[first, np.arange(vectors.shape[1])] if vectors.size else first
    order = np.lexsort((leading, group))
    return frequencies[order], vectors[:, order]


def dense_symmetric_eig(a) -> SpectralBasis:
    """
    Compute all eigenpairs of a dense symmetric matrix.

    Parameters
    ----------
    a : array_like of float, shape (n, n)
        A symmetric matrix (within 1e-10) with ``n <= DENSE_LIMIT``.

    Returns
    -------
    SpectralBasis
        All `n` eigenpairs in ascending order.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"`a` must be a square matrix, got shape {a.shape}")
    if a.shape[0] > DENSE_LIMIT:
        raise ValueError(f"`a` is too large for a dense solve ({a.shape[0]})")
    if a.size and np.abs(a - a.T).max() > 1e-10:
        raise ValueError("`a` is not symmetric")
    w, V = scipy.linalg.eigh((a + a.T) / 2)
    w, V = _canonicalize(w, V)
    return SpectralBasis(V, w)


def _orthogonalize(w, *blocks):
    # Classical Gram-Schmidt against mutually orthogonal blocks, applied twice
    for _ in range(2):
        for V in blocks:
            if V.shape[1]:
                w = w - V @ (V.T @ w)
    return w


def _fresh(rng, n, *blocks):
    # A random unit vector orthogonal to `blocks`, or None if they span R^n
    for _ in range(3):
        q = _orthogonalize(rng.standard_normal(n), *blocks)
        norm = np.linalg.norm(q)
        if norm > 1e-8:
            return q / norm
    return None


def _thick_restart(op, X, k, tol, ncv, max_restarts, rng):
    """
    Thick-restart Lanczos restricted to the orthogonal complement of `X`.

    Returns
    -------
    theta : array of float, shape (k,)
        The lowest Ritz values, ascending.
    Y : array of float, shape (n, k)
        The matching Ritz vectors.
    restarts : int
        The number of restarts used.
    """
    n = op.dim
    room = n - X.shape[1]
    ncv = max(min(ncv, room), k)
    keep = min(ncv - 1, k + (ncv - k) // 2)

    # Krylov basis and its image, filled up to column m
    V = np.empty((n, ncv))
    W = np.empty((n, ncv))
    m = 0
    q = _fresh(rng, n, X)
    residuals = np.full(k, np.inf)
    for restart in range(max_restarts + 1):
        while m < ncv and q is not None:
            w = apply_operator(op, q)
            V[:, m] = q
            W[:, m] = w
            m += 1
            if m == room:
                q = None
                break
            r = _orthogonalize(w, X, V[:, :m])
            norm = np.linalg.norm(r)
            if norm <= 1e-10 * max(1.0, np.linalg.norm(w)):
                q = _fresh(rng, n, X, V[:, :m])  # Invariant subspace; restart the sequence
            else:
                q = r / norm

        T = V[:, :m].T @ W[:, :m]
        theta, S = scipy.linalg.eigh((T + T.T) / 2)
        Y = V[:, :m] @ S[:, :k]
        R = W[:, :m] @ S[:, :k] - Y * theta[:k]
        residuals = np.linalg.norm(R, axis=0)
        _logger.debug(
            "Lanczos restart %d: basis %d (%d locked), max residual %.3g",
            restart,
            m,
            X.shape[1],
            residuals.max(),
        )
        if np.all(residuals < tol) or m == room:
            return theta[:k], Y, restart

        # Keep the lowest Ritz vectors plus the next direction
        if q is None:
            q = _fresh(rng, n, X, V[:, :m])
        S_keep = S[:, :keep]
        V[:, :keep] = V[:, :m] @ S_keep
        W[:, :keep] = W[:, :m] @ S_keep
        m = keep
        if q is not None:
            q = _orthogonalize(q, X, V[:, :m])
            norm = np.linalg.norm(q)
            q = q / norm if norm > 1e-10 else _fresh(rng, n, X, V[:, :m])

    raise ConvergenceError(
        f"Lanczos did not converge after {max_restarts} restarts "
        f"(max residual {residuals.max():.3g}, tol {tol:.3g})",
        residuals,
    )


def lanczos_smallest(
    op: SparseSymmetricOperator,
    k: int,
    tol: float = 1e-8,
    max_iters: int | None = None,
    seed: int = 0,
    ncv: int | None = None,
) -> SpectralBasis:
    """
    Compute the `k` algebraically smallest eigenpairs of a symmetric operator.

    Uses thick-restart Lanczos with full reorthogonalization. The Krylov
    basis `V` and its image ``W = L V`` are kept explicitly, so the projected
    matrix ``V^T W`` is formed exactly and restarts cost no extra operator
    applications.

    Parameters
    ----------
    op : SparseSymmetricOperator
        A symmetric positive semi-definite operator.
    k : int
        The number of eigenpairs, ``1 <= k <= op.dim``.
    tol : float
        Convergence threshold on each residual ``||L v - lambda v||_2``.
    max_iters : int, optional
        The maximum number of restarts, summed over all Krylov sequences.
        Default: ``50 * k``.
    seed : int
        Seed for the start vectors.
    ncv : int, optional
        The size of the Krylov basis before a restart. Default:
        ``min(dim, max(2k + 1, 20))``.

    Returns
    -------
    SpectralBasis
        The eigenpairs, ascending.

    Notes
    -----
    A single Krylov sequence holds at most one vector from each eigenspace,
    so the converged pairs are locked and a new sequence is started from a
    random vector orthogonal to them. Any eigenvalue it finds below the
    largest locked one replaces it. The search ends when the complement of
    the locked vectors holds nothing lower, which captures every copy of a
    repeated eigenvalue.
    """
    n = op.dim
    if not 1 <= k <= n:
        raise ValueError(f"`k` must be in [1, {n}], got {k}")
    if max_iters is None:
        max_iters = 50 * k
    if ncv is None:
        ncv = min(n, max(2 * k + 1, 20))

    rng = rng_stream(seed, "lanczos")
    frequencies, vectors, used = _thick_restart(
        op, np.empty((n, 0)), k, tol, ncv, max_iters, rng
    )
    budget = max_iters - used
    while k < n:
        want = min(k, n - k)
        theta, Y, used = _thick_restart(op, vectors, want, tol, ncv, budget, rng)
        budget -= used
        lower = theta < frequencies[-1] - tol
        if not lower.any():
            break
        _logger.debug("Lanczos complement search found %d lower pairs", lower.sum())
        frequencies = np.concatenate([frequencies, theta[lower]])
        vectors = np.column_stack([vectors, Y[:, lower]])
        order = np.argsort(frequencies, kind="stable")[:k]
        frequencies, vectors = frequencies[order], vectors[:, order]

    vectors, _ = np.linalg.qr(vectors)  # Repair orthogonality lost to round-off
    frequencies, vectors = _canonicalize(frequencies.copy(), vectors)
    return SpectralBasis(vectors, frequencies)
