"""
Graph Fourier transforms and low-pass graph convolution.

A signal on the user-item grid (eg, the interaction matrix `R`) has a 2D
spectrum with respect to the eigenbases `P` (users) and `Q` (items) of the two
hypergraph Laplacians: ``R~ = P^T R Q``. Eigenvalues play the role of
frequencies, so the smooth (collaborative) part of `R` lives at low
frequencies while exposure and quantization noise spreads to high ones.

The low-pass gate is realized by truncating the bases to their first `Phi`
and `Psi` columns; it is never stored as an explicit mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from pfh.specrec.linalg import (
    SparseSymmetricOperator,
    SpectralBasis,
    dense_symmetric_eig,
    lanczos_smallest,
)


__all__ = [
    "TruncatedBases",
    "SpectralKernel2D",
    "cutoff_counts",
    "truncated_bases",
    "gft_2d",
    "igft_2d",
    "lcf_filter",
    "lowpass_conv_2d",
    "lowpass_conv_embedding",
    "gft_1d",
    "igft_1d",
    "gate_filter_1d",
    "dc_component",
    "cycle_laplacian",
    "cycle_basis",
    "demo_signal",
    "DEMO_FREQUENCIES",
    "spectrum_rows",
    "eigenspace_energy",
]


def __dir__():
    return __all__


@dataclass(frozen=True)
class TruncatedBases:
    """
    The low-frequency user and item eigenbases.

    Parameters
    ----------
    user_basis : SpectralBasis, shape (M, Phi)
    item_basis : SpectralBasis, shape (N, Psi)
    cutoff_ratio : float
        The passband ratio ``F`` in ``(0, 1]``.
    """

    user_basis: SpectralBasis
    item_basis: SpectralBasis
    cutoff_ratio: float

    def __post_init__(self):
        if not 0 < self.cutoff_ratio <= 1:
            raise ValueError("`cutoff_ratio` must be in (0, 1]")

    @property
    def M(self) -> int:
        return self.user_basis.dim

    @property
    def N(self) -> int:
        return self.item_basis.dim

    @property
    def phi(self) -> int:
        return self.user_basis.count

    @property
    def psi(self) -> int:
        return self.item_basis.count

    @property
    def passband(self) -> tuple[float, float]:
        """The cut-off frequencies ``(lambda_Phi, sigma_Psi)``."""
        return (
            float(self.user_basis.frequencies[-1]),
            float(self.item_basis.frequencies[-1]),
        )


@dataclass(frozen=True)
class SpectralKernel2D:
    """A frequency-domain kernel over the passband, shape (Phi, Psi)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or not np.all(np.isfinite(values)):
            raise ValueError("Kernel values must be a finite 2D array")
        object.__setattr__(self, "values", values)

    @classmethod
    def ones(cls, phi: int, psi: int) -> SpectralKernel2D:
        return cls(np.ones((phi, psi)))

    @classmethod
    def rank1(cls, k_user, k_item) -> SpectralKernel2D:
        """The factored kernel ``k_user k_item^T``."""
        return cls(np.outer(k_user, k_item))


def cutoff_counts(f: float, m: int, n: int) -> tuple[int, int]:
    """
    Convert a passband ratio into eigenvector counts.

    Parameters
    ----------
    f : float
        The ratio ``F = Phi / M = Psi / N`` in ``(0, 1]``.
    m, n : int
        The number of users and items.

    Returns
    -------
    Phi, Psi : int
        ``ceil(f m)`` and ``ceil(f n)``, each at least 1.
    """
    if not 0 < f <= 1:
        raise ValueError(f"`f` must be in (0, 1], got {f}")

    # Round first so products like 0.1 * 30 do not spill into the next integer
    def _count(size):
        return min(size, max(1, math.ceil(round(f * size, 9))))

    return _count(m), _count(n)


def truncated_bases(
    L_user: SparseSymmetricOperator,
    L_item: SparseSymmetricOperator,
    f: float,
    tol: float = 1e-8,
    max_iters: int | None = None,
    seed: int = 0,
) -> TruncatedBases:
    """Compute the passband eigenbases of both Laplacians with Lanczos."""
    phi, psi = cutoff_counts(f, L_user.dim, L_item.dim)
    return TruncatedBases(
        lanczos_smallest(L_user, phi, tol=tol, max_iters=max_iters, seed=seed),
        lanczos_smallest(L_item, psi, tol=tol, max_iters=max_iters, seed=seed),
        f,
    )


def _vectors(basis) -> np.ndarray:
    if isinstance(basis, SpectralBasis):
        return basis.vectors
    return np.asarray(basis, dtype=np.float64)


def gft_2d(r, user_basis, item_basis):
    """
    Transform a user-item signal into the 2D graph spectral domain.

    Parameters
    ----------
    r : array_like or scipy.sparse matrix, shape (M, N)
        The signal, such as the interaction matrix.
    user_basis : SpectralBasis or array of float, shape (M, Phi)
    item_basis : SpectralBasis or array of float, shape (N, Psi)

    Returns
    -------
    ndarray of float, shape (Phi, Psi)
        ``P^T R Q``
    """
    P, Q = _vectors(user_basis), _vectors(item_basis)
    if not scipy.sparse.issparse(r):
        r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape != (P.shape[0], Q.shape[0]):
        raise ValueError(
            f"Signal shape {r.shape} does not match bases ({P.shape[0]}, {Q.shape[0]})"
        )
    RQ = np.asarray(r @ Q)
    return P.T @ RQ


def igft_2d(rt, user_basis, item_basis):
    """
    Transform a 2D spectrum back to the user-item domain.

    Parameters
    ----------
    rt : array_like of float, shape (Phi, Psi)
    user_basis : SpectralBasis or array of float, shape (M, Phi)
    item_basis : SpectralBasis or array of float, shape (N, Psi)

    Returns
    -------
    ndarray of float, shape (M, N)
        ``P R~ Q^T``
    """
    P, Q = _vectors(user_basis), _vectors(item_basis)
    rt = np.asarray(rt, dtype=np.float64)
    if rt.shape != (P.shape[1], Q.shape[1]):
        raise ValueError(
            f"Spectrum shape {rt.shape} does not match bases ({P.shape[1]}, {Q.shape[1]})"
        )
    return (P @ rt) @ Q.T


def lowpass_conv_2d(r, bases: TruncatedBases, kernel: SpectralKernel2D):
    """
    Convolve a user-item signal with a kernel restricted to the passband.

    ``R' = P (( P^T R Q ) * K) Q^T`` where `*` is the element-wise product.

    Parameters
    ----------
    r : array_like or scipy.sparse matrix, shape (M, N)
    bases : TruncatedBases
    kernel : SpectralKernel2D, shape (Phi, Psi)

    Returns
    -------
    ndarray of float, shape (M, N)
    """
    if kernel.values.shape != (bases.phi, bases.psi):
        raise ValueError(
            f"Kernel shape {kernel.values.shape} does not match the passband "
            f"({bases.phi}, {bases.psi})"
        )
    spectrum = gft_2d(r, bases.user_basis, bases.item_basis)
    return igft_2d(spectrum * kernel.values, bases.user_basis, bases.item_basis)


def lcf_filter(r, bases: TruncatedBases):
    """
    Apply the low-pass collaborative filter.

    Keeps only the spectral components of `r` in the ``Phi x Psi`` passband,
    ie, the orthogonal projection onto ``span(P) (x) span(Q)``. This is the
    convolution with an all-ones kernel.
    """
    return lowpass_conv_2d(r, bases, SpectralKernel2D.ones(bases.phi, bases.psi))


def lowpass_conv_embedding(x, basis: SpectralBasis, k):
    """
    Convolve an embedding matrix on one side of the grid.

    Computes ``P diag(k) P^T X`` in factored order, costing ``O(K n B)``; the
    ``n x n`` operator is never formed.

    Parameters
    ----------
    x : array_like of float, shape (n, K)
        The embeddings (one row per node).
    basis : SpectralBasis, shape (n, B)
    k : array_like of float, shape (B,)
        The 1D spectral kernel.

    Returns
    -------
    ndarray of float, shape (n, K)
    """
    P = _vectors(basis)
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != P.shape[0]:
        raise ValueError(f"`x` must have {P.shape[0]} rows, got shape {x.shape}")
    if k.shape != (P.shape[1],):
        raise ValueError(f"`k` must have shape ({P.shape[1]},), got {k.shape}")
    return P @ (k[:, None] * (P.T @ x))


def gft_1d(s, basis: SpectralBasis):
    """
    Transform a graph signal into the spectral domain of a full eigenbasis.

    Parameters
    ----------
    s : array_like of float, shape (n,)
    basis : SpectralBasis, shape (n, n)

    Returns
    -------
    ndarray of float, shape (n,)
        ``V^T s``
    """
    V = _vectors(basis)
    s = np.asarray(s, dtype=np.float64)
    if V.shape[0] != V.shape[1]:
        raise ValueError("`basis` must be a full (square) eigenbasis")
    if s.shape != (V.shape[0],):
        raise ValueError(f"`s` must have shape ({V.shape[0]},), got {s.shape}")
    return V.T @ s


def igft_1d(spectrum, basis: SpectralBasis):
    """Inverse of `gft_1d`."""
    V = _vectors(basis)
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (V.shape[1],):
        raise ValueError(f"`spectrum` must have shape ({V.shape[1]},)")
    return V @ spectrum


def gate_filter_1d(s, basis: SpectralBasis, cutoff: float):
    """
    Remove all spectral components above a cut-off frequency.

    Parameters
    ----------
    s : array_like of float, shape (n,)
    basis : SpectralBasis, shape (n, n)
    cutoff : float
        The largest frequency kept. Components within 1e-8 of the cut-off are
        kept, so an eigenspace is never split.

    Returns
    -------
    ndarray of float, shape (n,)
    """
    spectrum = gft_1d(s, basis)
    gate = basis.frequencies <= cutoff + 1e-8
    return igft_1d(spectrum * gate, basis)


def dc_component(r, L_basis: SpectralBasis | None = None, node_degrees=None):
    """
    The zero-frequency coefficient of each column of a user-item signal.

    On the user hypergraph the zero-frequency eigenvector is proportional to
    ``D^{1/2} 1``, so the DC component of item `i` is a degree-weighted count
    of the users that interacted with it: its popularity.

    Parameters
    ----------
    r : array_like or scipy.sparse matrix, shape (M, N)
    L_basis : SpectralBasis, optional
        A user basis whose first column is the zero-frequency eigenvector.
    node_degrees : array of float, shape (M,), optional
        Used instead of `L_basis` to build the normalized ``D^{1/2} 1``.

    Returns
    -------
    ndarray of float, shape (N,)
    """
    if L_basis is not None:
        v0 = L_basis.vectors[:, 0]
    elif node_degrees is not None:
        v0 = np.sqrt(np.asarray(node_degrees, dtype=np.float64))
        v0 = v0 / np.linalg.norm(v0)
    else:
        raise ValueError("One of `L_basis` or `node_degrees` is required")
    return np.asarray(r.T @ v0).ravel()


# ---------------------------------------------------------------------------
# Cycle-graph demonstration


def cycle_laplacian(n: int):
    """
    The normalized Laplacian of the ``n``-node cycle graph.

    Its eigenvalues are ``1 - cos(2 pi j / n)`` for ``j = 0, ..., n - 1``.
    """
    if n < 3:
        raise ValueError("A cycle needs at least 3 nodes")
    A = np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1)
    return np.eye(n) - A / 2


def cycle_basis(n: int) -> SpectralBasis:
    """The full eigenbasis of `cycle_laplacian`."""
    return dense_symmetric_eig(cycle_laplacian(n))


_DEMO_SIGNALS = {
    "s1": lambda t: np.sin(np.pi / 10 * t),
    "s2": lambda t: np.sin(7 * np.pi / 10 * t),
    "s3": lambda t: np.sin(np.pi / 10 * t) + np.sin(7 * np.pi / 10 * t),
}

DEMO_FREQUENCIES = {
    "s1": 1 - np.cos(np.pi / 10),
    "s2": 1 - np.cos(7 * np.pi / 10),
}


def demo_signal(name: str, n: int):
    """
    A demonstration signal on the ``n``-cycle.

    ``s1`` is a slow sine wave, ``s2`` a fast one, and ``s3`` their sum. When
    `n` is a multiple of 20 both waves are exact cycle harmonics.
    """
    if name not in _DEMO_SIGNALS:
        raise ValueError(f"`name` must be one of {sorted(_DEMO_SIGNALS)}")
    if n < 20 or n % 20:
        raise ValueError(f"`n` must be a positive multiple of 20, got {n}")
    return _DEMO_SIGNALS[name](np.arange(n))


def spectrum_rows(spectrum, basis: SpectralBasis):
    """Rows of ``(index, frequency, magnitude)`` for a 1D spectrum."""
    return [
        (j, float(basis.frequencies[j]), float(abs(spectrum[j])))
        for j in range(len(spectrum))
    ]


def eigenspace_energy(spectrum, basis: SpectralBasis, frequency: float):
    """The fraction of spectral energy within 1e-8 of `frequency`."""
    energy = np.asarray(spectrum) ** 2
    near = np.abs(basis.frequencies - frequency) < 1e-8
    return float(energy[near].sum() / energy.sum())
