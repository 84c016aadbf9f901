import math

import numpy as np
import pytest
from conftest import random_interactions

from pfh.specrec import spectral
from pfh.specrec.hypergraph import HypergraphSpec, user_item_laplacians
from pfh.specrec.linalg import SpectralBasis, dense_symmetric_eig
from pfh.specrec.spectral import (
    SpectralKernel2D,
    TruncatedBases,
    cutoff_counts,
    gft_2d,
    igft_2d,
    lcf_filter,
    lowpass_conv_2d,
    lowpass_conv_embedding,
)


def full_bases(R):
    L_user, L_item = user_item_laplacians(R)
    P = dense_symmetric_eig(L_user.to_dense())
    Q = dense_symmetric_eig(L_item.to_dense())
    return TruncatedBases(P, Q, 1.0)


def truncated(R, phi, psi):
    bases = full_bases(R)
    return TruncatedBases(
        bases.user_basis.truncate(phi), bases.item_basis.truncate(psi), 0.5
    )


def test_cutoff_counts():
    assert cutoff_counts(0.005, 6022, 3043) == (31, 16)
    assert cutoff_counts(1.0, 10, 8) == (10, 8)
    assert cutoff_counts(0.1, 30, 5) == (3, 1)
    assert cutoff_counts(1e-6, 10, 10) == (1, 1)
    with pytest.raises(ValueError):
        cutoff_counts(0, 10, 10)
    with pytest.raises(ValueError):
        cutoff_counts(1.5, 10, 10)


def test_gft_identity_bases():
    R = np.arange(6.0).reshape(2, 3)
    assert np.allclose(gft_2d(R, np.eye(2), np.eye(3)), R)


def test_gft_of_zero_signal(toy_matrix):
    bases = full_bases(toy_matrix)
    rt = gft_2d(np.zeros((10, 8)), bases.user_basis, bases.item_basis)
    assert np.array_equal(rt, np.zeros((10, 8)))


def test_gft_shape_mismatch(toy_matrix):
    bases = full_bases(toy_matrix)
    with pytest.raises(ValueError):
        gft_2d(np.zeros((8, 10)), bases.user_basis, bases.item_basis)


def test_gft_accepts_sparse(toy_matrix):
    bases = full_bases(toy_matrix)
    a = gft_2d(toy_matrix, bases.user_basis, bases.item_basis)
    b = gft_2d(toy_matrix.toarray(), bases.user_basis, bases.item_basis)
    assert np.allclose(a, b, atol=1e-14)


def test_single_user_item():
    R = np.ones((1, 1))
    bases = full_bases(R)
    rt = gft_2d(R, bases.user_basis, bases.item_basis)
    assert np.allclose(np.abs(rt), [[1.0]])


@pytest.mark.parametrize("seed", range(100))
def test_transform_identities(seed):
    rng = np.random.default_rng(seed)
    M, N = rng.integers(2, 31, 2)
    R = random_interactions(rng, M, N)
    bases = full_bases(R)
    P, Q = bases.user_basis, bases.item_basis
    signal = rng.standard_normal((M, N))

    rt = gft_2d(signal, P, Q)
    assert np.abs(igft_2d(rt, P, Q) - signal).max() < 1e-10
    assert abs(np.linalg.norm(rt) - np.linalg.norm(signal)) < 1e-10

    # Convolution theorem: the spectrum of the output is the product
    kernel = SpectralKernel2D(rng.standard_normal((M, N)))
    out = lowpass_conv_2d(signal, bases, kernel)
    assert np.abs(gft_2d(out, P, Q) - rt * kernel.values).max() < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_conv_matches_quadruple_sum(seed):
    rng = np.random.default_rng(seed)
    R = random_interactions(rng, 6, 5, density=0.4)
    bases = truncated(R, 4, 3)
    P, Q = bases.user_basis.vectors, bases.item_basis.vectors
    K = rng.standard_normal((4, 3))
    signal = rng.standard_normal((6, 5))

    expected = np.zeros((6, 5))
    for u in range(6):
        for i in range(5):
            total = 0.0
            for p in range(4):
                for q in range(3):
                    coef = sum(
                        P[a, p] * signal[a, b] * Q[b, q]
                        for a in range(6)
                        for b in range(5)
                    )
                    total += P[u, p] * K[p, q] * coef * Q[i, q]
            expected[u, i] = total
    out = lowpass_conv_2d(signal, bases, SpectralKernel2D(K))
    assert np.abs(out - expected).max() < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_rank1_factored_convolution(seed):
    rng = np.random.default_rng(seed)
    R = random_interactions(rng, 8, 6, density=0.4)
    bases = truncated(R, 5, 4)
    k_user = rng.standard_normal(5)
    k_item = rng.standard_normal(4)
    U = rng.standard_normal((8, 3))
    V = rng.standard_normal((6, 3))

    factored = lowpass_conv_embedding(U, bases.user_basis, k_user) @ (
        lowpass_conv_embedding(V, bases.item_basis, k_item).T
    )
    direct = lowpass_conv_2d(U @ V.T, bases, SpectralKernel2D.rank1(k_user, k_item))
    assert np.abs(factored - direct).max() < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_truncated_round_trip_is_projection(seed):
    rng = np.random.default_rng(seed)
    R = random_interactions(rng, 6, 5, density=0.4)
    bases = truncated(R, 3, 2)
    P, Q = bases.user_basis.vectors, bases.item_basis.vectors
    signal = rng.standard_normal((6, 5))
    out = igft_2d(gft_2d(signal, P, Q), P, Q)
    assert np.abs(out - P @ P.T @ signal @ Q @ Q.T).max() < 1e-12
    assert np.abs(igft_2d(gft_2d(out, P, Q), P, Q) - out).max() < 1e-12


def test_full_ones_kernel_is_identity(rng):
    R = random_interactions(rng, 8, 6)
    bases = full_bases(R)
    signal = rng.standard_normal((8, 6))
    out = lowpass_conv_2d(signal, bases, SpectralKernel2D.ones(8, 6))
    assert np.abs(out - signal).max() < 1e-10
    x = rng.standard_normal((8, 3))
    assert np.abs(lowpass_conv_embedding(x, bases.user_basis, np.ones(8)) - x).max() < 1e-10


def test_lcf_full_passband_is_identity(rng):
    R = random_interactions(rng, 10, 7)
    assert np.abs(lcf_filter(R, full_bases(R)) - R).max() < 1e-10


def test_lcf_is_idempotent(rng):
    R = random_interactions(rng, 12, 9)
    bases = truncated(R, 4, 3)
    once = lcf_filter(R, bases)
    assert np.abs(lcf_filter(once, bases) - once).max() < 1e-10


def test_lcf_ones_kernel_same_path(rng):
    R = random_interactions(rng, 9, 6)
    bases = truncated(R, 3, 2)
    ones = lowpass_conv_2d(R, bases, SpectralKernel2D.ones(3, 2))
    assert np.array_equal(lcf_filter(R, bases), ones)


def test_lowest_passband_is_rank1(rng):
    R = random_interactions(rng, 10, 8)
    bases = truncated(R, 1, 1)
    out = lcf_filter(R, bases)
    assert np.linalg.matrix_rank(out, tol=1e-10) <= 1


def test_kernel_shape_mismatch(toy_matrix):
    bases = full_bases(toy_matrix)
    with pytest.raises(ValueError):
        lowpass_conv_2d(toy_matrix, bases, SpectralKernel2D.ones(2, 2))


def test_embedding_kernel_shape(toy_matrix):
    basis = full_bases(toy_matrix).user_basis.truncate(3)
    with pytest.raises(ValueError):
        lowpass_conv_embedding(np.ones((10, 2)), basis, np.ones(4))


def test_embedding_zero_kernel(toy_matrix):
    basis = full_bases(toy_matrix).user_basis.truncate(3)
    out = lowpass_conv_embedding(np.ones((10, 2)), basis, np.zeros(3))
    assert np.array_equal(out, np.zeros((10, 2)))


def test_truncated_bases_lanczos_matches_dense(toy_matrix):
    L_user, L_item = user_item_laplacians(toy_matrix)
    bases = spectral.truncated_bases(L_user, L_item, 0.3)
    assert (bases.phi, bases.psi) == (3, 3)
    dense = dense_symmetric_eig(L_user.to_dense())
    assert np.allclose(bases.user_basis.frequencies, dense.frequencies[:3], atol=1e-8)
    lo, hi = bases.passband
    assert lo == bases.user_basis.frequencies[-1]
    assert hi == bases.item_basis.frequencies[-1]


def test_dc_component_is_popularity(toy_matrix):
    spec = HypergraphSpec.from_incidence(toy_matrix)
    basis = dense_symmetric_eig(spec.dense_laplacian())
    from_basis = spectral.dc_component(toy_matrix, L_basis=basis)
    closed_form = spectral.dc_component(toy_matrix, node_degrees=spec.node_degrees)
    assert np.allclose(from_basis, closed_form, atol=1e-10)
    d_sqrt = np.sqrt(spec.node_degrees)
    expected = toy_matrix.T @ d_sqrt / np.linalg.norm(d_sqrt)
    assert np.allclose(closed_form, expected)


def test_gate_filter_keeps_whole_eigenspaces():
    basis = spectral.cycle_basis(20)
    s = spectral.demo_signal("s3", 20)
    # Both vectors of the degenerate pair at the cutoff are kept
    f1 = spectral.DEMO_FREQUENCIES["s1"]
    out = spectral.gate_filter_1d(s, basis, f1)
    assert np.abs(out - spectral.demo_signal("s1", 20)).max() < 1e-10


def test_cycle_spectrum_closed_form():
    n = 40
    basis = spectral.cycle_basis(n)
    expected = np.sort(1 - np.cos(2 * np.pi * np.arange(n) / n))
    assert np.allclose(basis.frequencies, expected, atol=1e-12)


@pytest.mark.parametrize("name", ["s1", "s2"])
def test_demo_signal_energy(name):
    basis = spectral.cycle_basis(100)
    spectrum = spectral.gft_1d(spectral.demo_signal(name, 100), basis)
    energy = spectral.eigenspace_energy(
        spectrum, basis, spectral.DEMO_FREQUENCIES[name]
    )
    assert energy >= 0.99


def test_demo_low_pass_separation():
    n = 100
    basis = spectral.cycle_basis(n)
    s1 = spectral.demo_signal("s1", n)
    cutoff = basis.frequencies[math.ceil(0.2 * n) - 1]
    out = spectral.gate_filter_1d(spectral.demo_signal("s3", n), basis, cutoff)
    assert np.linalg.norm(out - s1) / np.linalg.norm(s1) < 1e-6


def test_demo_signal_invalid_n():
    with pytest.raises(ValueError):
        spectral.demo_signal("s1", 30)
    with pytest.raises(ValueError):
        spectral.demo_signal("s4", 20)


def test_gft_1d_requires_full_basis():
    basis = SpectralBasis(np.eye(3)[:, :2], np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        spectral.gft_1d(np.ones(3), basis)


def test_spectrum_rows():
    basis = spectral.cycle_basis(20)
    spectrum = spectral.gft_1d(spectral.demo_signal("s1", 20), basis)
    rows = spectral.spectrum_rows(spectrum, basis)
    assert len(rows) == 20
    assert [r[0] for r in rows] == list(range(20))
    assert all(r[2] >= 0 for r in rows)
