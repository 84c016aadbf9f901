import numpy as np
import pytest
import scipy.sparse
from conftest import random_interactions

from pfh.specrec.hypergraph import (
    DegenerateGraphError,
    EmptyDatasetError,
    HypergraphSpec,
    InteractionSet,
    build_interaction_matrix,
    ncore_filter,
    user_item_laplacians,
)
from pfh.specrec.linalg import dense_symmetric_eig


def test_from_records_dedupes_and_sorts():
    records = [("b", "y"), ("a", "x"), ("b", "y"), ("a", "z")]
    s = InteractionSet.from_records(records)
    assert list(s.user_ids) == ["a", "b"]
    assert list(s.item_ids) == ["x", "y", "z"]
    assert s.pairs() == {(0, 0), (0, 2), (1, 1)}
    assert len(s) == 3


def test_from_records_empty():
    with pytest.raises(EmptyDatasetError):
        InteractionSet.from_records([])


def test_duplicate_indices_rejected():
    with pytest.raises(ValueError):
        InteractionSet(np.array([0, 0]), np.array([1, 1]), ["u"], ["a", "b"])


def test_out_of_range_rejected():
    with pytest.raises(ValueError):
        InteractionSet(np.array([2]), np.array([0]), ["u", "v"], ["a"])


def test_build_interaction_matrix():
    s = InteractionSet(np.array([0, 1, 1]), np.array([2, 0, 1]), ["u", "v"], ["a", "b", "c"])
    R = build_interaction_matrix(s)
    assert R.shape == (2, 3)
    assert np.array_equal(R.toarray(), [[0, 0, 1], [1, 1, 0]])


def test_ncore_no_op():
    s = InteractionSet.from_records([("u1", "i1"), ("u1", "i2")])
    out = ncore_filter(s, 0, 0)
    assert out.pairs() == s.pairs()


def test_ncore_cascade():
    # Removing u2 (degree 1) drops i3 below the item core, which drops u3
    records = [
        ("u1", "i1"), ("u1", "i2"),
        ("u2", "i3"),
        ("u3", "i3"), ("u3", "i1"),
        ("u4", "i1"), ("u4", "i2"),
    ]  # fmt: skip
    out = ncore_filter(InteractionSet.from_records(records), 2, 2)
    assert list(out.user_ids) == ["u1", "u4"]
    assert list(out.item_ids) == ["i1", "i2"]
    assert np.all(out.user_degrees() >= 2)
    assert np.all(out.item_degrees() >= 2)


def test_ncore_empty():
    s = InteractionSet.from_records([("u1", "i1")])
    with pytest.raises(EmptyDatasetError):
        ncore_filter(s, 2, 1)


def test_coverage_names_offenders():
    s = InteractionSet(np.array([0]), np.array([0]), ["u0", "u1"], ["i0"])
    with pytest.raises(DegenerateGraphError) as info:
        s.check_coverage()
    assert list(info.value.nodes) == ["u1"]


def test_single_hyperedge():
    L_user, L_item = user_item_laplacians(np.ones((3, 1)))
    assert np.allclose(L_user.to_dense(), np.eye(3) - np.full((3, 3), 1 / 3))
    assert np.allclose(L_item.to_dense(), [[0.0]])


def test_star_hypergraph_spectrum():
    # Three users each touching their own item plus a shared one
    R = np.array([[1, 0, 0, 1], [0, 1, 0, 1], [0, 0, 1, 1]], dtype=float)
    L_user, _ = user_item_laplacians(R)
    w = dense_symmetric_eig(L_user.to_dense()).frequencies
    assert abs(w[0]) < 1e-12
    assert np.all(w <= 1 + 1e-12)


def test_zero_degree_user_named():
    R = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateGraphError) as info:
        user_item_laplacians(R, user_ids=["a", "b", "c"], item_ids=["x", "y"])
    assert info.value.nodes == ["b"]
    assert "b" in str(info.value)


@pytest.mark.parametrize("seed", range(50))
def test_laplacian_invariants(seed):
    rng = np.random.default_rng(seed)
    M, N = rng.integers(2, 51, 2)
    R = random_interactions(rng, M, N, density=0.2)
    user = HypergraphSpec.from_incidence(R)
    item = HypergraphSpec.from_incidence(R.T)
    for spec, op in ((user, user.laplacian()), (item, item.laplacian())):
        L = spec.dense_laplacian()
        assert np.abs(L - L.T).max() < 1e-12
        w = np.linalg.eigvalsh(L)
        assert -1e-10 <= w.min() <= 1e-10
        assert np.abs(L @ spec.null_vector()).max() < 1e-10
        x = rng.standard_normal(op.dim)
        assert np.abs(op(x) - L @ x).max() < 1e-10


def test_weighted_hyperedges():
    R = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1]], dtype=float)
    spec = HypergraphSpec.from_incidence(R, edge_weights=[1.0, 2.0, 0.5])
    L = spec.dense_laplacian()
    assert np.allclose(L, L.T)
    assert np.allclose(L @ spec.null_vector(), 0)
    x = np.array([0.3, -1.0, 2.0])
    assert np.allclose(spec.laplacian()(x), L @ x)


def test_incidence_must_be_binary():
    with pytest.raises(ValueError):
        HypergraphSpec.from_incidence(np.array([[2.0]]))


def test_nnz_estimate(toy_matrix):
    op = HypergraphSpec.from_incidence(toy_matrix).laplacian()
    assert op.nnz_estimate == 2 * toy_matrix.nnz + 3 * 10 + 8


def test_two_user_laplacian():
    L_user, _ = user_item_laplacians(np.array([[1.0, 1.0], [1.0, 0.0]]))
    c = 1 / (2 * np.sqrt(2))
    assert np.allclose(L_user.to_dense(), [[0.25, -c], [-c, 0.5]], atol=1e-12)
    assert np.allclose(L_user(np.array([np.sqrt(2), 1.0])), 0, atol=1e-12)


def test_complete_hypergraph():
    L_user, L_item = user_item_laplacians(np.ones((4, 3)))
    assert np.allclose(L_user.to_dense(), np.eye(4) - np.full((4, 4), 1 / 4))
    assert np.allclose(L_item.to_dense(), np.eye(3) - np.full((3, 3), 1 / 3))


@pytest.mark.parametrize("seed", range(10))
def test_laplacian_linear_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    R = random_interactions(rng, 40, 25, density=0.15)
    op, _ = user_item_laplacians(R)
    x, y = rng.standard_normal((2, op.dim))
    a, b = rng.standard_normal(2)
    combined = op(a * x + b * y)
    assert np.linalg.norm(combined - (a * op(x) + b * op(y))) <= 1e-12 * np.linalg.norm(combined)
    assert abs(x @ op(y) - y @ op(x)) < 1e-10


def test_incidence_ignores_stored_zeros():
    # Row 0 stores an explicit zero at column 1
    h = scipy.sparse.csr_matrix(
        (np.array([1.0, 0.0, 1.0, 1.0, 1.0]), np.array([0, 1, 1, 0, 1]), np.array([0, 2, 3, 5])),
        shape=(3, 2),
    )
    assert h.nnz == 5
    spec = HypergraphSpec.from_incidence(h)
    assert spec.incidence.nnz == 4
    assert h.nnz == 5
    assert np.array_equal(spec.node_degrees, [1, 1, 2])
    assert np.array_equal(spec.edge_degrees, [2, 2])
    dense = HypergraphSpec.from_incidence(h.toarray())
    assert np.allclose(spec.dense_laplacian(), dense.dense_laplacian())

    blocks = scipy.sparse.block_diag([np.array([[1.0, 0.0], [1.0, 1.0]]), np.ones((2, 1))], format="csr")
    spec = HypergraphSpec.from_incidence(blocks)
    assert np.array_equal(spec.node_degrees, [1, 2, 1, 1])
    assert np.array_equal(spec.edge_degrees, [2, 1, 2])


def test_ncore_worked_example():
    # User 0 has one pair; item 0 keeps user 1, so item 1 survives
    s = InteractionSet(np.array([0, 1, 1]), np.array([0, 0, 1]), ["u0", "u1"], ["i0", "i1"])
    out = ncore_filter(s, 2, 1)
    assert list(out.user_ids) == ["u1"]
    assert list(out.item_ids) == ["i0", "i1"]
    assert out.pairs() == {(0, 0), (0, 1)}


def scan_core(R, user_core, item_core):
    """Remove one offending node per scan until none remain."""
    R = R.copy()
    while True:
        users = np.flatnonzero((R.sum(axis=1) > 0) & (R.sum(axis=1) < user_core))
        items = np.flatnonzero((R.sum(axis=0) > 0) & (R.sum(axis=0) < item_core))
        if len(users):
            R[users[0]] = 0
        elif len(items):
            R[:, items[0]] = 0
        else:
            return R


@pytest.mark.parametrize("seed", range(20))
def test_ncore_matches_scan(seed):
    rng = np.random.default_rng(seed)
    R = (rng.random((30, 20)) < 0.12).astype(float)
    R[:3, :3] = 1  # Survives the (2, 3)-core
    s = InteractionSet.from_matrix(R[R.sum(axis=1) > 0][:, R.sum(axis=0) > 0])
    core = scan_core(s.matrix().toarray(), 2, 3)
    out = ncore_filter(s, 2, 3)
    live = np.ix_(core.sum(axis=1) > 0, core.sum(axis=0) > 0)
    assert np.array_equal(out.matrix().toarray(), core[live])


@pytest.mark.parametrize("cores", [(1, 1), (2, 2), (3, 2)])
def test_ncore_idempotent(rng, cores):
    s = InteractionSet.from_matrix(random_interactions(rng, 40, 30, density=0.1))
    once = ncore_filter(s, *cores)
    twice = ncore_filter(once, *cores)
    assert twice.pairs() == once.pairs()
    assert list(twice.user_ids) == list(once.user_ids)
    assert list(twice.item_ids) == list(once.item_ids)


@pytest.mark.parametrize("seed", range(5))
def test_matrix_nnz_counts_pairs(seed):
    rng = np.random.default_rng(seed)
    M, N = 25, 15
    users = rng.integers(0, M, 200)
    items = rng.integers(0, N, 200)
    s = InteractionSet.from_records((f"u{u}", f"i{i}") for u, i in zip(users, items))
    R = build_interaction_matrix(s)
    assert R.nnz == len(s) == len(set(zip(users, items)))
    assert set(R.data) == {1.0}
