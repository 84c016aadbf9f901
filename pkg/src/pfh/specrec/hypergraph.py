"""
Interaction data and the hypergraph Laplacians built from it.

An implicit-feedback dataset is a set of (user, item) pairs. Viewed as a
hypergraph, each item is a hyperedge connecting the users who interacted
with it (and vice versa), so the interaction matrix `R` is directly the
incidence matrix of the user hypergraph and `R^T` that of the item
hypergraph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse

from pfh.specrec.linalg import DENSE_LIMIT, SparseSymmetricOperator
from pfh.specrec.util import csr_matvec


__all__ = [
    "DegenerateGraphError",
    "EmptyDatasetError",
    "SparseBinaryMatrix",
    "InteractionSet",
    "HypergraphSpec",
    "build_interaction_matrix",
    "ncore_filter",
    "user_item_laplacians",
]


def __dir__():
    return __all__


_logger = logging.getLogger(__name__)

SparseBinaryMatrix = scipy.sparse.csr_matrix


class DegenerateGraphError(ValueError):
    """A node or hyperedge has zero degree."""

    def __init__(self, message: str, nodes=(), edges=()) -> None:
        super().__init__(message)
        self.nodes = list(nodes)
        self.edges = list(edges)


class EmptyDatasetError(ValueError):
    """No interactions remain."""


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """
    Deduplicated (user, item) pairs with contiguous index maps.

    Pairs are stored sorted by ``(user, item)``. Index `u` refers to the
    external id ``user_ids[u]``; likewise for items. Subsets of a dataset
    (eg, the train/validation/test splits) share the same id arrays, so a
    subset may leave some users or items without pairs.

    Parameters
    ----------
    users : array of int, shape (P,)
        User index of each pair, in ``[0, M)``.
    items : array of int, shape (P,)
        Item index of each pair, in ``[0, N)``.
    user_ids : array of str, shape (M,)
        The external user id for each user index.
    item_ids : array of str, shape (N,)
        The external item id for each item index.
    """

    users: np.ndarray
    items: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    _matrix: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        if users.shape != items.shape or users.ndim != 1:
            raise ValueError("`users` and `items` must be 1D arrays of equal length")
        M, N = len(self.user_ids), len(self.item_ids)
        if len(users) and (users.min() < 0 or users.max() >= M):
            raise ValueError("User indices must lie in [0, M)")
        if len(items) and (items.min() < 0 or items.max() >= N):
            raise ValueError("Item indices must lie in [0, N)")
        keys = users * max(N, 1) + items
        order = np.argsort(keys, kind="stable")
        if np.any(np.diff(keys[order]) == 0):
            raise ValueError("Duplicate (user, item) pairs")
        object.__setattr__(self, "users", users[order])
        object.__setattr__(self, "items", items[order])
        object.__setattr__(self, "user_ids", np.asarray(self.user_ids, dtype=str))
        object.__setattr__(self, "item_ids", np.asarray(self.item_ids, dtype=str))

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str]]) -> InteractionSet:
        """
        Build a set from external (user id, item id) records.

        Duplicate records collapse to a single pair. Indices are assigned in
        sorted order of the external ids, so the result is canonical.
        """
        records = list(records)
        if not records:
            raise EmptyDatasetError("No interaction records")
        raw = np.array(records, dtype=str).reshape(-1, 2)
        user_ids, users = np.unique(raw[:, 0], return_inverse=True)
        item_ids, items = np.unique(raw[:, 1], return_inverse=True)
        keys = np.unique(users * len(item_ids) + items)
        return cls(keys // len(item_ids), keys % len(item_ids), user_ids, item_ids)

    @classmethod
    def from_matrix(cls, r, user_ids=None, item_ids=None) -> InteractionSet:
        """Build a set from the nonzero entries of a (dense or sparse) matrix."""
        coo = scipy.sparse.coo_matrix(r)
        coo.eliminate_zeros()
        M, N = coo.shape
        if user_ids is None:
            user_ids = [f"u{u}" for u in range(M)]
        if item_ids is None:
            item_ids = [f"i{i}" for i in range(N)]
        return cls(coo.row, coo.col, np.asarray(user_ids), np.asarray(item_ids))

    @property
    def M(self) -> int:
        return len(self.user_ids)

    @property
    def N(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def subset(self, mask) -> InteractionSet:
        """Select pairs by a boolean mask, keeping the id maps."""
        mask = np.asarray(mask, dtype=bool)
        return InteractionSet(
            self.users[mask], self.items[mask], self.user_ids, self.item_ids
        )

    def user_degrees(self):
        return np.bincount(self.users, minlength=self.M)

    def item_degrees(self):
        return np.bincount(self.items, minlength=self.N)

    def matrix(self) -> SparseBinaryMatrix:
        """The interaction matrix as CSR (cached)."""
        if not self._matrix:
            self._matrix.append(build_interaction_matrix(self))
        return self._matrix[0]

    def check_coverage(self) -> None:
        """Raise `DegenerateGraphError` if any user or item has no pairs."""
        users = np.flatnonzero(self.user_degrees() == 0)
        items = np.flatnonzero(self.item_degrees() == 0)
        if len(users) or len(items):
            raise DegenerateGraphError(
                f"Users without interactions: {_describe(self.user_ids[users])}; "
                f"items without interactions: {_describe(self.item_ids[items])}",
                self.user_ids[users],
                self.item_ids[items],
            )


def _describe(ids: Sequence[str], limit: int = 10) -> str:
    ids = list(ids)
    if not ids:
        return "none"
    text = ", ".join(ids[:limit])
    return text + (f" (+{len(ids) - limit} more)" if len(ids) > limit else "")


def build_interaction_matrix(interactions: InteractionSet) -> SparseBinaryMatrix:
    """
    Assemble the binary interaction matrix `R`.

    Parameters
    ----------
    interactions : InteractionSet

    Returns
    -------
    scipy.sparse.csr_matrix of float, shape (M, N)
        ``R[u, i] = 1`` iff the pair ``(u, i)`` was observed.
    """
    r = scipy.sparse.csr_matrix(
        (np.ones(len(interactions)), (interactions.users, interactions.items)),
        shape=(interactions.M, interactions.N),
    )
    r.sort_indices()
    return r


def ncore_filter(
    interactions: InteractionSet,
    user_core: int,
    item_core: int,
) -> InteractionSet:
    """
    Iteratively remove users and items with too few interactions.

    A user is removed when its degree is less than `user_core`, an item when
    its degree is less than `item_core`. Removals repeat until neither
    condition holds for any remaining node, then the survivors are
    re-indexed contiguously (preserving their relative order).

    Parameters
    ----------
    interactions : InteractionSet
    user_core, item_core : int
        The minimum degrees, both ``>= 0``.

    Returns
    -------
    InteractionSet
    """
    if user_core < 0 or item_core < 0:
        raise ValueError("`user_core` and `item_core` must be non-negative")
    users, items = interactions.users, interactions.items
    keep = np.ones(len(users), dtype=bool)
    rounds = 0
    while True:
        u_deg = np.bincount(users[keep], minlength=interactions.M)
        i_deg = np.bincount(items[keep], minlength=interactions.N)
        drop = keep & ((u_deg[users] < user_core) | (i_deg[items] < item_core))
        if not drop.any():
            break
        keep &= ~drop
        rounds += 1
    if not keep.any():
        raise EmptyDatasetError(
            f"No interactions survive the ({user_core}, {item_core})-core filter"
        )

    live_users = np.unique(users[keep])
    live_items = np.unique(items[keep])
    user_map = np.full(interactions.M, -1)
    item_map = np.full(interactions.N, -1)
    user_map[live_users] = np.arange(len(live_users))
    item_map[live_items] = np.arange(len(live_items))
    _logger.debug(
        "Core filter converged after %d rounds: %d users, %d items, %d pairs",
        rounds,
        len(live_users),
        len(live_items),
        keep.sum(),
    )
    return InteractionSet(
        user_map[users[keep]],
        item_map[items[keep]],
        interactions.user_ids[live_users],
        interactions.item_ids[live_items],
    )


@dataclass(frozen=True)
class HypergraphSpec:
    """
    A hypergraph defined by its incidence matrix and hyperedge weights.

    Parameters
    ----------
    incidence : scipy.sparse.csr_matrix, shape (nodes, edges)
        The binary incidence matrix `H`.
    edge_weights : array of float, shape (edges,)
        The diagonal of `W`.
    node_degrees : array of float, shape (nodes,)
        The diagonal of `D`, ``D_ii = sum_j W_jj H_ij``.
    edge_degrees : array of float, shape (edges,)
        The diagonal of `Delta`, ``Delta_jj = sum_i H_ij``.
    """

    incidence: SparseBinaryMatrix
    edge_weights: np.ndarray
    node_degrees: np.ndarray
    edge_degrees: np.ndarray

    @classmethod
    def from_incidence(
        cls,
        h,
        edge_weights=None,
        node_ids: Sequence[str] | None = None,
        edge_ids: Sequence[str] | None = None,
    ) -> HypergraphSpec:
        """
        Compute the degree matrices of a hypergraph and validate them.

        Parameters
        ----------
        h : array_like or scipy.sparse matrix, shape (nodes, edges)
            A binary incidence matrix.
        edge_weights : array_like of float, shape (edges,), optional
            Positive hyperedge weights. Default: all ones.
        node_ids, edge_ids : sequence of str, optional
            External names used in error messages.
        """
        h = scipy.sparse.csr_matrix(h, dtype=np.float64, copy=True)
        h.eliminate_zeros()  # Stored zeros are absent entries
        h.sort_indices()
        if h.nnz and not np.all(h.data == 1):
            raise ValueError("Incidence entries must be 0 or 1")
        n_nodes, n_edges = h.shape
        if edge_weights is None:
            edge_weights = np.ones(n_edges)
        edge_weights = np.asarray(edge_weights, dtype=np.float64)
        if edge_weights.shape != (n_edges,) or np.any(edge_weights <= 0):
            raise ValueError("`edge_weights` must be positive, one per hyperedge")
        node_degrees = csr_matvec(h, edge_weights)
        edge_degrees = np.asarray(h.sum(axis=0)).ravel()

        bad_nodes = np.flatnonzero(node_degrees <= 0)
        bad_edges = np.flatnonzero(edge_degrees <= 0)
        if len(bad_nodes) or len(bad_edges):
            node_names = [str(n if node_ids is None else node_ids[n]) for n in bad_nodes]
            edge_names = [str(e if edge_ids is None else edge_ids[e]) for e in bad_edges]
            raise DegenerateGraphError(
                f"Zero-degree nodes: {_describe(node_names)}; "
                f"zero-degree hyperedges: {_describe(edge_names)}",
                node_names,
                edge_names,
            )
        return cls(h, edge_weights, node_degrees, edge_degrees)

    def laplacian(self) -> SparseSymmetricOperator:
        """
        The normalized hypergraph Laplacian as a matrix-free operator.

        ``L = I - D^{-1/2} H W Delta^{-1} H^T D^{-1/2}``, applied right to left
        so each application costs ``O(nnz(H))``.
        """
        h = self.incidence
        ht = h.T.tocsr()
        ht.sort_indices()
        d_isqrt = 1 / np.sqrt(self.node_degrees)
        edge_scale = self.edge_weights / self.edge_degrees

        def plan(x):
            y = d_isqrt * x
            y = edge_scale * csr_matvec(ht, y)
            return x - d_isqrt * csr_matvec(h, y)

        n_nodes, n_edges = h.shape
        return SparseSymmetricOperator(n_nodes, plan, 2 * h.nnz + 3 * n_nodes + n_edges)

    def dense_laplacian(self, max_dim: int = DENSE_LIMIT):
        """Assemble `L` explicitly from its definition (small problems only)."""
        n_nodes = self.incidence.shape[0]
        if n_nodes > max_dim:
            raise ValueError(f"Refusing to densify a Laplacian of dim {n_nodes}")
        H = self.incidence.toarray()
        D_isqrt = np.diag(1 / np.sqrt(self.node_degrees))
        theta = D_isqrt @ H @ np.diag(self.edge_weights / self.edge_degrees)
        return np.eye(n_nodes) - theta @ H.T @ D_isqrt

    def null_vector(self):
        """The vector ``D^{1/2} 1`` spanning the zero-frequency eigenspace."""
        return np.sqrt(self.node_degrees)


def user_item_laplacians(
    r,
    user_ids: Sequence[str] | None = None,
    item_ids: Sequence[str] | None = None,
) -> tuple[SparseSymmetricOperator, SparseSymmetricOperator]:
    """
    Build the user and item hypergraph Laplacians of an interaction matrix.

    The user hypergraph has incidence ``H = R`` (items are hyperedges over
    users) and the item hypergraph has ``H = R^T``. All hyperedge weights are
    one.

    Parameters
    ----------
    r : scipy.sparse matrix or array_like, shape (M, N)
        The binary interaction matrix. Every row and column needs at least
        one nonzero.
    user_ids, item_ids : sequence of str, optional
        External ids used to name degenerate users or items in errors.

    Returns
    -------
    L_U, L_I : SparseSymmetricOperator
        Operators of dimension `M` and `N`.
    """
    r = scipy.sparse.csr_matrix(r, dtype=np.float64)
    users = HypergraphSpec.from_incidence(r, node_ids=user_ids, edge_ids=item_ids)
    items = HypergraphSpec.from_incidence(r.T, node_ids=item_ids, edge_ids=user_ids)
    return users.laplacian(), items.laplacian()
