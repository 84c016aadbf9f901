"""
Dataset splitting, ranking metrics, and synthetic data.

Every user is evaluated by ranking all candidate items (those without a known
training interaction) and comparing the top of that list with the user's
held-out interactions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Protocol, Sequence, runtime_checkable

import numpy as np
import scipy.sparse

from pfh.specrec.hypergraph import InteractionSet
from pfh.specrec.model import ForwardCache, ModelParams, lcfn_forward, predict_users
from pfh.specrec.spectral import TruncatedBases
from pfh.specrec.util import rng_stream


__all__ = [
    "SplitError",
    "EvaluationError",
    "SyntheticDataError",
    "SplitData",
    "SyntheticConfig",
    "SyntheticData",
    "MetricsReport",
    "ScoreSource",
    "ModelScorer",
    "TopK",
    "split",
    "generate_synthetic",
    "rank_topk",
    "f1_at_k",
    "ndcg_at_k",
    "evaluate",
    "parse_metric",
    "DEFAULT_KS",
]


def __dir__():
    return __all__


_logger = logging.getLogger(__name__)

DEFAULT_KS = (2, 5, 10, 20, 50, 100)


class SplitError(ValueError):
    """The interactions cannot be split so every user and item is trained."""


class EvaluationError(ValueError):
    """There is nothing to evaluate."""


class SyntheticDataError(RuntimeError):
    """The synthetic generator kept producing an empty interaction matrix."""


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitData:
    """
    Train, validation, and test interactions over the same id maps.

    Parameters
    ----------
    train, validation, test : InteractionSet
        A partition of the input pairs.
    seed : int
        The seed that produced the assignment.
    ratios : tuple of float
        The target ``(train, validation, test)`` proportions.
    """

    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    seed: int = 0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @property
    def M(self) -> int:
        return self.train.M

    @property
    def N(self) -> int:
        return self.train.N

    def phase(self, name: str) -> InteractionSet:
        if name == "validation":
            return self.validation
        elif name == "test":
            return self.test
        raise ValueError("`phase` must be 'validation' or 'test'")


def split(
    interactions: InteractionSet,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitData:
    """
    Randomly assign each pair to the train, validation, or test set.

    The validation and test sizes are ``floor(ratio * P)``; train gets the
    rest. A repair pass then moves one pair back into train (the earliest in
    the random order) for every user or item that lost all its training
    pairs, so every user and item keeps a node in the training graph.

    Parameters
    ----------
    interactions : InteractionSet
        Every user and item must have at least one pair.
    ratios : sequence of float, length 3
        Positive proportions summing to 1.
    seed : int
        Seeds the ``"split"`` random stream.

    Returns
    -------
    SplitData
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError("`ratios` must be three positive values summing to 1")
    P = len(interactions)
    if P == 0:
        raise SplitError("Cannot split an empty interaction set")
    if np.any(interactions.user_degrees() == 0) or np.any(
        interactions.item_degrees() == 0
    ):
        raise SplitError("Every user and item needs an interaction before splitting")

    order = rng_stream(seed, "split").permutation(P)
    n_val = math.floor(ratios[1] * P + 1e-9)
    n_test = math.floor(ratios[2] * P + 1e-9)
    n_train = P - n_val - n_test
    phase = np.empty(P, dtype=np.int8)
    phase[order[:n_train]] = 0
    phase[order[n_train : n_train + n_val]] = 1
    phase[order[n_train + n_val :]] = 2

    rank = np.empty(P, dtype=np.int64)
    rank[order] = np.arange(P)
    moved = 0
    sides = (
        (interactions.users, interactions.M),
        (interactions.items, interactions.N),
    )
    for index, size in sides:
        trained = np.bincount(index[phase == 0], minlength=size)
        for node in np.flatnonzero(trained == 0):
            candidates = np.flatnonzero(index == node)
            pick = candidates[np.argmin(rank[candidates])]
            phase[pick] = 0
            moved += 1
    if moved:
        _logger.debug("Split repair moved %d pairs into train", moved)

    return SplitData(
        interactions.subset(phase == 0),
        interactions.subset(phase == 1),
        interactions.subset(phase == 2),
        seed,
        ratios,
    )


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """
    Parameters of the exposure/quantization noise model.

    The true preference matrix ``R0`` is block structured: users and items
    are split into `communities` contiguous groups, and
    ``R0[u, i] = a_u b_i B[c(u), c(i)]`` where `B` is `in_block` on the
    diagonal and `out_block` elsewhere, and the factors `a`, `b` are drawn
    from ``U(1 - spread, 1)``. The observed matrix keeps an entry with
    probability `exposure_rate` and binarizes ``R0 + noise`` at
    `quantize_threshold`.
    """

    M: int = 200
    N: int = 100
    communities: int = 4
    in_block: float = 0.9
    out_block: float = 0.1
    spread: float = 0.2
    rating_noise: float = 0.1
    exposure_rate: float = 0.3
    quantize_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("`M` and `N` must be positive")
        if not 1 <= self.communities <= min(self.M, self.N):
            raise ValueError("`communities` must be in [1, min(M, N)]")
        for name in ("in_block", "out_block", "spread", "exposure_rate", "quantize_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"`{name}` must be in [0, 1]")
        if self.rating_noise < 0:
            raise ValueError("`rating_noise` must be non-negative")


@dataclass(frozen=True)
class SyntheticData:
    """
    A generated instance: ``R = R0 + N1 + N2``.

    Parameters
    ----------
    r0 : array of float, shape (M, N)
        The true preferences, in [0, 1].
    r : scipy.sparse.csr_matrix, shape (M, N)
        The observed binary interactions.
    exposure : array of bool, shape (M, N)
        Which entries were exposed.
    user_communities, item_communities : array of int
        The block of each user and item.
    """

    r0: np.ndarray
    r: scipy.sparse.csr_matrix
    exposure: np.ndarray
    user_communities: np.ndarray
    item_communities: np.ndarray

    @property
    def exposure_noise(self):
        """``N1``: the preferences zeroed by the lack of exposure."""
        return np.where(self.exposure, 0.0, -self.r0)

    @property
    def quantization_noise(self):
        """``N2``: the residual of binarizing the exposed preferences."""
        return self.r.toarray() - np.where(self.exposure, self.r0, 0.0)

    def interactions(self) -> InteractionSet:
        return InteractionSet.from_matrix(self.r)


def generate_synthetic(cfg: SyntheticConfig, max_attempts: int = 5):
    """
    Generate block-structured preferences and their noisy observation.

    Parameters
    ----------
    cfg : SyntheticConfig
    max_attempts : int
        How many times to redraw an all-zero observation before giving up.

    Returns
    -------
    SyntheticData
    """
    rng = rng_stream(cfg.seed, "synthetic")
    cu = np.arange(cfg.M) * cfg.communities // cfg.M
    ci = np.arange(cfg.N) * cfg.communities // cfg.N
    B = np.full((cfg.communities, cfg.communities), cfg.out_block)
    np.fill_diagonal(B, cfg.in_block)
    a = rng.uniform(1 - cfg.spread, 1, cfg.M)
    b = rng.uniform(1 - cfg.spread, 1, cfg.N)
    r0 = np.clip(a[:, None] * b[None, :] * B[cu][:, ci], 0, 1)

    for attempt in range(1, max_attempts + 1):
        exposure = rng.random((cfg.M, cfg.N)) < cfg.exposure_rate
        noise = cfg.rating_noise * rng.standard_normal((cfg.M, cfg.N))
        observed = exposure & (r0 + noise > cfg.quantize_threshold)
        if observed.any():
            return SyntheticData(
                r0, scipy.sparse.csr_matrix(observed.astype(np.float64)), exposure, cu, ci
            )
        _logger.warning(
            "Synthetic observation is empty (attempt %d of %d)", attempt, max_attempts
        )
    raise SyntheticDataError(
        f"No interactions were observed in {max_attempts} attempts "
        f"(exposure_rate={cfg.exposure_rate})"
    )


# ---------------------------------------------------------------------------
# Ranking metrics


class TopK(NamedTuple):
    """
    A ranked recommendation list.

    ``truncated`` is True when fewer than `k` candidates were available.
    """

    items: np.ndarray
    truncated: bool


def rank_topk(scores, exclude, k: int) -> TopK:
    """
    Select the `k` highest-scoring items.

    Parameters
    ----------
    scores : array of float, shape (N,)
    exclude : collection of int
        Items that are not candidates.
    k : int
        The list length, ``k >= 1``.

    Returns
    -------
    TopK
        Items by descending score; equal scores are ordered by ascending
        item index.
    """
    if k < 1:
        raise ValueError("`k` must be at least 1")
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(len(scores), dtype=bool)
    if not isinstance(exclude, np.ndarray):
        exclude = np.fromiter(exclude, dtype=np.int64)
    mask[exclude.astype(np.int64)] = False
    candidates = np.flatnonzero(mask)
    if k >= len(candidates):
        order = np.lexsort((candidates, -scores[candidates]))
        return TopK(candidates[order], k > len(candidates))
    values = scores[candidates]
    threshold = np.partition(values, len(values) - k)[len(values) - k]
    pool = candidates[values >= threshold]
    order = np.lexsort((pool, -scores[pool]))
    return TopK(pool[order[:k]], False)


def _hits(recommended, relevant, k):
    recommended = list(recommended)
    if len(recommended) > k:
        raise ValueError(f"More than {k} recommendations")
    return [item in relevant for item in recommended]


def f1_at_k(recommended, relevant, k: int) -> float:
    """
    The F1-score of a top-`k` list.

    ``F1 = 2 P R / (P + R)`` with precision ``P = hits / k`` and recall
    ``R = hits / |relevant|``. Returns nan when `relevant` is empty; such
    users are excluded from averages.
    """
    relevant = set(relevant)
    hits = sum(_hits(recommended, relevant, k))
    if not relevant:
        return math.nan
    if hits == 0:
        return 0.0
    precision = hits / k
    recall = hits / len(relevant)
    return 2 * precision * recall / (precision + recall)


def ndcg_at_k(recommended, relevant, k: int) -> float:
    """
    Normalized discounted cumulative gain of a top-`k` list.

    Binary gains with discount ``1 / log2(p + 1)`` at 1-based position `p`;
    the ideal list places ``min(k, |relevant|)`` hits first. Returns nan when
    `relevant` is empty.
    """
    relevant = set(relevant)
    hits = _hits(recommended, relevant, k)
    if not relevant:
        return math.nan
    dcg = sum(1 / math.log2(p + 2) for p, hit in enumerate(hits) if hit)
    idcg = sum(1 / math.log2(p + 2) for p in range(min(k, len(relevant))))
    return dcg / idcg


def parse_metric(name: str) -> tuple[str, int]:
    """Split a metric name such as ``"f1@2"`` into ``("f1", 2)``."""
    kind, _, k = name.partition("@")
    if kind not in ("f1", "ndcg") or not k.isdigit() or int(k) < 1:
        raise ValueError(f"Invalid metric name '{name}'; expected eg 'f1@2'")
    return kind, int(k)


@dataclass(frozen=True)
class MetricsReport:
    """
    Ranking metrics averaged over the evaluated users.

    Parameters
    ----------
    phase : {"validation", "test"}
    ks : tuple of int
    f1, ndcg : dict of {int: float}
        The averages for each `k`.
    users_included : int
        Users with at least one relevant item in the phase set.
    users_excluded : int
        Users without relevant items (not averaged).
    seed : int or None
    config_digest : string
    """

    phase: str
    ks: tuple[int, ...]
    f1: dict[int, float]
    ndcg: dict[int, float]
    users_included: int
    users_excluded: int = 0
    seed: int | None = None
    config_digest: str = ""

    def metric(self, name: str) -> float:
        kind, k = parse_metric(name)
        values = self.f1 if kind == "f1" else self.ndcg
        if k not in values:
            raise ValueError(f"Metric '{name}' was not computed (ks={list(self.ks)})")
        return values[k]

    def metric_fields(self) -> dict[str, float]:
        out = {f"f1@{k}": self.f1[k] for k in self.ks}
        out.update({f"ndcg@{k}": self.ndcg[k] for k in self.ks})
        return out

    def to_json(self) -> str:
        record = asdict(self)
        record["ks"] = list(self.ks)
        record["f1"] = {str(k): v for k, v in self.f1.items()}
        record["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        record = json.loads(text)
        record["ks"] = tuple(record["ks"])
        record["f1"] = {int(k): v for k, v in record["f1"].items()}
        record["ndcg"] = {int(k): v for k, v in record["ndcg"].items()}
        return cls(**record)


@runtime_checkable
class ScoreSource(Protocol):
    """Anything that can score every item for a block of users."""

    def score_users(self, users):
        """
        Compute item scores.

        Parameters
        ----------
        users : array of int, shape (B,)

        Returns
        -------
        ndarray of float, shape (B, N)
        """


@dataclass
class ModelScorer(ScoreSource):
    """Scores from trained model parameters (one forward pass, then cached)."""

    params: ModelParams
    bases: TruncatedBases | None = None
    _cache: ForwardCache | None = field(default=None, repr=False)

    def score_users(self, users):
        if self._cache is None:
            self._cache = lcfn_forward(self.params, self.bases)
        return predict_users(self._cache, users)


class _FunctionScorer(ScoreSource):
    def __init__(self, fn: Callable) -> None:
        self.fn = fn

    def score_users(self, users):
        return np.asarray(self.fn(users), dtype=np.float64)


def _as_source(source) -> ScoreSource:
    if isinstance(source, ScoreSource):
        return source
    if isinstance(source, ModelParams):
        if source.L:
            raise ValueError("Models with layers need a `ModelScorer(params, bases)`")
        return ModelScorer(source)
    if callable(source):
        return _FunctionScorer(source)
    raise TypeError("`source` must be a ScoreSource, ModelParams, or callable")


def evaluate(
    source,
    split: SplitData,
    phase: str,
    ks: Sequence[int] = DEFAULT_KS,
    seed: int | None = None,
    config_digest: str = "",
    block_size: int = 1024,
) -> MetricsReport:
    """
    Compute F1@k and NDCG@k averaged over users.

    For each user the candidates are all items except their training
    positives (and, for the test phase, their validation positives). Only
    users with at least one interaction in the phase set are averaged.

    Parameters
    ----------
    source : ScoreSource, ModelParams, or callable
        Produces item scores for a block of users.
    split : SplitData
    phase : {"validation", "test"}
    ks : sequence of int
        The list lengths to report.
    seed : int, optional
        Recorded in the report.
    config_digest : string, optional
        Recorded in the report.
    block_size : int
        The number of users scored at once.

    Returns
    -------
    MetricsReport
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("`ks` must be a non-empty list of positive integers")
    target = split.phase(phase)
    if len(target) == 0:
        raise EvaluationError(f"The {phase} set is empty")
    source = _as_source(source)

    known = split.train.matrix()
    if phase == "test":
        known = (known + split.validation.matrix()).tocsr()
    relevant = target.matrix()
    users = np.flatnonzero(np.diff(relevant.indptr) > 0)
    k_max = ks[-1]

    f1_sum = dict.fromkeys(ks, 0.0)
    ndcg_sum = dict.fromkeys(ks, 0.0)
    for start in range(0, len(users), block_size):
        block = users[start : start + block_size]
        scores = source.score_users(block)
        for row, u in enumerate(block):
            exclude = known.indices[known.indptr[u] : known.indptr[u + 1]]
            truth = set(relevant.indices[relevant.indptr[u] : relevant.indptr[u + 1]].tolist())
            ranked = rank_topk(scores[row], exclude, k_max).items
            for k in ks:
                f1_sum[k] += f1_at_k(ranked[:k], truth, k)
                ndcg_sum[k] += ndcg_at_k(ranked[:k], truth, k)

    included = len(users)
    excluded = split.M - included
    if excluded:
        _logger.debug("%d users have no %s interactions", excluded, phase)
    return MetricsReport(
        phase=phase,
        ks=ks,
        f1={k: f1_sum[k] / included for k in ks},
        ndcg={k: ndcg_sum[k] / included for k in ks},
        users_included=included,
        users_excluded=excluded,
        seed=seed,
        config_digest=config_digest,
    )
