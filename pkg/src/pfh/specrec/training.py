"""
Pairwise ranking optimization for the spectral recommender models.

Training minimizes the Bayesian personalized ranking (BPR) loss over
``(user, positive item, negative item)`` triples::

    loss = sum_t -ln sigmoid(R^[u, i] - R^[u, j]) + lambda / 2 ||theta||^2

with gradients computed analytically by backpropagating through the layers,
and parameters updated with Adam.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from pfh.specrec.evaluation import (
    DEFAULT_KS,
    ModelScorer,
    SplitData,
    evaluate,
    parse_metric,
)
from pfh.specrec.hypergraph import InteractionSet
from pfh.specrec.model import (
    ModelParams,
    NumericOverflowError,
    init_params,
    lcfn_forward,
    score_pairs,
)
from pfh.specrec.spectral import TruncatedBases
from pfh.specrec.util import csr_contains, rng_stream


__all__ = [
    "DivergenceError",
    "TuningError",
    "TrainConfig",
    "TRIPLE_DTYPE",
    "AdamState",
    "EpochRecord",
    "GridCell",
    "GridResult",
    "sample_triples",
    "bpr_loss",
    "gradients",
    "loss_and_gradients",
    "adam_step",
    "train",
    "pretrain_mf",
    "grid_search",
    "coarse_grid",
    "fine_grid",
    "tune",
]


def __dir__():
    return __all__


_logger = logging.getLogger(__name__)

TRIPLE_DTYPE = np.dtype(
    [
        ("u", np.int64),  # User
        ("i", np.int64),  # Positive item
        ("j", np.int64),  # Negative item
    ]
)


class DivergenceError(RuntimeError):
    """Training produced non-finite values even after reducing the step size."""

    def __init__(self, message: str, params: ModelParams | None = None) -> None:
        super().__init__(message)
        self.params = params  # The last good checkpoint


class TuningError(RuntimeError):
    """Every cell of a hyperparameter grid failed."""

    def __init__(self, message: str, cells=()) -> None:
        super().__init__(message)
        self.cells = list(cells)


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters of a training run.

    Parameters
    ----------
    learning_rate : float
        The Adam step size, ``> 0``.
    reg_lambda : float
        The L2 regularization coefficient, ``>= 0``.
    embed_dim : int
        The embedding size `K` of each level. The total predictive embedding
        size is ``D = K (L + 1)``.
    layers : int
        The number of convolution layers `L` (0 for MF).
    cutoff_ratio : float
        The passband ratio `F` used to build the bases.
    batch_size : int
        Triples per optimizer step.
    epochs : int
        Passes over the training positives.
    negatives_per_positive : int
        Negative items drawn for each positive pair in an epoch.
    seed : int
        The global seed.
    eval_ks : tuple of int
        The list lengths reported by evaluations.
    selection_metric : string
        The validation metric (eg, ``"f1@2"``) used to pick the checkpoint.
    """

    learning_rate: float = 1e-3
    reg_lambda: float = 0.01
    embed_dim: int = 64
    layers: int = 1
    cutoff_ratio: float = 0.005
    batch_size: int = 10_000
    epochs: int = 200
    negatives_per_positive: int = 1
    seed: int = 0
    eval_ks: tuple[int, ...] = DEFAULT_KS
    selection_metric: str = "f1@2"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("`learning_rate` must be positive")
        if not self.reg_lambda >= 0:
            raise ValueError("`reg_lambda` must be non-negative")
        if self.embed_dim < 1:
            raise ValueError("`embed_dim` must be at least 1")
        if self.layers < 0:
            raise ValueError("`layers` must be non-negative")
        if not 0 < self.cutoff_ratio <= 1:
            raise ValueError("`cutoff_ratio` must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("`batch_size` must be at least 1")
        if self.epochs < 1:
            raise ValueError("`epochs` must be at least 1")
        if self.negatives_per_positive < 1:
            raise ValueError("`negatives_per_positive` must be at least 1")
        object.__setattr__(self, "eval_ks", tuple(int(k) for k in self.eval_ks))
        parse_metric(self.selection_metric)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        record = dataclasses.asdict(self)
        record["eval_ks"] = list(self.eval_ks)
        return record

    def digest(self) -> str:
        """A SHA-256 hex digest of the canonical JSON encoding."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Sampling


def sample_triples(
    interactions: InteractionSet,
    count: int | None = None,
    negatives_per_positive: int = 1,
    rng: np.random.Generator | None = None,
):
    """
    Draw BPR training triples.

    Parameters
    ----------
    interactions : InteractionSet
        The training positives.
    count : int, optional
        If None, enumerate every positive pair once (one epoch). Otherwise
        draw `count` positives uniformly with replacement.
    negatives_per_positive : int
        The number of triples generated for each positive.
    rng : numpy.random.Generator, optional
        The random source. Default: a generator seeded with 0.

    Returns
    -------
    ndarray of TRIPLE_DTYPE
        Negatives are uniform over the items the user has not interacted
        with. Users who interacted with every item are skipped.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if negatives_per_positive < 1:
        raise ValueError("`negatives_per_positive` must be at least 1")
    R = interactions.matrix()
    if count is None:
        index = np.arange(len(interactions))
    else:
        if count < 0:
            raise ValueError("`count` must be non-negative")
        index = rng.integers(0, len(interactions), count) if len(interactions) else []
    index = np.repeat(np.asarray(index, dtype=np.int64), negatives_per_positive)
    users = interactions.users[index]
    items = interactions.items[index]

    saturated = interactions.user_degrees()[users] >= interactions.N
    if saturated.any():
        _logger.warning(
            "Skipped %d positives from %d users with no negative items",
            saturated.sum(),
            len(np.unique(users[saturated])),
        )
        users, items = users[~saturated], items[~saturated]

    negatives = rng.integers(0, interactions.N, len(users))
    pending = np.flatnonzero(csr_contains(R, users, negatives))
    while len(pending):
        negatives[pending] = rng.integers(0, interactions.N, len(pending))
        pending = pending[csr_contains(R, users[pending], negatives[pending])]

    triples = np.empty(len(users), dtype=TRIPLE_DTYPE)
    triples["u"] = users
    triples["i"] = items
    triples["j"] = negatives
    return triples


# ---------------------------------------------------------------------------
# Loss and gradients


def loss_and_gradients(
    params: ModelParams,
    bases: TruncatedBases | None,
    triples,
    reg_lambda: float,
    need_gradients: bool = True,
):
    """
    Evaluate the BPR loss and (optionally) its exact gradients.

    Parameters
    ----------
    params : ModelParams
    bases : TruncatedBases or None
        None is allowed for models without layers.
    triples : ndarray of TRIPLE_DTYPE
    reg_lambda : float
        The regularization coefficient.
    need_gradients : bool
        Whether to run the backward pass.

    Returns
    -------
    loss : float
    grads : ModelParams or None
        Partial derivatives, in the same structure as `params`.
    """
    cache = lcfn_forward(params, bases)
    u, i, j = triples["u"], triples["i"], triples["j"]
    margin = score_pairs(cache, u, i) - score_pairs(cache, u, j)
    data = float(np.sum(np.logaddexp(0.0, -margin)))
    loss = data + reg_lambda / 2 * params.sum_squares()
    if not math.isfinite(loss):
        raise NumericOverflowError("Non-finite BPR loss")
    if not need_gradients:
        return loss, None

    g = -expit(-margin)[:, None]  # d loss / d margin
    dU = [np.zeros_like(U) for U in cache.user_layers]
    dV = [np.zeros_like(V) for V in cache.item_layers]
    for n, (U, V) in enumerate(zip(cache.user_layers, cache.item_layers)):
        np.add.at(dU[n], u, g * (V[i] - V[j]))
        np.add.at(dV[n], i, g * U[u])
        np.add.at(dV[n], j, -g * U[u])

    grads = params.zeros_like()
    for n in range(params.L, 0, -1):
        layer, grad = params.layers[n - 1], grads.layers[n - 1]
        U, V = cache.user_layers[n], cache.item_layers[n]
        dZu = dU[n] * U * (1 - U)
        dZv = dV[n] * V * (1 - V)
        grad.transform[:] = cache.user_filtered[n - 1].T @ dZu
        grad.transform += cache.item_filtered[n - 1].T @ dZv
        P = bases.user_basis.vectors
        Q = bases.item_basis.vectors
        dSu = P.T @ (dZu @ layer.transform.T)
        dSv = Q.T @ (dZv @ layer.transform.T)
        grad.k_user[:] = np.sum(dSu * cache.user_spectra[n - 1], axis=1)
        grad.k_item[:] = np.sum(dSv * cache.item_spectra[n - 1], axis=1)
        dU[n - 1] += P @ (layer.k_user[:, None] * dSu)
        dV[n - 1] += Q @ (layer.k_item[:, None] * dSv)
    grads.u0[:] = dU[0]
    grads.v0[:] = dV[0]

    if reg_lambda:
        for g_arr, p_arr in zip(grads.arrays(), params.arrays()):
            g_arr += reg_lambda * p_arr
    if not grads.all_finite():
        raise NumericOverflowError("Non-finite gradients")
    return loss, grads


def bpr_loss(params, bases, triples, reg_lambda: float) -> float:
    """The total BPR loss (data term plus L2 regularization)."""
    return loss_and_gradients(params, bases, triples, reg_lambda, False)[0]


def gradients(params, bases, triples, reg_lambda: float) -> ModelParams:
    """The exact gradients of `bpr_loss` for every parameter tensor."""
    return loss_and_gradients(params, bases, triples, reg_lambda)[1]


# ---------------------------------------------------------------------------
# Optimization


@dataclass
class AdamState:
    """
    First and second moment estimates for Adam.

    Moments are stored in `ModelParams.tensors` order.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> AdamState:
        return cls(
            [np.zeros_like(a) for a in params.arrays()],
            [np.zeros_like(a) for a in params.arrays()],
        )

    def copy(self) -> AdamState:
        return dataclasses.replace(
            self, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v]
        )


def adam_step(
    state: AdamState,
    params: ModelParams,
    grads: ModelParams,
    learning_rate: float,
) -> tuple[ModelParams, AdamState]:
    """
    Apply one bias-corrected Adam update.

    Returns
    -------
    params : ModelParams
        ``theta - eta m^ / (sqrt(v^) + eps)``
    state : AdamState
        The updated moments, with the step counter incremented.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("Parameter, gradient, and moment shapes must match")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    state = dataclasses.replace(state, m=new_m, v=new_v, step=t)
    return params.with_arrays(new_params), state


@dataclass(frozen=True)
class EpochRecord:
    """One line of the training history."""

    epoch: int
    loss: float
    metric_name: str
    metric_value: float
    wall_ms: float
    steps: int = 0
    learning_rate: float = math.nan

    def to_json(self) -> str:
        fields = ("epoch", "loss", "metric_name", "metric_value", "wall_ms")
        return json.dumps({name: getattr(self, name) for name in fields})


def _run_epoch(params, state, config, split, bases, epoch, learning_rate):
    triples = sample_triples(
        split.train,
        negatives_per_positive=config.negatives_per_positive,
        rng=rng_stream(config.seed, "sampler", epoch),
    )
    triples = triples[rng_stream(config.seed, "shuffle", epoch).permutation(len(triples))]
    total, steps = 0.0, 0
    for start in range(0, len(triples), config.batch_size):
        batch = triples[start : start + config.batch_size]
        loss, grads = loss_and_gradients(params, bases, batch, config.reg_lambda)
        params, state = adam_step(state, params, grads, learning_rate)
        if not params.all_finite():
            raise NumericOverflowError("Non-finite parameters after an update")
        total += loss
        steps += 1
    return params, state, total, steps


def _initial_params(config, split, bases, init):
    if isinstance(init, ModelParams):
        return init.copy()
    return init_params(
        split.M, split.N, config.embed_dim, config.layers, bases, config.seed, init
    )


def train(
    config: TrainConfig,
    split: SplitData,
    bases: TruncatedBases | None,
    init: str | tuple | ModelParams = "random",
) -> tuple[ModelParams, list[EpochRecord]]:
    """
    Train a model and keep the checkpoint with the best validation metric.

    Each epoch enumerates every training positive with freshly sampled
    negatives, shuffles the triples, and takes one Adam step per mini-batch.
    The model is evaluated on the validation set after every epoch.

    If an epoch produces non-finite values, the step size is halved once and
    the epoch is retried from the start-of-epoch checkpoint; a second failure
    raises `DivergenceError` carrying the best checkpoint so far.

    Parameters
    ----------
    config : TrainConfig
    split : SplitData
    bases : TruncatedBases or None
        The passband bases (None for MF).
    init : {"random"}, tuple of (u0, v0), or ModelParams
        The initialization: random, pretrained input embeddings, or a full
        parameter set to continue from.

    Returns
    -------
    best : ModelParams
        The checkpoint with the highest validation `selection_metric`.
    history : list of EpochRecord
    """
    params = _initial_params(config, split, bases, init)
    state = AdamState.zeros(params)
    learning_rate = config.learning_rate
    halved = False
    best, best_metric = params.copy(), -math.inf
    history: list[EpochRecord] = []
    _, k_sel = parse_metric(config.selection_metric)

    try:
        for epoch in range(1, config.epochs + 1):
            t_start = time.perf_counter()
            snapshot = (params.copy(), state.copy())
            while True:
                try:
                    params, state, loss, steps = _run_epoch(
                        params, state, config, split, bases, epoch, learning_rate
                    )
                    break
                except NumericOverflowError as e:
                    if halved:
                        raise DivergenceError(
                            f"Training diverged in epoch {epoch}: {e}", best
                        ) from e
                    halved = True
                    learning_rate /= 2
                    _logger.warning(
                        "Epoch %d diverged (%s); retrying with learning rate %g",
                        epoch,
                        e,
                        learning_rate,
                    )
                    params, state = snapshot[0].copy(), snapshot[1].copy()

            report = evaluate(
                ModelScorer(params, bases), split, "validation", ks=[k_sel]
            )
            metric = report.metric(config.selection_metric)
            record = EpochRecord(
                epoch=epoch,
                loss=loss,
                metric_name=config.selection_metric,
                metric_value=metric,
                wall_ms=1000 * (time.perf_counter() - t_start),
                steps=steps,
                learning_rate=learning_rate,
            )
            history.append(record)
            if metric > best_metric:
                best, best_metric = params.copy(), metric
            _logger.info(
                "Epoch %d/%d: loss %.6g, %s %.5f",
                epoch,
                config.epochs,
                loss,
                config.selection_metric,
                metric,
            )
    except KeyboardInterrupt:
        _logger.warning("--- Training interrupted after %d epochs ---", len(history))

    return best, history


def pretrain_mf(split: SplitData, config: TrainConfig):
    """
    Train plain MF to initialize the input embeddings of a deeper model.

    Returns
    -------
    u0, v0 : ndarray of float
        The best-validation MF embeddings, shapes (M, K) and (N, K).
    """
    best, _ = train(config.replace(layers=0), split, None, "random")
    return best.u0, best.v0


# ---------------------------------------------------------------------------
# Hyperparameter search


@dataclass
class GridCell:
    """The outcome of training one hyperparameter setting."""

    config: TrainConfig
    metric: float = -math.inf
    history: list[EpochRecord] = field(default_factory=list)
    params: ModelParams | None = field(default=None, repr=False)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "learning_rate": self.config.learning_rate,
                "reg_lambda": self.config.reg_lambda,
                "metric_name": self.config.selection_metric,
                "metric_value": None if self.error else self.metric,
                "epochs": len(self.history),
                "error": self.error,
            }
        )


@dataclass
class GridResult:
    """The winning configuration and every evaluated cell."""

    best_config: TrainConfig
    best_params: ModelParams
    cells: list[GridCell]


def coarse_grid() -> list[tuple[float, float]]:
    """The ``(learning_rate, reg_lambda)`` pairs of the coarse search."""
    return [(eta, lam) for eta in (1e-4, 1e-3, 1e-2) for lam in (1e-3, 1e-2, 1e-1)]


def fine_grid(learning_rate: float, reg_lambda: float) -> list[tuple[float, float]]:
    """
    A 5 x 5 grid around a coarse winner.

    Each value is scaled by ``{0.2, 0.5, 1, 2, 5}``, eg ``eta = 0.01`` gives
    ``{0.002, 0.005, 0.01, 0.02, 0.05}``.
    """
    factors = (0.2, 0.5, 1, 2, 5)
    return [
        (float(f"{learning_rate * a:.12g}"), float(f"{reg_lambda * b:.12g}"))
        for a in factors
        for b in factors
    ]


def grid_search(
    config: TrainConfig,
    grid: Iterable[tuple[float, float]],
    split: SplitData,
    bases: TruncatedBases | None,
    init: str | tuple | ModelParams = "random",
) -> GridResult:
    """
    Train one model per ``(learning_rate, reg_lambda)`` cell and pick the best.

    Cells are compared by their best validation `selection_metric`; ties go
    to the smaller learning rate, then the larger regularization.

    Raises
    ------
    TuningError
        If every cell diverged.
    """
    cells = []
    for learning_rate, reg_lambda in grid:
        cell_config = config.replace(learning_rate=learning_rate, reg_lambda=reg_lambda)
        cell = GridCell(cell_config)
        try:
            params, history = train(cell_config, split, bases, init)
        except (DivergenceError, NumericOverflowError) as e:
            cell.error = f"{type(e).__name__}: {e}"
            _logger.warning(
                "Grid cell (eta=%g, lambda=%g) failed: %s", learning_rate, reg_lambda, e
            )
        else:
            cell.params, cell.history = params, history
            if history:
                cell.metric = max(r.metric_value for r in history)
        cells.append(cell)
    if not cells:
        raise ValueError("`grid` must not be empty")

    live = [c for c in cells if c.error is None]
    if not live:
        raise TuningError(
            "Every grid cell failed: "
            + "; ".join(
                f"(eta={c.config.learning_rate:g}, lambda={c.config.reg_lambda:g}) {c.error}"
                for c in cells
            ),
            cells,
        )
    winner = min(
        live,
        key=lambda c: (-c.metric, c.config.learning_rate, -c.config.reg_lambda),
    )
    return GridResult(winner.config, winner.params, cells)


def tune(
    config: TrainConfig,
    split: SplitData,
    bases: TruncatedBases | None,
    init: str | tuple | ModelParams = "random",
    fine: bool = True,
    grid: Sequence[tuple[float, float]] | None = None,
) -> GridResult:
    """
    Run the coarse grid, then (optionally) the fine grid around its winner.

    The returned cells include both stages.
    """
    result = grid_search(config, grid or coarse_grid(), split, bases, init)
    if not fine:
        return result
    best = result.best_config
    _logger.info(
        "Coarse search winner: eta=%g, lambda=%g", best.learning_rate, best.reg_lambda
    )
    refined = grid_search(
        config, fine_grid(best.learning_rate, best.reg_lambda), split, bases, init
    )
    refined.cells = result.cells + refined.cells
    return refined
