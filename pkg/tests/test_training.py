import json
import math

import numpy as np
import pytest
import scipy.stats
from conftest import random_interactions

from pfh.specrec import evaluation, training
from pfh.specrec.hypergraph import InteractionSet, ncore_filter, user_item_laplacians
from pfh.specrec.linalg import dense_symmetric_eig
from pfh.specrec.model import ModelParams, NumericOverflowError, init_params
from pfh.specrec.spectral import TruncatedBases, truncated_bases
from pfh.specrec.training import (
    TRIPLE_DTYPE,
    AdamState,
    TrainConfig,
    adam_step,
    bpr_loss,
    gradients,
    sample_triples,
)


def make_triples(rows):
    triples = np.empty(len(rows), dtype=TRIPLE_DTYPE)
    for n, (u, i, j) in enumerate(rows):
        triples[n] = (u, i, j)
    return triples


@pytest.fixture
def fixture_12x9(rng):
    R = random_interactions(rng, 12, 9)
    L_user, L_item = user_item_laplacians(R)
    P = dense_symmetric_eig(L_user.to_dense()).truncate(6)
    Q = dense_symmetric_eig(L_item.to_dense()).truncate(5)
    bases = TruncatedBases(P, Q, 0.5)
    params = init_params(12, 9, 4, 2, bases, seed=0)
    # Move away from the initialization so every gradient is non-trivial
    params = params.with_arrays(
        [a + 0.3 * rng.standard_normal(a.shape) for a in params.arrays()]
    )
    interactions = InteractionSet.from_matrix(R)
    triples = sample_triples(interactions, rng=np.random.default_rng(0))
    return params, bases, triples


@pytest.fixture
def toy_split():
    cfg = evaluation.SyntheticConfig(M=40, N=30, exposure_rate=0.9, seed=1)
    data = evaluation.generate_synthetic(cfg)
    return evaluation.split(data.interactions(), seed=1)


# ---------------------------------------------------------------------------
# Configuration


def test_config_defaults():
    config = TrainConfig()
    assert config.learning_rate == 1e-3
    assert config.embed_dim * (config.layers + 1) == 128
    assert config.selection_metric == "f1@2"


@pytest.mark.parametrize(
    "changes",
    [
        {"learning_rate": 0},
        {"reg_lambda": -1},
        {"batch_size": 0},
        {"epochs": 0},
        {"selection_metric": "mrr@2"},
    ],
)
def test_config_invalid(changes):
    with pytest.raises(ValueError):
        TrainConfig(**changes)


def test_config_digest_stable():
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(seed=1).digest()


# ---------------------------------------------------------------------------
# Sampling


def test_forced_negative():
    s = InteractionSet(np.array([0]), np.array([0]), ["u"], ["a", "b"])
    triples = sample_triples(s, count=20, rng=np.random.default_rng(0))
    assert len(triples) == 20
    assert np.all(triples["u"] == 0)
    assert np.all(triples["i"] == 0)
    assert np.all(triples["j"] == 1)


def test_epoch_enumerates_each_positive(rng):
    s = InteractionSet.from_matrix(random_interactions(rng, 10, 8))
    triples = sample_triples(s, negatives_per_positive=2, rng=rng)
    assert len(triples) == 2 * len(s)
    pairs = sorted(zip(triples["u"].tolist(), triples["i"].tolist()))
    assert pairs == sorted(list(s.pairs()) * 2)
    R = s.matrix().toarray()
    assert np.all(R[triples["u"], triples["i"]] == 1)
    assert np.all(R[triples["u"], triples["j"]] == 0)


def test_saturated_user_skipped(caplog):
    s = InteractionSet(np.array([0, 0, 1]), np.array([0, 1, 0]), ["u", "v"], ["a", "b"])
    triples = sample_triples(s, rng=np.random.default_rng(0))
    assert list(triples["u"]) == [1]
    assert sum("no negative items" in r.message for r in caplog.records) == 1


def test_negatives_are_uniform():
    R = np.zeros((1, 10))
    R[0, [2, 5, 7]] = 1
    s = InteractionSet.from_matrix(R)
    triples = sample_triples(s, count=100_000, rng=np.random.default_rng(3))
    counts = np.bincount(triples["j"], minlength=10)
    assert np.all(counts[[2, 5, 7]] == 0)
    observed = counts[[0, 1, 3, 4, 6, 8, 9]]
    _, p = scipy.stats.chisquare(observed)
    assert p > 1e-3


def test_sampling_deterministic(rng):
    s = InteractionSet.from_matrix(random_interactions(rng, 10, 8))
    a = sample_triples(s, rng=np.random.default_rng(5))
    b = sample_triples(s, rng=np.random.default_rng(5))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Loss and gradients


def test_loss_equal_scores_is_ln2():
    params = ModelParams(np.ones((1, 2)), np.ones((2, 2)))
    loss = bpr_loss(params, None, make_triples([(0, 0, 1)]), 0.0)
    assert math.isclose(loss, math.log(2), rel_tol=1e-12)


def test_loss_decreases_with_margin():
    losses = []
    for margin in (1, 5, 10):
        params = ModelParams(np.array([[1.0]]), np.array([[margin], [0.0]]))
        losses.append(bpr_loss(params, None, make_triples([(0, 0, 1)]), 0.0))
    assert losses[0] > losses[1] > losses[2] > 0


def test_loss_matches_scalar_recomputation(fixture_12x9):
    params, bases, triples = fixture_12x9
    triples = triples[:5]
    P, Q = bases.user_basis.vectors, bases.item_basis.vectors
    U, V = [params.u0], [params.v0]
    for layer in params.layers:
        Zu = P @ np.diag(layer.k_user) @ P.T @ U[-1] @ layer.transform
        Zv = Q @ np.diag(layer.k_item) @ Q.T @ V[-1] @ layer.transform
        U.append(1 / (1 + np.exp(-Zu)))
        V.append(1 / (1 + np.exp(-Zv)))
    Uc, Vc = np.hstack(U), np.hstack(V)
    expected = 0.0
    for u, i, j in triples.tolist():
        margin = Uc[u] @ Vc[i] - Uc[u] @ Vc[j]
        expected += -math.log(1 / (1 + math.exp(-margin)))
    expected += 0.01 / 2 * sum(float(np.sum(a**2)) for a in params.arrays())
    assert math.isclose(bpr_loss(params, bases, triples, 0.01), expected, rel_tol=1e-10)


def test_loss_non_negative(fixture_12x9):
    params, bases, triples = fixture_12x9
    assert bpr_loss(params, bases, triples, 0.0) >= 0
    assert bpr_loss(params, bases, triples, 0.1) >= bpr_loss(params, bases, triples, 0.0)


def test_loss_overflow(fixture_12x9):
    params, bases, triples = fixture_12x9
    params.u0[0, 0] = np.inf
    with pytest.raises(NumericOverflowError):
        bpr_loss(params, bases, triples, 0.0)


def test_empty_triples_give_pure_regularizer(fixture_12x9):
    params, bases, _ = fixture_12x9
    grads = gradients(params, bases, np.empty(0, dtype=TRIPLE_DTYPE), 0.01)
    for g, p in zip(grads.arrays(), params.arrays()):
        assert np.array_equal(g, 0.01 * p)


def test_mf_gradient_closed_form():
    rng = np.random.default_rng(0)
    params = ModelParams(rng.standard_normal((2, 3)), rng.standard_normal((3, 3)))
    grads = gradients(params, None, make_triples([(1, 0, 2)]), 0.1)
    u, vi, vj = params.u0[1], params.v0[0], params.v0[2]
    margin = u @ vi - u @ vj
    sig = 1 / (1 + math.exp(margin))
    assert np.allclose(grads.u0[1], -sig * (vi - vj) + 0.1 * u)
    assert np.allclose(grads.v0[0], -sig * u + 0.1 * vi)
    assert np.allclose(grads.v0[2], sig * u + 0.1 * vj)
    assert np.allclose(grads.u0[0], 0.1 * params.u0[0])


@pytest.mark.parametrize("reg_lambda", [0.0, 0.01])
def test_gradients_match_finite_differences(fixture_12x9, reg_lambda):
    params, bases, triples = fixture_12x9
    analytic = gradients(params, bases, triples, reg_lambda)
    h = 1e-5
    for (name, p), g in zip(params.tensors(), analytic.arrays()):
        numeric = np.empty_like(p)
        for index in np.ndindex(p.shape):
            saved = p[index]
            p[index] = saved + h
            upper = bpr_loss(params, bases, triples, reg_lambda)
            p[index] = saved - h
            lower = bpr_loss(params, bases, triples, reg_lambda)
            p[index] = saved
            numeric[index] = (upper - lower) / (2 * h)
        scale = max(np.abs(numeric).max(), 1e-8)
        error = np.abs(g - numeric).max() / scale
        assert error < 1e-4, name


# ---------------------------------------------------------------------------
# Adam


def scalar_params(value):
    return ModelParams(np.array([[value]]), np.array([[0.0]]))


def test_adam_zero_gradient():
    params = scalar_params(1.5)
    state = AdamState.zeros(params)
    new, state = adam_step(state, params, params.zeros_like(), 0.1)
    assert new.u0[0, 0] == 1.5
    assert state.step == 1


def test_adam_first_step():
    params = scalar_params(0.0)
    grads = ModelParams(np.array([[2.0]]), np.array([[0.0]]))
    new, _ = adam_step(AdamState.zeros(params), params, grads, 0.1)
    assert math.isclose(new.u0[0, 0], -0.1, abs_tol=1e-8)


def test_adam_moves_against_gradient():
    params = scalar_params(0.0)
    grads = ModelParams(np.array([[-1.0]]), np.array([[0.0]]))
    state = AdamState.zeros(params)
    first, state = adam_step(state, params, grads, 0.01)
    second, state = adam_step(state, first, grads, 0.01)
    assert 0 < first.u0[0, 0] < second.u0[0, 0]
    assert state.step == 2


def test_adam_shape_mismatch():
    params = scalar_params(0.0)
    grads = ModelParams(np.zeros((2, 1)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(params), params, grads, 0.1)


# ---------------------------------------------------------------------------
# Training loop


def small_config(**changes):
    base = dict(embed_dim=4, layers=1, cutoff_ratio=0.2, batch_size=64, epochs=3)
    base.update(changes)
    return TrainConfig(**base)


def split_bases(split, f):
    L_user, L_item = user_item_laplacians(split.train.matrix())
    return truncated_bases(L_user, L_item, f)


def test_train_step_count(toy_split):
    config = small_config(epochs=1, layers=0)
    _, history = training.train(config, toy_split, None)
    assert len(history) == 1
    assert history[0].steps == math.ceil(len(toy_split.train) / config.batch_size)


def test_train_keeps_best_checkpoint(toy_split):
    config = small_config(learning_rate=0.01)
    bases = split_bases(toy_split, config.cutoff_ratio)
    best, history = training.train(config, toy_split, bases)
    report = evaluation.evaluate(
        evaluation.ModelScorer(best, bases), toy_split, "validation", ks=[2]
    )
    assert report.metric("f1@2") == max(r.metric_value for r in history)


def test_train_deterministic(toy_split):
    config = small_config()
    bases = split_bases(toy_split, config.cutoff_ratio)
    a, ha = training.train(config, toy_split, bases)
    b, hb = training.train(config, toy_split, bases)
    assert [r.loss for r in ha] == [r.loss for r in hb]
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def test_history_json(toy_split):
    _, history = training.train(small_config(epochs=1, layers=0), toy_split, None)
    record = history[0].to_json()
    assert set(json.loads(record)) == {
        "epoch",
        "loss",
        "metric_name",
        "metric_value",
        "wall_ms",
    }


def test_divergence_aborts_with_checkpoint(toy_split, monkeypatch):
    def overflow(*args, **kwargs):
        raise NumericOverflowError("forced")

    monkeypatch.setattr(training, "loss_and_gradients", overflow)
    with pytest.raises(training.DivergenceError) as info:
        training.train(small_config(layers=0), toy_split, None)
    assert isinstance(info.value.params, ModelParams)


def test_divergence_retries_once(toy_split, monkeypatch, caplog):
    real = training.loss_and_gradients
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise NumericOverflowError("forced")
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "loss_and_gradients", flaky)
    _, history = training.train(small_config(layers=0, epochs=2), toy_split, None)
    assert len(history) == 2
    assert history[0].learning_rate == small_config().learning_rate / 2


def test_keyboard_interrupt_returns_best(toy_split, monkeypatch):
    real = training.evaluate
    calls = {"n": 0}

    def interrupt(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise KeyboardInterrupt
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "evaluate", interrupt)
    best, history = training.train(small_config(layers=0, epochs=5), toy_split, None)
    assert len(history) == 1
    assert best.u0.shape == (toy_split.M, 4)


def test_pretrain_shapes(toy_split):
    u0, v0 = training.pretrain_mf(toy_split, small_config(epochs=2))
    assert u0.shape == (toy_split.M, 4)
    assert v0.shape == (toy_split.N, 4)


def epochs_to_reach(history, loss):
    return next((r.epoch for r in history if r.loss <= loss), math.inf)


def test_pretraining_speeds_up_convergence(toy_split):
    config = small_config(epochs=20, learning_rate=1e-2)
    bases = split_bases(toy_split, config.cutoff_ratio)
    u0, v0 = training.pretrain_mf(toy_split, config)
    _, warm = training.train(config, toy_split, bases, (u0, v0))
    _, cold = training.train(config, toy_split, bases, "random")
    target = warm[0].loss
    assert epochs_to_reach(warm, target) == 1
    assert epochs_to_reach(cold, target) > 1
    assert cold[0].loss > warm[0].loss


# ---------------------------------------------------------------------------
# Grid search


def test_coarse_grid():
    grid = training.coarse_grid()
    assert len(grid) == 9
    assert {eta for eta, _ in grid} == {1e-4, 1e-3, 1e-2}
    assert {lam for _, lam in grid} == {1e-3, 1e-2, 1e-1}


def test_fine_grid():
    grid = training.fine_grid(0.01, 0.1)
    assert len(grid) == 25
    assert sorted({eta for eta, _ in grid}) == [0.002, 0.005, 0.01, 0.02, 0.05]


def test_single_cell_grid_equals_train(toy_split):
    config = small_config(layers=0, epochs=2)
    result = training.grid_search(config, [(1e-3, 0.01)], toy_split, None)
    best, _ = training.train(config, toy_split, None)
    assert len(result.cells) == 1
    assert all(
        np.array_equal(x, y) for x, y in zip(result.best_params.arrays(), best.arrays())
    )


def test_grid_selects_best_cell(toy_split):
    config = small_config(layers=0, epochs=1)
    result = training.grid_search(config, training.coarse_grid(), toy_split, None)
    assert len(result.cells) == 9
    winner = max(c.metric for c in result.cells)
    assert any(
        c.config == result.best_config and c.metric == winner for c in result.cells
    )


def test_grid_tie_break(toy_split, monkeypatch):
    def constant(config, split, bases, init="random"):
        params = init_params(split.M, split.N, config.embed_dim, 0, None, 0)
        record = training.EpochRecord(1, 1.0, "f1@2", 0.5, 0.0)
        return params, [record]

    monkeypatch.setattr(training, "train", constant)
    grid = [(1e-2, 1e-3), (1e-3, 1e-3), (1e-3, 1e-1)]
    result = training.grid_search(small_config(layers=0), grid, toy_split, None)
    assert result.best_config.learning_rate == 1e-3
    assert result.best_config.reg_lambda == 1e-1


def test_all_cells_fail(toy_split, monkeypatch):
    def diverge(*args, **kwargs):
        raise training.DivergenceError("forced")

    monkeypatch.setattr(training, "train", diverge)
    with pytest.raises(training.TuningError) as info:
        training.grid_search(small_config(), [(1e-3, 0.01), (1e-2, 0.1)], toy_split, None)
    assert len(info.value.cells) == 2
    assert all(c.error for c in info.value.cells)


def test_tune_runs_both_stages(toy_split, monkeypatch):
    def record(config, split, bases, init="random"):
        params = init_params(split.M, split.N, config.embed_dim, 0, None, 0)
        metric = 1.0 if (config.learning_rate, config.reg_lambda) == (1e-2, 1e-1) else 0.1
        return params, [training.EpochRecord(1, 1.0, "f1@2", metric, 0.0)]

    monkeypatch.setattr(training, "train", record)
    result = training.tune(small_config(layers=0), toy_split, None, fine=True)
    assert len(result.cells) == 9 + 25
    assert result.best_config.learning_rate == 1e-2
    assert result.best_config.reg_lambda == 1e-1


# ---------------------------------------------------------------------------
# Acceptance runs on synthetic data


@pytest.mark.slow
def test_training_loss_decreases():
    descending = 0
    for seed in range(5):
        cfg = evaluation.SyntheticConfig(seed=seed)
        observed = ncore_filter(evaluation.generate_synthetic(cfg).interactions(), 1, 1)
        data = evaluation.split(observed, seed=seed)
        config = TrainConfig(
            embed_dim=16, cutoff_ratio=0.1, batch_size=256, epochs=10,
            learning_rate=1e-2, seed=seed,
        )  # fmt: skip
        bases = split_bases(data, config.cutoff_ratio)
        _, history = training.train(config, data, bases)
        descending += history[-1].loss < history[0].loss
    assert descending >= 3
