import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alteraser.errors import DivergenceError
from alteraser.firstorder import TrainConfig, batch_gradients, first_order_substep, train
from alteraser.mfmodel import (ModelState, WeightScheme, grad_h, grad_item, grad_user, init_model,
                               loss_efficient)
from alteraser.subsolver import SubproblemSpec, ah_newton_solve, build_gram
from instances import dataset_from_pairs, random_dataset, random_instance


def _rank_one_dataset(seed=0, m=40, n=50):
    rng = np.random.default_rng(seed)
    p = rng.random(m) < 0.5
    a = rng.random(n) < 0.4
    return dataset_from_pairs(m, n, np.argwhere(np.outer(p, a)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_batch_gradients_sum_to_full_gradient(seed, n_batches):
    rng = np.random.default_rng(seed)
    ds, model = random_instance(rng, m=int(rng.integers(n_batches, 16)))
    perm = rng.permutation(model.num_users)
    gQ = np.zeros_like(model.Q)
    gh = np.zeros_like(model.h)
    for batch in np.array_split(perm, n_batches):
        batch = np.sort(batch)
        gP_b, gQ_b, gh_b = batch_gradients(model, ds, batch)
        for row, u in zip(gP_b, batch):
            np.testing.assert_allclose(row, grad_user(model, ds, int(u)), rtol=1e-10, atol=1e-12)
        gQ += gQ_b
        gh += gh_b
    full_Q = np.array([grad_item(model, ds, v) for v in range(model.num_items)])
    np.testing.assert_allclose(gQ, full_Q, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(gh, grad_h(model, ds), rtol=1e-9, atol=1e-11)


def test_training_decreases_loss():
    rng = np.random.default_rng(0)
    ds = random_dataset(rng, 30, 40, density=0.2)
    init = init_model(30, 40, 8, 0.05, seed=1)
    model, log = train(ds, TrainConfig(learning_rate=0.01, max_epochs=30, batch_size_users=8), init)
    assert loss_efficient(model, ds) <= loss_efficient(init, ds)
    assert log.initial_loss == pytest.approx(loss_efficient(init, ds))


def test_rank_one_planted_fit():
    ds = _rank_one_dataset()
    init = init_model(ds.num_users, ds.num_items, 4, 1e-2, WeightScheme("uniform", w0=0.05), seed=0)
    model, _ = train(ds, TrainConfig(learning_rate=0.02, batch_size_users=8, max_epochs=400), init)
    assert loss_efficient(model, ds) < 0.1 * loss_efficient(init, ds)


def test_training_is_deterministic():
    ds = _rank_one_dataset(seed=3)
    init = init_model(ds.num_users, ds.num_items, 4, 0.1, seed=2)
    cfg = TrainConfig(learning_rate=0.01, batch_size_users=7, max_epochs=25, seed=5)
    (m1, l1), (m2, l2) = train(ds, cfg, init), train(ds, cfg, init)
    assert l1.train_loss == l2.train_loss and l1.best_epoch == l2.best_epoch
    assert m1.P.tobytes() == m2.P.tobytes() and m1.Q.tobytes() == m2.Q.tobytes()


def test_init_is_not_mutated():
    ds = _rank_one_dataset(seed=4)
    init = init_model(ds.num_users, ds.num_items, 3, 0.1, seed=2)
    before = init.P.copy()
    train(ds, TrainConfig(learning_rate=0.05, max_epochs=3), init)
    np.testing.assert_array_equal(init.P, before)


def test_returns_best_model():
    ds = random_dataset(np.random.default_rng(1), 20, 20, density=0.3)
    init = init_model(20, 20, 4, 0.05, seed=0)
    # a large step makes the loss oscillate, so later epochs are often worse
    model, log = train(ds, TrainConfig(learning_rate=0.3, max_epochs=40, patience=5), init)
    best = loss_efficient(model, ds)
    assert best == pytest.approx(min([log.initial_loss] + log.train_loss), rel=1e-12)
    if log.best_epoch:
        assert all(best <= x for x in log.train_loss[log.best_epoch:])


def test_patience_stops_early():
    ds = _rank_one_dataset(seed=5)
    init = init_model(ds.num_users, ds.num_items, 4, 0.1, seed=0)
    _, log = train(ds, TrainConfig(learning_rate=0.0, weight_decay=0.0, max_epochs=100, patience=3), init)
    assert log.epochs == [1, 2, 3]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = _rank_one_dataset(seed=6)
    init = init_model(ds.num_users, ds.num_items, 4, 0.1, seed=0, std=1.0)
    with pytest.raises(DivergenceError) as info:
        train(ds, TrainConfig(learning_rate=1e200, max_epochs=5), init)
    assert info.value.epoch >= 1


def test_trainlog_csv(tmp_path):
    ds = _rank_one_dataset(seed=7)
    _, log = train(ds, TrainConfig(learning_rate=0.01, max_epochs=3),
                   init_model(ds.num_users, ds.num_items, 2, 0.1))
    log.write_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_loss", "elapsed_seconds"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]


@pytest.mark.parametrize("kwargs", [{"beta1": 1.0}, {"beta2": 0.0}, {"patience": 0},
                                    {"learning_rate": -1.0}, {"batch_size_users": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# block substep ----------------------------------------------------------------


def _spec(seed=0, d=5):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(30, d))
    return SubproblemSpec(rng.normal(size=(10, d)), rng.uniform(0.5, 1, 10),
                          build_gram(rows, np.ones(d), np.full(30, 0.05)), 0.5)


def test_substep_identity_without_learning_rate():
    spec = _spec()
    x = np.arange(5.0)
    out = first_order_substep(spec, x, TrainConfig(learning_rate=0.0, weight_decay=0.0), steps=1)
    np.testing.assert_array_equal(out, x)


def test_substep_zero_gradient_only_decays():
    # H = 2, b = 1: x = 0.5 has an exactly zero gradient
    spec = SubproblemSpec(np.ones((1, 1)), np.ones(1), np.zeros((1, 1)), 1.0)
    x = np.array([0.5])
    out = first_order_substep(spec, x, TrainConfig(learning_rate=0.01, weight_decay=0.0), steps=10)
    np.testing.assert_array_equal(out, x)
    out = first_order_substep(spec, x, TrainConfig(learning_rate=0.01, weight_decay=0.5), steps=1)
    np.testing.assert_allclose(out, x * (1 - 0.01 * 0.5), rtol=1e-15)


def test_substep_approaches_newton_solution():
    spec = _spec(2)
    target = ah_newton_solve(spec)
    cfg = TrainConfig(learning_rate=0.02, weight_decay=0.0)
    dists = [np.linalg.norm(first_order_substep(spec, np.zeros(5), cfg, steps=s) - target)
             for s in (25, 50, 100, 200, 400)]
    assert all(b < a for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 1e-4 * np.linalg.norm(target)


def test_update_h_flag_freezes_layer():
    ds = _rank_one_dataset(seed=8)
    init = init_model(ds.num_users, ds.num_items, 3, 0.1, seed=0)
    model, _ = train(ds, TrainConfig(learning_rate=0.05, max_epochs=3), init, update_h=False)
    np.testing.assert_array_equal(model.h, init.h)
    assert isinstance(model, ModelState)
