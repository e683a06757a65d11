from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedfluence.data import ClientDataset, Dataset, FederationData, synth_generate
from fedfluence.errors import ConfigError, DegenerateRoundError, DivergenceError, EmptyInputError, FormatError
from fedfluence.fedavg import (FederationConfig, aggregate, aggregate_without, load_trajectory, local_train,
                               replay_round, run_federation, save_trajectory, select_participants)
from fedfluence.model import LayeredParams, ModelSpec, loss


def vec(*xs):
    return LayeredParams([np.array(xs, dtype=float)])


def selection_counts(cfg, rounds):
    counts = np.zeros(cfg.num_clients, dtype=int)
    for t in range(1, rounds + 1):
        counts[list(select_participants(cfg, t))] += 1
    return counts


def test_selection_is_deterministic_and_sized():
    cfg = FederationConfig(num_clients=30, clients_per_round=7, selection_seed=4)
    for t in (1, 2, 50):
        a, b = select_participants(cfg, t), select_participants(cfg, t)
        assert a == b and len(set(a)) == 7
    assert select_participants(cfg, 1) != select_participants(cfg.with_(selection_seed=5), 1)


def test_full_participation():
    cfg = FederationConfig(num_clients=6, clients_per_round=6)
    for t in range(1, 10):
        assert select_participants(cfg, t) == tuple(range(6))


def test_selection_maps_onto_client_ids():
    cfg = FederationConfig(num_clients=4, clients_per_round=2)
    ids = (10, 20, 30, 40)
    assert set(select_participants(cfg, 3, ids)) <= set(ids)


@pytest.mark.xfail(strict=True, reason="each count is Binomial(1000, 0.01); about a quarter of clients "
                                       "fall outside [7, 13] under any uniform sampler")
def test_selection_frequency_within_30_percent_over_1000_rounds():
    cfg = FederationConfig(num_clients=1000, clients_per_round=10, selection_seed=0)
    counts = selection_counts(cfg, 1000)
    assert np.all(np.abs(counts - 10) <= 3)


def test_selection_frequency_is_uniform():
    cfg = FederationConfig(num_clients=1000, clients_per_round=10, selection_seed=0)
    rounds = 20_000
    counts = selection_counts(cfg, rounds)
    expected = rounds * 10 / 1000
    assert np.all(np.abs(counts - expected) <= 0.3 * expected)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    dof = cfg.num_clients - 1
    assert chi2 < dof + 5 * np.sqrt(2 * dof)


def _client(X, y, cid=0):
    return ClientDataset(np.asarray(X, dtype=float), np.asarray(y), client_id=cid)


def test_local_train_stationary_start():
    spec = ModelSpec("logreg", 2, 2)
    client = _client([[1.0, -2.0], [1.0, -2.0]], [0, 1])
    cfg = FederationConfig(lr=0.5, local_iters=1, grad_samples=2)
    w, samples, _ = local_train(spec, spec.zeros(), client, cfg, t=1)
    assert w == spec.zeros()
    assert len(samples) == 1 and samples[0][0].shape == (2, 4)


def test_local_train_zero_learning_rate():
    spec = ModelSpec("mlp", 2, 3, (4,))
    rng = np.random.default_rng(0)
    client = _client(rng.standard_normal((6, 2)), rng.integers(0, 3, 6))
    cfg = FederationConfig(lr=0.0, local_iters=4, grad_samples=3)
    w0 = spec.init_params(1)
    w, _, iterates = local_train(spec, w0, client, cfg, t=1)
    assert w == w0 and len(iterates) == 4


def test_local_train_two_hand_iterated_steps():
    spec = ModelSpec("logreg", 1, 3)
    client = _client([[0.0]], [2])
    cfg = FederationConfig(lr=0.4, local_iters=2, grad_samples=1)
    b = np.array([0.3, -0.1, 0.2])
    w0 = LayeredParams([np.zeros(3), b], spec.shapes)
    for _ in range(2):
        p = np.exp(b - b.max())
        p /= p.sum()
        b = b - 0.4 * (p - np.eye(3)[2])
    w, _, _ = local_train(spec, w0, client, cfg, t=1)
    np.testing.assert_allclose(w.blocks[1], b, atol=1e-12, rtol=0)
    assert not w.blocks[0].any()


def test_local_train_records_gradients_at_visited_iterates():
    spec = ModelSpec("logreg", 2, 2)
    rng = np.random.default_rng(1)
    client = _client(rng.standard_normal((5, 2)), rng.integers(0, 2, 5), cid=3)
    cfg = FederationConfig(lr=0.3, local_iters=3, grad_samples=5)
    _, samples, iterates = local_train(spec, spec.init_params(0), client, cfg, t=2)
    from fedfluence.model import per_example_grads
    for i in range(3):
        g = per_example_grads(spec, iterates[i], client)
        for j in range(2):
            np.testing.assert_array_equal(samples[i][j], g[j])


def test_local_train_divergence_error():
    spec = ModelSpec("logreg", 1, 2)
    client = _client([[1e10], [-1e10]], [1, 0], cid=4)
    cfg = FederationConfig(lr=1e308, local_iters=2, grad_samples=1)
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
        local_train(spec, spec.init_params(0), client, cfg, t=7)
    assert info.value.round == 7 and info.value.client == 4


def test_aggregate_examples():
    assert aggregate({0: vec(1, 3), 1: vec(3, 5)}, {0: 2, 1: 2}) == vec(2, 4)
    assert aggregate({5: vec(1.5, -2)}, {5: 9}) == vec(1.5, -2)
    assert aggregate({0: vec(0, 0), 1: vec(4, 4)}, {0: 1, 1: 3}) == vec(3, 3)
    with pytest.raises(EmptyInputError):
        aggregate({}, {})


def test_aggregate_without_examples():
    locals_ = {0: vec(1, 3), 1: vec(3, 5)}
    sizes = {0: 2, 1: 2}
    assert aggregate_without(locals_, sizes, 9) == aggregate(locals_, sizes)
    assert aggregate_without(locals_, sizes, 0) == vec(3, 5)
    three = {0: vec(0, 7), 1: vec(2, 1), 2: vec(9, 9)}
    assert aggregate_without(three, {0: 1, 1: 1, 2: 2}, 2) == vec(1, 4)
    with pytest.raises(DegenerateRoundError):
        aggregate_without({0: vec(1)}, {0: 1}, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 50), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3)),
                min_size=1, max_size=6))
def test_aggregate_lies_in_coordinate_hull(items):
    locals_ = {k: vec(*xs) for k, (_, xs) in enumerate(items)}
    sizes = {k: n for k, (n, _) in enumerate(items)}
    agg = aggregate(locals_, sizes).flat()
    stack = np.array([v for _, v in items])
    assert np.all(agg >= stack.min(axis=0) - 1e-9) and np.all(agg <= stack.max(axis=0) + 1e-9)


def test_zero_rounds(small_federation):
    spec, data, cfg = small_federation
    traj = run_federation(spec, data, cfg.with_(rounds=0))
    assert traj.rounds == 0 and traj.records == []
    assert traj.models[0] == spec.init_params(cfg.init_seed)


def test_run_is_deterministic(small_federation):
    spec, data, cfg = small_federation
    a, b = run_federation(spec, data, cfg), run_federation(spec, data, cfg)
    assert all(x == y for x, y in zip(a.models, b.models))


def test_replay_invariance(small_federation):
    spec, data, cfg = small_federation
    traj = run_federation(spec, data, cfg)
    for rec in traj.records:
        assert replay_round(rec).max_abs_diff(traj.models[rec.t]) <= 1e-12


def test_initialisation_scale():
    spec = ModelSpec("logreg", 50, 10)
    w = spec.init_params(0).flat()
    assert abs(w.std() - 0.01) < 0.001 and abs(w.mean()) < 0.001


def test_training_loss_decreases_in_scaled_convex_setting():
    spec = ModelSpec("logreg", 10, 5)
    data = synth_generate(40, 10, 5, seed=0)
    cfg = FederationConfig(lr=0.003, num_clients=40, clients_per_round=10, local_iters=5, rounds=200,
                           grad_samples=5, keep_iterates=False)
    traj = run_federation(spec, data, cfg, record=False, keep_records=False)
    train = Dataset(np.vstack([c.X for c in data.clients]), np.concatenate([c.y for c in data.clients]))
    assert loss(spec, traj.models[-1], train) < loss(spec, traj.models[0], train)


def test_config_validation():
    data = synth_generate(4, 2, 2, seed=0, min_size=5)
    base = FederationConfig(num_clients=4, clients_per_round=2, grad_samples=5)
    base.validate(data)
    for bad in (dict(lr=0.0), dict(clients_per_round=1), dict(clients_per_round=5), dict(local_iters=0),
                dict(grad_samples=0), dict(mode="fancy"), dict(hessian="bfgs")):
        with pytest.raises(ConfigError):
            base.with_(**bad).validate()
    with pytest.raises(ConfigError):
        base.with_(grad_samples=min(data.sizes.values()) + 1).validate(data)


def test_config_aliases():
    cfg = FederationConfig(mode="lwet-fine-grained", hessian="exact-dense")
    assert (cfg.mode, cfg.hessian) == ("lwet-fine", "exact")


def test_excluding_everyone_gives_degenerate_rounds():
    spec = ModelSpec("logreg", 2, 2)
    data = synth_generate(2, 2, 2, seed=0)
    cfg = FederationConfig(lr=0.1, num_clients=2, clients_per_round=2, local_iters=1, rounds=3, grad_samples=2)
    traj = run_federation(spec, data, cfg, exclude=[0, 1])
    assert traj.degenerate_rounds == [1, 2, 3]
    assert all(w == traj.models[0] for w in traj.models)


def test_checkpoint_round_trip(tmp_path, small_federation):
    spec, data, cfg = small_federation
    traj = run_federation(spec, data, cfg.with_(rounds=3))
    path = tmp_path / "traj.json"
    save_trajectory(traj, path)
    assert path.read_text().startswith("FEDFLU1\n")
    back = load_trajectory(path)
    assert all(a == b for a, b in zip(traj.models, back.models))
    for ra, rb in zip(traj.records, back.records):
        assert ra.participants == rb.participants and dict(ra.sizes) == dict(rb.sizes)
        for k in ra.participants:
            assert ra.local_models[k] == rb.local_models[k]
            for ga, gb in zip(ra.grad_samples[k], rb.grad_samples[k]):
                for a, b in zip(ga, gb):
                    np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("NOPE\n{}")
    with pytest.raises(FormatError):
        load_trajectory(path)
