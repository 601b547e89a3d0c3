import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetlight_fl.fl import (
    AggregationError,
    ClientState,
    ClientUpdate,
    CommLedger,
    FLConfig,
    comm_cost,
    fedavg_aggregate,
    kmeans_fit,
    local_train,
    partial_aggregate,
    run_clustered_fl,
    run_fl,
    run_round,
    sample_clients,
)
from streetlight_fl.fl.client import epoch_order
from streetlight_fl.model import (
    ModelParams,
    TrainConfig,
    backward_arrays,
    init_params,
    model_bytes,
    sgd_step,
)
from streetlight_fl.synth import LampState, Sample

D = 12


def make_client(node_id, n, seed, shift=0.0, n_test=6):
    rng = np.random.default_rng(seed)
    w = np.linspace(-1, 1, D)

    def draw(k):
        x = rng.normal(shift, 1.0, (k, D))
        return [Sample(node_id, 0, LampState(int(v @ w > shift)), features=v) for v in x]

    return ClientState(node_id, draw(n), draw(n_test))


def make_clients(count=5, seed=0, sizes=None):
    sizes = sizes or [10 + 3 * i for i in range(count)]
    return [make_client(i * 3 + 1, sizes[i], seed + i) for i in range(count)]


def params_update(node_id, layers, n):
    return ClientUpdate(node_id, ModelParams(tuple(layers)), n)


def scalar_update(node_id, v, n):
    return params_update(node_id, [(np.array([[v]]), np.array([0.0])), (np.array([[v]]), np.array([v]))], n)


# -- local training ------------------------------------------------------------------

def test_local_train_zero_epochs_identity():
    c = make_client(2, 20, 0)
    g = init_params([D, 3, 1], 1)
    u = local_train(c, g, TrainConfig(local_epochs=0))
    assert u.params.equal(g) and u.sample_count == 20


def test_local_train_single_sample_matches_manual_step():
    c = make_client(4, 1, 3)
    g = init_params([D, 3, 1], 5)
    cfg = TrainConfig(learning_rate=0.1, batch_size=1, local_epochs=1)
    u = local_train(c, g, cfg)
    x = c.local_train[0].features[None, :]
    grad, _ = backward_arrays(g, x, [float(c.local_train[0].label)])
    assert u.params.equal(sgd_step(g, grad, 0.1))
    assert c.params is u.params


def test_local_train_deterministic_and_empty_error():
    g = init_params([D, 3, 1], 5)
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, local_epochs=3, shuffle_seed=9)
    a = local_train(make_client(1, 17, 2), g, cfg, 4)
    b = local_train(make_client(1, 17, 2), g, cfg, 4)
    assert a.params.equal(b.params)
    with pytest.raises(ValueError):
        local_train(ClientState(1, []), g, cfg)


# -- FedAvg --------------------------------------------------------------------------

def test_fedavg_examples():
    one = scalar_update(1, 1.5, 7)
    assert fedavg_aggregate([one]).equal(one.params)
    mid = fedavg_aggregate([scalar_update(1, 1.0, 5), scalar_update(2, 3.0, 5)])
    assert mid.layers[0][0][0, 0] == 2.0
    weighted = fedavg_aggregate([scalar_update(1, 1.0, 100), scalar_update(2, 3.0, 300)])
    # weighted-mean oracle: (1*100 + 3*300) / 400
    assert weighted.layers[0][0][0, 0] == (1.0 * 100 + 3.0 * 300) / 400 == 2.5


def test_fedavg_errors():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    a = ClientUpdate(1, init_params([4, 2, 1], 0), 3)
    b = ClientUpdate(2, init_params([4, 3, 1], 0), 3)
    with pytest.raises(AggregationError):
        fedavg_aggregate([a, b])
    with pytest.raises(AggregationError):
        fedavg_aggregate([ClientUpdate(1, a.params, 0)])


def random_updates(rng, k, residual=False):
    ids = rng.choice(1000, size=k, replace=False)
    return [ClientUpdate(int(i), init_params([5, 3, 1], int(rng.integers(1 << 30)), residual)
                         .with_layers((w * rng.uniform(0.5, 3), rng.normal(size=b.shape))
                                      for w, b in init_params([5, 3, 1], int(i), residual).layers),
                         int(rng.integers(1, 500))) for i in ids]


def brute_weighted_mean(updates):
    total = sum(u.sample_count for u in updates)
    out = []
    for li in range(len(updates[0].params.layers)):
        pair = []
        for ai in range(2):
            acc = sum(u.sample_count * u.params.layers[li][ai] for u in updates)
            pair.append(acc / total)
        out.append(pair)
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8))
def test_fedavg_oracle_convex_and_permutation(seed, k):
    rng = np.random.default_rng(seed)
    ups = random_updates(rng, k, residual=bool(seed % 2))
    agg = fedavg_aggregate(ups)
    for (w, b), (ow, ob) in zip(agg.layers, brute_weighted_mean(ups)):
        np.testing.assert_allclose(w, ow, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b, ob, rtol=0, atol=1e-12)
    flat = np.stack([u.params.flat() for u in ups])
    assert np.all(agg.flat() >= flat.min(axis=0)) and np.all(agg.flat() <= flat.max(axis=0))
    shuffled = [ups[i] for i in rng.permutation(k)]
    assert fedavg_aggregate(shuffled).equal(agg)


@settings(max_examples=40, deadline=None)
@given(v=st.floats(-1e6, 1e6, allow_nan=False), ns=st.lists(st.integers(1, 10**6), min_size=1, max_size=9))
def test_fedavg_identical_params_exact(v, ns):
    ups = [scalar_update(i, v, n) for i, n in enumerate(ns)]
    assert fedavg_aggregate(ups).equal(ups[0].params)


# -- partial aggregation -----------------------------------------------------------------

def test_partial_all_true_is_fedavg():
    ups = random_updates(np.random.default_rng(3), 4)
    shared, kept = partial_aggregate(ups, [True, True])
    full = fedavg_aggregate(ups)
    assert all(np.array_equal(shared[i][0], full.layers[i][0]) and
               np.array_equal(shared[i][1], full.layers[i][1]) for i in range(2))
    assert all(v == {} for v in kept.values())


def test_partial_all_false_keeps_clients():
    ups = random_updates(np.random.default_rng(4), 3)
    shared, kept = partial_aggregate(ups, [False, False])
    assert shared == {}
    for u in ups:
        assert all(np.array_equal(kept[u.node_id][i][0], u.params.layers[i][0]) for i in range(2))


def test_partial_first_layer_only():
    ups = random_updates(np.random.default_rng(5), 3)
    shared, kept = partial_aggregate(ups, [True, False])
    oracle = brute_weighted_mean(ups)
    np.testing.assert_allclose(shared[0][0], oracle[0][0], atol=1e-12)
    assert set(shared) == {0}
    for u in ups:
        assert kept[u.node_id][1][0] is u.params.layers[1][0]
    with pytest.raises(AggregationError):
        partial_aggregate(ups, [True])


# -- sampling ------------------------------------------------------------------------------

def test_sample_clients_examples():
    ids = list(range(140))
    assert sample_clients(ids, 1.0, 3, 0) == ids
    sel = sample_clients(ids, 0.1, 3, 0)
    assert len(sel) == 14 and sel == sorted(set(sel))
    assert sample_clients(ids, 0.1, 3, 0) == sel
    assert sample_clients(ids, 0.1, 4, 0) != sel
    assert len(sample_clients(ids, 0.05, 0, 0)) == 7
    assert len(sample_clients(list(range(10)), 0.01, 0, 0)) == 1
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            sample_clients(ids, bad, 0, 0)


# -- rounds -----------------------------------------------------------------------------------

def fl_cfg(**kw):
    base = dict(rounds=4, client_fraction=0.6, train=TrainConfig(learning_rate=0.1, batch_size=4), sampling_seed=3)
    base.update(kw)
    return FLConfig(**base)


def test_run_round_ledger_delta():
    clients = make_clients(5)
    g = init_params([D, 3, 1], 0)
    ledger = CommLedger()
    cfg = fl_cfg()
    run_round(clients, g, cfg, 0, ledger)
    p = math.ceil(0.6 * 5)
    assert ledger.total == 2 * p * model_bytes(g)
    assert ledger.per_round == [(0, p, 2 * p * model_bytes(g))]
    assert ledger.consistent()


def test_run_round_zero_lr_identity():
    clients = make_clients(4)
    g = init_params([D, 3, 1], 0)
    cfg = fl_cfg(train=TrainConfig(learning_rate=0.0, batch_size=4))
    new, _ = run_round(clients, g, cfg, 0, CommLedger())
    assert new.equal(g)


def test_run_round_single_participant():
    clients = make_clients(1)
    g = init_params([D, 3, 1], 0)
    new, ups = run_round(clients, g, fl_cfg(), 0, CommLedger())
    assert len(ups) == 1 and new.equal(ups[0].params)


def test_run_fl_history_and_ledger():
    clients = make_clients(5)
    res = run_fl(clients, fl_cfg(rounds=6), init_params([D, 3, 1], 0))
    assert len(res.history) == 6
    assert [h.round for h in res.history] == list(range(6))
    assert res.ledger.consistent()
    assert sum(h.bytes for h in res.history) == res.ledger.total


def manual_sgd(params, client, cfg, epochs):
    """Plain SGD built from model-level ops and the documented shuffle key."""
    x = np.stack([s.features for s in client.local_train])
    y = np.array([float(s.label) for s in client.local_train])
    for e in range(epochs):
        order = epoch_order(client.node_id, len(y), cfg.shuffle_seed, e)
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g, _ = backward_arrays(params, x[idx], y[idx])
            params = sgd_step(params, g, cfg.learning_rate)
    return params


def test_single_client_fl_is_centralised_sgd():
    client = make_client(0, 23, 8)
    train = TrainConfig(learning_rate=0.07, batch_size=5, local_epochs=3, shuffle_seed=4)
    g0 = init_params([D, 4, 1], 2)
    res = run_fl([client], FLConfig(rounds=5, client_fraction=1.0, train=train), g0)
    assert res.global_params.equal(manual_sgd(g0, make_client(0, 23, 8), train, 15))


def test_partial_mask_all_true_equals_fedavg_run():
    cfg = fl_cfg(rounds=5)
    g0 = init_params([D, 3, 1], 1)
    a = run_fl(make_clients(5), cfg, g0)
    b = run_fl(make_clients(5), replace(cfg, shared_layer_mask=(True, True)), g0)
    assert a.global_params.equal(b.global_params)
    assert a.history == b.history


def test_partial_mask_keeps_private_layers_local():
    cfg = fl_cfg(rounds=3, client_fraction=1.0, shared_layer_mask=(True, False))
    g0 = init_params([D, 3, 1], 1)
    clients = make_clients(3)
    res = run_fl(clients, cfg, g0)
    assert res.global_params.layers[1][0] is g0.layers[1][0]
    heads = [res.client_models[c.node_id].layers[1][0] for c in clients]
    assert not np.array_equal(heads[0], heads[1])
    for c in clients:
        assert res.client_models[c.node_id].layers[0][0] is res.global_params.layers[0][0]
    # only the shared hidden layer crosses the wire
    shared_bytes = 8 + 8 + 8 * (3 * D + 3)
    assert res.ledger.per_round[0][2] == 2 * 3 * shared_bytes


def test_parallel_equals_sequential():
    cfg = fl_cfg(rounds=4, client_fraction=0.8)
    g0 = init_params([D, 3, 1], 1, residual=True)
    seq = run_fl(make_clients(6), cfg, g0, threads=1)
    par = run_fl(make_clients(6), cfg, g0, threads=4)
    assert seq.global_params.equal(par.global_params)
    assert seq.history == par.history


# -- k-means -----------------------------------------------------------------------------------

def brute_best_partition(x, k):
    n = len(x)
    best, best_sse = None, math.inf
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k:
            continue
        sse = sum(((x[np.array(labels) == j] - x[np.array(labels) == j].mean(axis=0)) ** 2).sum()
                  for j in range(k))
        if sse < best_sse - 1e-12:
            best, best_sse = labels, sse
    return best, best_sse


def as_partition(labels):
    groups = {}
    for i, l in enumerate(labels):
        groups.setdefault(int(l), set()).add(i)
    return sorted(map(frozenset, groups.values()), key=min)


def test_kmeans_k1_is_mean():
    x = np.random.default_rng(0).normal(size=(7, 4))
    r = kmeans_fit(x, 1, 0)
    assert np.all(r.assignments == 0)
    np.testing.assert_allclose(r.centroids[0], x.mean(axis=0), atol=1e-12)


def test_kmeans_two_groups_matches_brute_force():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    best, _ = brute_best_partition(x, 2)
    assert as_partition(best) == [{0, 1}, {2, 3}]
    for seed in range(10):
        assert as_partition(kmeans_fit(x, 2, seed).assignments) == as_partition(best)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 7), k=st.integers(1, 3))
def test_kmeans_sse_monotone_and_near_brute(seed, n, k):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2)) + rng.integers(0, 3, size=(n, 1)) * 5
    r = kmeans_fit(x, k, seed)
    assert all(b <= a + 1e-9 for a, b in zip(r.sse_history, r.sse_history[1:]))
    assert len(set(r.assignments.tolist())) == k
    _, best = brute_best_partition(x, k)
    assert r.sse_history[-1] >= best - 1e-9


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), 0)
    with pytest.raises(ValueError):
        kmeans_fit([[0.0, 1.0], [1.0]], 1)


def test_kmeans_duplicates_and_determinism():
    x = np.zeros((5, 3))
    r = kmeans_fit(x, 2, 1)
    assert len(set(r.assignments.tolist())) == 2
    y = np.random.default_rng(2).normal(size=(20, 3))
    assert np.array_equal(kmeans_fit(y, 3, 7).assignments, kmeans_fit(y, 3, 7).assignments)


# -- clustered FL ------------------------------------------------------------------------------------

def test_clustered_k1_equals_fedavg():
    cfg = fl_cfg(rounds=7, warmup_rounds=2, client_fraction=0.6)
    g0 = init_params([D, 3, 1], 1)
    plain = run_fl(make_clients(6), cfg, g0)
    clus = run_clustered_fl(make_clients(6), replace(cfg, cluster_count=1), g0)
    assert len(clus.cluster_params) == 1
    assert clus.cluster_params[0].equal(plain.global_params)
    assert clus.history == plain.history
    assert clus.ledger.total == plain.ledger.total


def two_population_clients():
    out = []
    for i in range(8):
        c = make_client(i, 30, 100 + i, shift=0.0 if i % 2 == 0 else 3.0)
        if i % 2:
            # second population: inverted labelling rule
            for s in c.local_train + c.local_test:
                s.label = LampState(1 - int(s.label))
        out.append(c)
    return out


def test_clustered_separates_populations_deterministically():
    cfg = fl_cfg(rounds=10, warmup_rounds=2, client_fraction=1.0, cluster_count=2,
                 train=TrainConfig(learning_rate=0.1, batch_size=8, local_epochs=10))
    g0 = init_params([D, 4, 1], 3)
    a = run_clustered_fl(two_population_clients(), cfg, g0)
    b = run_clustered_fl(two_population_clients(), cfg, g0)
    assert a.assignments == b.assignments
    groups = as_partition([a.assignments[i] for i in range(8)])
    assert groups == [{0, 2, 4, 6}, {1, 3, 5, 7}]
    assert a.ledger.consistent()


def test_joining_client_picks_best_model():
    from streetlight_fl.fl import best_cluster

    c = make_client(0, 5, 1, n_test=12)
    for smp in c.local_test:
        smp.label = LampState.ON
    base = init_params([D, 3, 1], 0)
    off = base.with_layers((np.zeros_like(w), np.zeros_like(b)) for w, b in base.layers)
    on = off.with_layers([off.layers[0], (off.layers[1][0], np.array([5.0]))])
    assert best_cluster(c, [off, on]) == 1
    assert best_cluster(c, [on, on]) == 0  # ties go to the lower index


# -- comm -----------------------------------------------------------------------------------------

def test_comm_cost_examples():
    ledger = CommLedger()
    for r in range(10):
        ledger.record(r, 14, 14 * 4000, 14 * 4000)
    summary = comm_cost(ledger, training_images=1000)
    assert summary.fl_bytes == 1_120_000 == 10 * 14 * 2 * 4000
    assert summary.centralised_bytes == 1000 * 428_571
    assert summary.ratio == 1_120_000 / (1000 * 428_571)
    assert comm_cost(CommLedger(), 10).fl_bytes == 0
    # circa 150 GB spread over 350,000 images
    assert round(150e9 / 350_000) == 428_571 == summary.bytes_per_image
