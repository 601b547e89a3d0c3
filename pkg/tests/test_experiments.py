import json
import math
from dataclasses import replace

import numpy as np
import pytest

from streetlight_fl import experiments as ex
from streetlight_fl import synth
from streetlight_fl.fl import ClientState, FLConfig, run_fl
from streetlight_fl.model import TrainConfig
from streetlight_fl.synth import SplitConfig


@pytest.fixture(scope="module")
def fleet():
    profiles = synth.default_fleet(3, 3, 2, 2, samples_per_node=20)
    return ex.build_fleet(profiles, SplitConfig(0.2, 3))


def small_settings(**kw):
    fl = FLConfig(rounds=3, client_fraction=0.5, warmup_rounds=1,
                  train=TrainConfig(learning_rate=0.02, batch_size=8, local_epochs=2, init_seed=1, shuffle_seed=2))
    base = dict(hidden=3, fl=fl, baseline_epochs=4)
    base.update(kw)
    return ex.RunSettings(**base)


class AccessLog(list):
    """List that records which worker touched which node's samples."""
    current = None
    reads: list = []

    def __iter__(self):
        for s in super().__iter__():
            AccessLog.reads.append((AccessLog.current, s.node_id))
            yield s

    def __getitem__(self, i):
        item = super().__getitem__(i)
        for s in (item if isinstance(item, list) else [item]):
            AccessLog.reads.append((AccessLog.current, s.node_id))
        return item


def test_personalised_isolation(fleet):
    logged = ex.SplitFleet(fleet.profiles, {n: (AccessLog(tr), te) for n, (tr, te) in fleet.splits.items()})
    AccessLog.reads = []

    def trainer(client, initial, s):
        AccessLog.current = client.node_id
        try:
            return ex.train_node(client, initial, s)
        finally:
            AccessLog.current = None

    models, report = ex.run_personalised(logged, small_settings(), trainer=trainer)
    during = [(w, n) for w, n in AccessLog.reads if w is not None]
    assert during and all(w == n for w, n in during)
    assert {w for w, _ in during} == set(fleet.splits)
    assert report.model_count == len(models) == len(fleet.splits)


def test_personalised_empty_split_error(fleet):
    nid = next(iter(fleet.splits))
    broken = dict(fleet.splits)
    broken[nid] = ([], fleet.splits[nid][1])
    with pytest.raises(ValueError, match=str(nid)):
        ex.run_personalised(ex.SplitFleet(fleet.profiles, broken), small_settings())


def test_centralised_equals_single_client_fl(fleet):
    s = small_settings(baseline_epochs=3)
    params, report = ex.run_centralised(fleet, s)
    pooled = [x for _, (tr, _) in sorted(fleet.splits.items()) for x in tr]
    cfg = replace(s.fl, rounds=3, client_fraction=1.0, train=replace(s.fl.train, local_epochs=1))
    res = run_fl([ClientState(ex.POOLED_NODE_ID, pooled)], cfg, ex._initial(fleet, s))
    assert res.global_params.equal(params)
    assert report.model_count == 1
    with pytest.raises(ValueError):
        ex.run_centralised(ex.SplitFleet(fleet.profiles, {}), s)


@pytest.mark.parametrize("method", ex.METHODS)
def test_groups_decompose_and_faults(fleet, method):
    _, report = ex.run_method(method, fleet, small_settings())
    g = report.groups
    assert g["normal"].counts + g["edge"].counts == g["all"].counts
    assert g["all"].counts.total == report.test_samples
    # labels equal the schedule on synthetic data, so faults are misclassifications
    for r in g.values():
        assert r.faults == r.counts.fp + r.counts.fn


def test_per_node_counts_sum(fleet):
    models, report = ex.run_personalised(fleet, small_settings())
    per = ex.score_nodes(fleet, models)
    total = sum((c for c, _ in per.values()), ex.ConfusionCounts())
    assert total == report.groups["all"].counts


def test_unknown_method(fleet):
    with pytest.raises(ValueError, match="unknown method"):
        ex.run_method("swarm", fleet, small_settings())


def test_report_bytes_deterministic_and_roundtrip(fleet, tmp_path):
    paths = []
    for i in range(2):
        _, report = ex.run_method("fl", fleet, small_settings(), {"k": 1})
        paths.append(tmp_path / f"r{i}.json")
        ex.write_report(report, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    back = ex.read_report(paths[0])
    assert back == json.loads(ex.canonical_json(report.as_dict()))
    assert back["groups"]["all"]["accuracy"] == report.groups["all"].counts.accuracy
    assert b"\r" not in paths[0].read_bytes()


def test_threads_do_not_change_reports(fleet):
    for method in ("personalised", "fl", "clustered"):
        a = ex.canonical_json(ex.run_method(method, fleet, small_settings(threads=1))[1].as_dict())
        b = ex.canonical_json(ex.run_method(method, fleet, small_settings(threads=4))[1].as_dict())
        assert a == b, method


def test_canonical_json_format():
    text = ex.canonical_json({"b": 1.0, "a": [0.1, 2], "c": {"z": True, "y": None}, "d": 1e-20})
    assert text == ('{\n  "a": [\n    0.10000000000000001,\n    2\n  ],\n  "b": 1.0,\n'
                    '  "c": {\n    "y": null,\n    "z": true\n  },\n  "d": 9.9999999999999995e-21\n}\n')
    with pytest.raises(ValueError):
        ex.canonical_json({"x": math.nan})
    with pytest.raises(TypeError):
        ex.canonical_json({"x": object()})
    assert json.loads(ex.canonical_json({"v": np.float64(0.5), "n": np.int64(3)})) == {"v": 0.5, "n": 3}


def test_error_rate_echo_in_report():
    c = ex.ConfusionCounts(tp=5000, fp=100, tn=4825, fn=75)
    g = ex.GroupResult(c, 0, 1, c.accuracy, c.f1).as_dict()
    assert g["accuracy"] == 0.9825 and round(100 * g["error_rate"], 2) == 1.75
    assert json.loads(ex.canonical_json(g))["error_rate"] == pytest.approx(0.0175, abs=1e-15)


def test_partial_report_counts_private_models(fleet):
    _, report = ex.run_method("partial", fleet, small_settings())
    assert report.extra["shared_layer_mask"] == [True, False]
    assert report.model_count == len(fleet.splits)
    _, full = ex.run_method("fl", fleet, small_settings())
    assert report.comm.fl_bytes < full.comm.fl_bytes


def test_population_accuracy_and_fleet():
    profiles, pop = synth.two_population_fleet(0, 2, samples_per_node=20)
    f = ex.build_fleet(profiles, SplitConfig(0.2, 0))
    _, _, res = ex.run_federated(f, small_settings(), "fl")
    acc = ex.population_accuracy(f, res.client_models, pop)
    assert set(acc) == {0, 1} and all(0.0 <= v <= 1.0 for v in acc.values())
