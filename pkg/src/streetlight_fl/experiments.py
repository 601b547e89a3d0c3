"""The training regimes compared in the experiment matrix, per-group scoring
and canonical JSON reports."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from . import imaging
from .fl import (
    ClientState,
    CommLedger,
    FLConfig,
    comm_cost,
    run_clustered_fl,
    run_fl,
    sgd_epochs,
    write_history_csv,
)
from .fl.comm import DEFAULT_BYTES_PER_IMAGE, CommSummary
from .metrics import ConfusionCounts, confusion
from .model import ModelParams, TrainConfig, init_params, predict, save_params
from .synth import NodeProfile, NodeType, Sample, SplitConfig, expected_state, generate_dataset, split_dataset

METHODS = ("personalised", "centralised", "fl", "clustered", "partial")
COMPARE_METHODS = ("personalised", "centralised", "fl")
GROUPS = ("normal", "edge", "all")
POOLED_NODE_ID = 0


@dataclass
class SplitFleet:
    profiles: list[NodeProfile]
    splits: dict[int, tuple[list[Sample], list[Sample]]]

    @property
    def node_types(self) -> dict[int, NodeType]:
        return {p.node_id: p.node_type for p in self.profiles}

    @property
    def n_features(self) -> int:
        train, _ = next(iter(self.splits.values()))
        return train[0].features.shape[0]

    @property
    def training_images(self) -> int:
        return sum(len(tr) for tr, _ in self.splits.values())

    def clients(self) -> list[ClientState]:
        return [ClientState(nid, tr, te) for nid, (tr, te) in sorted(self.splits.items())]


def build_fleet(profiles: list[NodeProfile], split: SplitConfig = SplitConfig(),
                crop_side: int | None = None, green: bool = False, threads: int = 1) -> SplitFleet:
    featurize = partial(imaging.preprocess, crop_side=crop_side, green=green)
    data = generate_dataset(profiles, featurize, threads=threads)
    return SplitFleet(list(profiles), split_dataset(data, split))


def default_fl_config() -> FLConfig:
    """Benchmark federation: 7 of 140 nodes per round, long local passes.

    Few participants keep model traffic well under the raw-upload cost; the
    20 local epochs make up for the small number of aggregation steps.
    """
    return FLConfig(rounds=50, client_fraction=0.05,
                    train=TrainConfig(learning_rate=0.02, batch_size=32, local_epochs=20))


@dataclass(frozen=True)
class RunSettings:
    hidden: int = 4
    residual: bool = False
    fl: FLConfig = field(default_factory=default_fl_config)
    bytes_per_image: int = DEFAULT_BYTES_PER_IMAGE
    threads: int = 1
    baseline_epochs: int | None = 200   # None: rounds * local_epochs
    positive_on: bool = True            # F1 positive class

    @property
    def epochs(self) -> int:
        """Epoch budget for the centralised and personalised baselines."""
        if self.baseline_epochs is not None:
            return self.baseline_epochs
        return self.fl.rounds * self.fl.train.local_epochs


@dataclass
class GroupResult:
    counts: ConfusionCounts
    faults: int
    nodes: int
    node_mean_accuracy: float
    node_mean_f1: float
    positive_on: bool = True

    def as_dict(self) -> dict:
        c = self.counts
        return {
            "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn, "total": c.total,
            "accuracy": c.accuracy, "error_rate": c.error_rate, "f1": c.f1_for(self.positive_on),
            "faults": self.faults, "nodes": self.nodes,
            "node_mean_accuracy": self.node_mean_accuracy, "node_mean_f1": self.node_mean_f1,
        }


@dataclass
class RunReport:
    method: str
    groups: dict[str, GroupResult]
    model_count: int
    comm: CommSummary
    config: dict
    seeds: dict
    training_samples: int
    test_samples: int
    history_csv: str | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "groups": {k: v.as_dict() for k, v in self.groups.items()},
            "model_count": self.model_count,
            "comm": self.comm.as_dict(),
            "config": self.config,
            "seeds": self.seeds,
            "training_samples": self.training_samples,
            "test_samples": self.test_samples,
            "history_csv": self.history_csv,
            "extra": self.extra,
        }


# -- scoring -----------------------------------------------------------------

def score_nodes(fleet: SplitFleet, models: dict[int, ModelParams]) -> dict[int, tuple[ConfusionCounts, int]]:
    """Per-node confusion counts and schedule-fault counts on the test split."""
    profiles = {p.node_id: p for p in fleet.profiles}
    out = {}
    for nid, (_, test) in sorted(fleet.splits.items()):
        x = np.stack([s.features for s in test])
        labels = np.array([s.label for s in test], dtype=bool)
        pred = predict(models[nid], x)
        expected = np.array([expected_state(s.timestamp_minute, profiles[nid]) for s in test], dtype=bool)
        out[nid] = (confusion(pred, labels), int(np.sum(pred != expected)))
    return out


def group_results(fleet: SplitFleet, per_node: dict[int, tuple[ConfusionCounts, int]],
                  positive_on: bool = True) -> dict[str, GroupResult]:
    """Pooled counts per group plus the unweighted mean over the group's nodes."""
    types = fleet.node_types
    members = {
        "normal": [n for n in per_node if types[n] in (NodeType.TYPE0, NodeType.TYPE1)],
        "edge": [n for n in per_node if types[n] == NodeType.TYPE2],
        "all": list(per_node),
    }
    out = {}
    for g in GROUPS:
        ids = members[g]
        counts = sum((per_node[n][0] for n in ids), ConfusionCounts())
        out[g] = GroupResult(
            counts, sum(per_node[n][1] for n in ids), len(ids),
            float(np.mean([per_node[n][0].accuracy for n in ids])) if ids else 0.0,
            float(np.mean([per_node[n][0].f1_for(positive_on) for n in ids])) if ids else 0.0,
            positive_on)
    return out


# -- regimes -----------------------------------------------------------------

def _initial(fleet: SplitFleet, s: RunSettings) -> ModelParams:
    return init_params([fleet.n_features, s.hidden, 1], s.fl.train.init_seed, s.residual)


def _report(method, fleet, s, models, model_count, ledger: CommLedger, config, history_csv=None, extra=None):
    per_node = score_nodes(fleet, models)
    return RunReport(
        method=method,
        groups=group_results(fleet, per_node, s.positive_on),
        model_count=model_count,
        comm=comm_cost(ledger, fleet.training_images, s.bytes_per_image),
        config=config or {},
        seeds={"init": s.fl.train.init_seed, "shuffle": s.fl.train.shuffle_seed,
               "sampling": s.fl.sampling_seed, "cluster": s.fl.cluster_seed},
        training_samples=fleet.training_images,
        test_samples=sum(len(te) for _, te in fleet.splits.values()),
        history_csv=history_csv,
        extra=extra or {},
    )


def run_centralised(fleet: SplitFleet, s: RunSettings, config: dict | None = None):
    """Pool every node's training data and fit one model."""
    if not fleet.splits or fleet.training_images == 0:
        raise ValueError("dataset is empty")
    pooled = ClientState(POOLED_NODE_ID, [x for _, (tr, _) in sorted(fleet.splits.items()) for x in tr])
    x, y = pooled.train_arrays
    params, _ = sgd_epochs(_initial(fleet, s), x, y, s.fl.train, POOLED_NODE_ID, 0, s.epochs)
    del pooled
    models = {nid: params for nid in fleet.splits}
    return params, _report("centralised", fleet, s, models, 1, CommLedger(), config)


def train_node(client: ClientState, initial: ModelParams, s: RunSettings) -> ModelParams:
    x, y = client.train_arrays
    params, _ = sgd_epochs(initial, x, y, s.fl.train, client.node_id, 0, s.epochs)
    return params


def run_personalised(fleet: SplitFleet, s: RunSettings, config: dict | None = None,
                     trainer: Callable[[ClientState, ModelParams, RunSettings], ModelParams] | None = None):
    """One model per node, trained and scored only on that node's data."""
    trainer = trainer or train_node
    clients = fleet.clients()
    for c in clients:
        if not c.local_train or not c.local_test:
            raise ValueError(f"node {c.node_id} has an empty train or test split")
    initial = _initial(fleet, s)
    if s.threads > 1:
        with ThreadPoolExecutor(s.threads) as pool:
            trained = list(pool.map(lambda c: trainer(c, initial, s), clients))
    else:
        trained = [trainer(c, initial, s) for c in clients]
    models = {c.node_id: m for c, m in zip(clients, trained)}
    return models, _report("personalised", fleet, s, models, len(models), CommLedger(), config)


def default_partial_mask(params: ModelParams) -> tuple[bool, ...]:
    """Everything shared except the output layer."""
    return tuple(i != 1 for i in range(len(params.layers)))


def run_federated(fleet: SplitFleet, s: RunSettings, method: str = "fl", config: dict | None = None,
                  history_csv: str | None = None):
    initial = _initial(fleet, s)
    clients = fleet.clients()
    fl_cfg = s.fl
    if method == "partial" and fl_cfg.shared_layer_mask is None:
        fl_cfg = _replace_mask(fl_cfg, default_partial_mask(initial))
    elif method == "fl":
        fl_cfg = _replace_mask(fl_cfg, None)
    if method == "clustered":
        res = run_clustered_fl(clients, fl_cfg, initial, s.threads)
        models, count = res.cluster_params, len(res.cluster_params)
        extra = {"assignments": {str(k): v for k, v in res.assignments.items()}}
    else:
        res = run_fl(clients, fl_cfg, initial, s.threads)
        models = res.global_params
        count = 1 if all(fl_cfg.mask_for(initial)) else len(clients)
        extra = {"shared_layer_mask": [bool(m) for m in fl_cfg.mask_for(initial)]}
    if history_csv:
        write_history_csv(res.history, history_csv)
    extra["final_round_accuracy"] = res.history[-1].test_accuracy
    # reports name the history file relative to themselves so output dirs can move
    name = Path(history_csv).name if history_csv else None
    report = _report(method, fleet, s, res.client_models, count, res.ledger, config, name, extra)
    return models, report, res


def _replace_mask(cfg: FLConfig, mask) -> FLConfig:
    from dataclasses import replace

    return replace(cfg, shared_layer_mask=mask)


def run_method(method: str, fleet: SplitFleet, s: RunSettings, config: dict | None = None,
               history_csv: str | None = None):
    """Returns (models, report); models is one ModelParams, a list, or a per-node dict."""
    if method == "personalised":
        return run_personalised(fleet, s, config)
    if method == "centralised":
        return run_centralised(fleet, s, config)
    if method in ("fl", "clustered", "partial"):
        models, report, _ = run_federated(fleet, s, method, config, history_csv)
        return models, report
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def population_accuracy(fleet: SplitFleet, models: dict[int, ModelParams],
                        population: dict[int, int]) -> dict[int, float]:
    """Pooled test accuracy per population label."""
    per_node = score_nodes(fleet, models)
    out = {}
    for pop in sorted(set(population.values())):
        counts = sum((per_node[n][0] for n in per_node if population[n] == pop), ConfusionCounts())
        out[pop] = counts.accuracy
    return out


def clustered_vs_global(fleet: SplitFleet, population: dict[int, int], s: RunSettings, k: int = 2):
    """Paired run: one global FedAvg model vs k-cluster FL from the same seeds.

    Returns (global accuracy by population, clustered accuracy by population).
    """
    from dataclasses import replace

    _, _, flat = run_federated(fleet, replace(s, fl=replace(s.fl, cluster_count=1)), "fl")
    _, _, clus = run_federated(fleet, replace(s, fl=replace(s.fl, cluster_count=k)), "clustered")
    return (population_accuracy(fleet, flat.client_models, population),
            population_accuracy(fleet, clus.client_models, population))


def save_models(models, out_dir) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(models, ModelParams):
        items = [("model.flsl", models)]
    elif isinstance(models, dict):
        items = [(f"node_{nid:04d}.flsl", m) for nid, m in sorted(models.items())]
    else:
        items = [(f"cluster_{i}.flsl", m) for i, m in enumerate(models)]
    paths = []
    for name, m in items:
        save_params(m, out_dir / name)
        paths.append(str(out_dir / name))
    return paths


# -- canonical JSON ----------------------------------------------------------

def _encode(value, indent: int) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v} cannot be written to a report")
        text = format(v, ".17g")
        return text if any(ch in text for ch in ".en") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = sorted((str(k), v) for k, v in value.items())
        body = ",\n".join(f"{inner}{json.dumps(k)}: {_encode(v, indent + 1)}" for k, v in items)
        return "{\n" + body + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        body = ",\n".join(inner + _encode(v, indent + 1) for v in value)
        return "[\n" + body + "\n" + pad + "]"
    raise TypeError(f"cannot encode {type(value).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, 17 significant digits for floats, LF line endings."""
    return _encode(obj, 0) + "\n"


def write_report(report: RunReport | dict, path) -> None:
    data = report.as_dict() if isinstance(report, RunReport) else report
    Path(path).write_bytes(canonical_json(data).encode("utf-8"))


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
