"""Round orchestration: client sampling, FedAvg / partial-layer rounds and
clustered FL with per-cluster global models."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from ..metrics import ConfusionCounts, confusion
from ..model import ModelParams, TrainConfig, checkpoint_size, predict
from ..synth import derive_seed
from .aggregation import fedavg_aggregate, merge_layers, partial_aggregate
from .client import ClientState, ClientUpdate, local_train
from .comm import CommLedger
from .kmeans import kmeans_fit


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 50
    client_fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    shared_layer_mask: tuple[bool, ...] | None = None   # None: every layer shared
    cluster_count: int = 1
    sampling_seed: int = 0
    warmup_rounds: int = 5
    cluster_seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.cluster_count < 1:
            raise ValueError("cluster_count must be positive")

    def mask_for(self, params: ModelParams) -> tuple[bool, ...]:
        n = len(params.layers)
        if self.shared_layer_mask is None:
            return (True,) * n
        if len(self.shared_layer_mask) != n:
            raise ValueError(f"shared_layer_mask has {len(self.shared_layer_mask)} entries, model has {n} layers")
        return tuple(bool(m) for m in self.shared_layer_mask)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    participants: int
    train_loss: float
    test_accuracy: float
    test_f1: float
    bytes: int

    CSV_HEADER = "round,participants,train_loss,test_accuracy,test_f1,bytes"

    def csv_row(self) -> str:
        return (f"{self.round},{self.participants},{self.train_loss:.17g},"
                f"{self.test_accuracy:.17g},{self.test_f1:.17g},{self.bytes}")


@dataclass
class FLResult:
    global_params: ModelParams
    history: list[RoundRecord]
    ledger: CommLedger
    client_models: dict[int, ModelParams]


@dataclass
class ClusteredResult:
    cluster_params: list[ModelParams]
    assignments: dict[int, int]
    history: list[RoundRecord]
    ledger: CommLedger
    client_models: dict[int, ModelParams]


def write_history_csv(history: Sequence[RoundRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RoundRecord.CSV_HEADER + "\n")
        for rec in history:
            fh.write(rec.csv_row() + "\n")


def sample_clients(all_ids: Sequence[int], fraction: float, round_index: int, seed: int) -> list[int]:
    """ceil(fraction * N) distinct ids drawn with a (seed, round)-keyed generator, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"client fraction must be in (0, 1], got {fraction}")
    ids = sorted(all_ids)
    k = math.ceil(Fraction(repr(fraction)) * len(ids))
    if k >= len(ids):
        return ids
    rng = np.random.default_rng(derive_seed(seed, round_index))
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in picked)


def _train_all(clients: list[ClientState], starts: list[ModelParams], cfg: TrainConfig,
               round_index: int, threads: int) -> list[ClientUpdate]:
    jobs = list(zip(clients, starts))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda j: local_train(j[0], j[1], cfg, round_index), jobs))
    return [local_train(c, s, cfg, round_index) for c, s in jobs]


def evaluate_models(clients: Sequence[ClientState], models: dict[int, ModelParams]) -> ConfusionCounts:
    """Pooled confusion counts, each client scored with its own model."""
    groups: dict[int, tuple[ModelParams, list[ClientState]]] = {}
    for c in clients:
        m = models[c.node_id]
        groups.setdefault(id(m), (m, []))[1].append(c)
    total = ConfusionCounts()
    for m, members in groups.values():
        members = [c for c in members if c.local_test]
        if not members:
            continue
        x = np.concatenate([c.test_arrays[0] for c in members])
        y = np.concatenate([c.test_arrays[1] for c in members])
        total = total + confusion(predict(m, x), y > 0.5)
    return total


def _mean_loss(updates: list[ClientUpdate]) -> float:
    n = sum(u.sample_count for u in updates)
    return sum(u.train_loss * u.sample_count for u in updates) / n


def _record(round_index, updates, counts: ConfusionCounts, nbytes) -> RoundRecord:
    return RoundRecord(round_index, len(updates), _mean_loss(updates),
                       counts.accuracy, counts.f1, nbytes)


def _check_clients(clients: Sequence[ClientState]) -> dict[int, ClientState]:
    if not clients:
        raise ValueError("at least one client is required")
    by_id = {c.node_id: c for c in clients}
    if len(by_id) != len(clients):
        raise ValueError("duplicate client node_id")
    return by_id


def run_round(clients: Sequence[ClientState], global_params: ModelParams, cfg: FLConfig,
              round_index: int, ledger: CommLedger, threads: int = 1):
    """One broadcast -> local training -> aggregation cycle.

    Layers with a false mask entry stay on the clients: each participant starts
    from the shared global layers plus its own private ones, and only the shared
    layers count towards traffic. Returns ``(new_global, updates)``.
    """
    by_id = _check_clients(clients)
    mask = cfg.mask_for(global_params)
    shared_idx = [i for i, m in enumerate(mask) if m]
    nbytes = checkpoint_size([global_params.layer_shapes[i] for i in shared_idx]) if shared_idx else 0
    chosen = [by_id[i] for i in sample_clients(list(by_id), cfg.client_fraction, round_index, cfg.sampling_seed)]
    if all(mask):
        starts = [global_params] * len(chosen)
    else:
        starts = [merge_layers(c.params or global_params, {i: global_params.layers[i] for i in shared_idx})
                  for c in chosen]
    down = len(chosen) * nbytes
    updates = _train_all(chosen, starts, cfg.train, round_index, threads)
    up = len(updates) * nbytes
    ledger.record(round_index, len(updates), up, down)
    if all(mask):
        new_global = fedavg_aggregate(updates)
    else:
        shared, _kept = partial_aggregate(updates, mask)
        new_global = merge_layers(global_params, shared)
    return new_global, updates


def run_fl(clients: Sequence[ClientState], cfg: FLConfig, initial: ModelParams,
           threads: int = 1) -> FLResult:
    """FedAvg (or partial-layer FedAvg when the mask has false entries) for cfg.rounds rounds."""
    by_id = _check_clients(clients)
    mask = cfg.mask_for(initial)
    for c in clients:
        c.params = initial
    ledger = CommLedger()
    history = []
    g = initial
    for r in range(cfg.rounds):
        g, updates = run_round(clients, g, cfg, r, ledger, threads)
        models = _client_models(clients, g, mask)
        history.append(_record(r, updates, evaluate_models(clients, models), ledger.per_round[-1][2]))
    return FLResult(g, history, ledger, _client_models(by_id.values(), g, mask))


def _client_models(clients, g: ModelParams, mask) -> dict[int, ModelParams]:
    if all(mask):
        return {c.node_id: g for c in clients}
    shared = {i: g.layers[i] for i, m in enumerate(mask) if m}
    return {c.node_id: merge_layers(c.params, shared) for c in clients}


def best_cluster(client: ClientState, models: Sequence[ModelParams]) -> int:
    """Index of the model with the best local-test accuracy (lowest index on ties)."""
    if not client.local_test:
        return 0
    x, y = client.test_arrays
    scores = [confusion(predict(m, x), y > 0.5).accuracy for m in models]
    return int(np.argmax(scores))


def run_clustered_fl(clients: Sequence[ClientState], cfg: FLConfig, initial: ModelParams,
                     threads: int = 1) -> ClusteredResult:
    """FedAvg warm-up, one clustering round on the participants' parameter
    vectors, then independent FedAvg per cluster.

    A client first sampled after the clustering round receives every cluster
    model and joins the one scoring best on its local test set.
    """
    by_id = _check_clients(clients)
    if cfg.rounds <= cfg.warmup_rounds:
        res = run_fl(clients, cfg, initial, threads)
        return ClusteredResult([res.global_params], {i: 0 for i in by_id}, res.history,
                               res.ledger, res.client_models)
    for c in clients:
        c.params = initial
    ledger = CommLedger()
    history: list[RoundRecord] = []
    warm_cfg = FLConfig(cfg.rounds, cfg.client_fraction, cfg.train, None, 1, cfg.sampling_seed)
    g = initial
    for r in range(cfg.warmup_rounds):
        g, updates = run_round(clients, g, warm_cfg, r, ledger, threads)
        history.append(_record(r, updates, evaluate_models(clients, {i: g for i in by_id}),
                               ledger.per_round[-1][2]))

    mb = checkpoint_size(initial.layer_shapes)
    assignments: dict[int, int] = {}
    models: list[ModelParams] = [g]
    for r in range(cfg.warmup_rounds, cfg.rounds):
        chosen = [by_id[i] for i in sample_clients(list(by_id), cfg.client_fraction, r, cfg.sampling_seed)]
        down = 0
        if r == cfg.warmup_rounds:
            starts = [g] * len(chosen)
            down = len(chosen) * mb
        else:
            starts = []
            for c in chosen:
                if c.node_id not in assignments:
                    assignments[c.node_id] = best_cluster(c, models)
                    down += len(models) * mb
                else:
                    down += mb
                starts.append(models[assignments[c.node_id]])
        updates = _train_all(chosen, starts, cfg.train, r, threads)
        ledger.record(r, len(updates), len(updates) * mb, down)
        if r == cfg.warmup_rounds:
            k = min(cfg.cluster_count, len(updates))
            ordered = sorted(updates, key=lambda u: u.node_id)
            km = kmeans_fit(np.stack([u.params.flat() for u in ordered]), k, cfg.cluster_seed)
            for u, a in zip(ordered, km.assignments):
                assignments[u.node_id] = int(a)
            models = [fedavg_aggregate([u for u, a in zip(ordered, km.assignments) if a == j])
                      for j in range(k)]
        else:
            for j in range(len(models)):
                members = [u for u in updates if assignments[u.node_id] == j]
                if members:
                    models[j] = fedavg_aggregate(members)
        current = _clustered_view(by_id, assignments, models)
        history.append(_record(r, updates, evaluate_models(clients, current), ledger.per_round[-1][2]))
    return ClusteredResult(models, dict(sorted(assignments.items())), history, ledger,
                           _clustered_view(by_id, assignments, models))


def _clustered_view(by_id, assignments, models) -> dict[int, ModelParams]:
    return {i: models[assignments[i]] if i in assignments else models[best_cluster(c, models)]
            for i, c in by_id.items()}
