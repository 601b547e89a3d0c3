"""Federated orchestration: local training, aggregation, clustering, byte accounting."""
from .aggregation import AggregationError, fedavg_aggregate, merge_layers, partial_aggregate
from .client import ClientState, ClientUpdate, local_train, sgd_epochs
from .comm import DEFAULT_BYTES_PER_IMAGE, CommLedger, CommSummary, comm_cost
from .kmeans import KMeansResult, kmeans_fit
from .rounds import (
    ClusteredResult,
    FLConfig,
    FLResult,
    RoundRecord,
    best_cluster,
    evaluate_models,
    run_clustered_fl,
    run_fl,
    run_round,
    sample_clients,
    write_history_csv,
)

__all__ = [
    "AggregationError", "ClientState", "ClientUpdate", "ClusteredResult", "CommLedger",
    "CommSummary", "DEFAULT_BYTES_PER_IMAGE", "FLConfig", "FLResult", "KMeansResult",
    "RoundRecord", "best_cluster", "comm_cost", "evaluate_models", "fedavg_aggregate",
    "kmeans_fit", "local_train", "merge_layers", "partial_aggregate", "run_clustered_fl",
    "run_fl", "run_round", "sample_clients", "sgd_epochs", "write_history_csv",
]
