from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..model import ModelParams, TrainConfig, backward_arrays, sgd_step, stack_batch
from ..synth import Sample, derive_seed


@dataclass(eq=False)
class ClientState:
    node_id: int
    local_train: list[Sample]
    local_test: list[Sample] = field(default_factory=list)
    params: ModelParams | None = None

    @cached_property
    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return stack_batch(self.local_train)

    @cached_property
    def test_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return stack_batch(self.local_test)


@dataclass
class ClientUpdate:
    node_id: int
    params: ModelParams
    sample_count: int
    train_loss: float = float("nan")


def epoch_order(node_id: int, n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; keyed on (seed, node, global epoch index)."""
    return np.random.default_rng(derive_seed(shuffle_seed, node_id, epoch)).permutation(n)


def sgd_epochs(params: ModelParams, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               node_id: int, first_epoch: int, epochs: int) -> tuple[ModelParams, float]:
    """Mini-batch SGD for ``epochs`` epochs; returns params and mean batch loss."""
    n = x.shape[0]
    losses = []
    for e in range(epochs):
        order = epoch_order(node_id, n, cfg.shuffle_seed, first_epoch + e)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grad, loss = backward_arrays(params, x[idx], y[idx])
            params = sgd_step(params, grad, cfg.learning_rate)
            losses.append(loss)
    return params, (float(np.mean(losses)) if losses else float("nan"))


def local_train(client: ClientState, global_params: ModelParams, cfg: TrainConfig,
                round_index: int = 0) -> ClientUpdate:
    """Train from ``global_params`` on the client's own data.

    Epoch ``e`` of round ``r`` uses shuffle key ``r * local_epochs + e`` so that
    a lone client over R rounds follows the same trajectory as R * E epochs of
    plain SGD.
    """
    if not client.local_train:
        raise ValueError(f"client {client.node_id} has no training data")
    x, y = client.train_arrays
    params, loss = sgd_epochs(global_params, x, y, cfg, client.node_id,
                              round_index * cfg.local_epochs, cfg.local_epochs)
    client.params = params
    return ClientUpdate(client.node_id, params, len(client.local_train), loss)
