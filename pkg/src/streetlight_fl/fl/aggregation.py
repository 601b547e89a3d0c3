"""Sample-weighted FedAvg and its layer-masked variant."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..model import ModelParams
from .client import ClientUpdate


class AggregationError(ValueError):
    pass


def _weighted_mean(arrays: list[np.ndarray], weights: list[float]) -> np.ndarray:
    # centred on the first array: identical inputs come back bit-exact,
    # and the result is clipped to the coordinate-wise input range
    ref = arrays[0]
    acc = np.zeros_like(ref)
    for a, w in zip(arrays[1:], weights[1:]):
        acc += w * (a - ref)
    out = ref + acc
    lo, hi = ref.copy(), ref.copy()
    for a in arrays[1:]:
        np.minimum(lo, a, out=lo)
        np.maximum(hi, a, out=hi)
    return np.minimum(np.maximum(out, lo), hi)


def _prepare(updates: Sequence[ClientUpdate]) -> tuple[list[ClientUpdate], list[float]]:
    if not updates:
        raise AggregationError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.node_id)
    first = ordered[0].params
    for u in ordered[1:]:
        if not u.params.same_shape(first):
            raise AggregationError(f"update from node {u.node_id} has a different shape")
    total = sum(u.sample_count for u in ordered)
    if total <= 0:
        raise AggregationError("total sample weight is zero")
    return ordered, [u.sample_count / total for u in ordered]


def _average_layer(ordered, weights, i):
    ws = [u.params.layers[i][0] for u in ordered]
    bs = [u.params.layers[i][1] for u in ordered]
    return _weighted_mean(ws, weights), _weighted_mean(bs, weights)


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Weighted mean with weights n_k / sum(n), reduced in ascending node_id order."""
    ordered, weights = _prepare(updates)
    if len(ordered) == 1:
        return ordered[0].params
    n_layers = len(ordered[0].params.layers)
    return ordered[0].params.with_layers(_average_layer(ordered, weights, i) for i in range(n_layers))


def partial_aggregate(updates: Sequence[ClientUpdate], mask: Sequence[bool]):
    """Average only the layers where ``mask`` is true.

    Returns ``(shared, kept)``: ``shared`` maps layer index to the averaged
    (weights, bias); ``kept`` maps node_id to that client's own non-shared layers.
    """
    ordered, weights = _prepare(updates)
    n_layers = len(ordered[0].params.layers)
    if len(mask) != n_layers:
        raise AggregationError(f"mask has {len(mask)} entries for {n_layers} layers")
    shared = {}
    for i in range(n_layers):
        if mask[i]:
            if len(ordered) == 1:
                shared[i] = ordered[0].params.layers[i]
            else:
                shared[i] = _average_layer(ordered, weights, i)
    kept = {u.node_id: {i: u.params.layers[i] for i in range(n_layers) if not mask[i]}
            for u in ordered}
    return shared, kept


def merge_layers(base: ModelParams, layers: dict[int, tuple[np.ndarray, np.ndarray]]) -> ModelParams:
    return base.with_layers(layers.get(i, base.layers[i]) for i in range(len(base.layers)))
