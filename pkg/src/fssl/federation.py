"""In-process federated pretraining (FedAvg) and server-side retraining.

Every source of randomness is keyed off the experiment seed plus a
position (round, client, epoch), so client work can run in any order or in
parallel and still reproduce bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._io import atomic_write
from .errors import ArchitectureMismatch, DegenerateLabels, EmptyClientDataset
from .flows import SubflowSet
from .models import (ModelParams, ModelWidths, build_pretrain_model, build_retrain_model, infer_widths,
                     network_for, transfer_backbone)
from .nn import AdamState, adam_step, cross_entropy_with_grad, mse_with_grad

log = logging.getLogger(__name__)

# stream tags for derived random generators
_PRETRAIN, _RETRAIN, _SELECT = 0, 1, 2


@dataclass(frozen=True)
class FederationConfig:
    K: int = 100
    C: float = 0.8
    R: int = 100
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0
    early_stop: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.K < 1 or not 0 <= self.C <= 1 or self.R < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid federation config: {self}")


@dataclass
class RoundRecord:
    round: int
    clients: list
    client_losses: list
    client_sizes: list
    global_loss: float
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def num_selected(K: int, C: float) -> int:
    # the epsilon keeps products such as 0.29 * 100 = 28.999... from losing a client
    return max(math.floor(C * K + 1e-9), 1)


def select_clients(K: int, C: float, round: int, seed: int) -> list[int]:
    """Sorted ids of the ``max(floor(C*K), 1)`` clients taking part in ``round``."""
    m = num_selected(K, C)
    rng = np.random.default_rng([seed, _SELECT, round])
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def batch_order(n: int, seed: int, *position: int) -> np.ndarray:
    return np.random.default_rng([seed, *position]).permutation(n)


def _train_epoch(network, params: dict, state: AdamState, x, y, order, batch_size, loss_fn):
    """One pass of minibatch Adam over ``x[order]``; returns (params, sample-mean loss)."""
    total = 0.0
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        out, caches = network.forward(params, x[idx], logits=True)
        loss, dout = loss_fn(out, y[idx])
        grads = network.backward(params, caches, dout)
        params, state = adam_step(state, params, grads)
        total += loss * len(idx)
    return params, total / len(order)


def client_update(global_params: ModelParams, local_data: SubflowSet, config: FederationConfig,
                  round: int = 1, client_id: int = 0, network=None):
    """Local unsupervised training of a copy of the global model.

    Returns (updated params, number of local examples, last-epoch mean MSE).
    The Adam state starts fresh on every call.
    """
    if len(local_data) == 0:
        raise EmptyClientDataset(f"client {client_id} has no data")
    network = network or network_for(global_params, local_data.values.shape[1])
    params = {k: v.copy() for k, v in global_params.entries.items()}
    state = AdamState(lr=config.lr)
    x, y = local_data.model_inputs, local_data.features
    loss = float("nan")
    for epoch in range(config.local_epochs):
        order = batch_order(len(x), config.seed, _PRETRAIN, round, client_id, epoch)
        params, loss = _train_epoch(network, params, state, x, y, order, config.batch_size, mse_with_grad)
    return ModelParams(global_params.arch, params), len(x), loss


def fedavg_aggregate(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Example-count weighted mean of client parameters.

    The sum runs in the order given (callers pass ascending client ids) and
    accumulates in float64 before casting back to the parameter dtype.
    """
    if not updates:
        raise ValueError("no client updates to aggregate")
    first = updates[0][0]
    for params, _ in updates[1:]:
        if not params.same_layout(first):
            raise ArchitectureMismatch("client updates disagree on architecture")
    total = float(sum(n for _, n in updates))
    out = {}
    for name, ref in first.entries.items():
        acc = np.zeros(ref.shape, np.float64)
        for params, n in updates:
            acc += (n / total) * params.entries[name].astype(np.float64)
        out[name] = acc.astype(ref.dtype)
    return ModelParams(first.arch, out)


def _plateaued(losses: list, window: int = 5, tol: float = 1e-4) -> bool:
    if len(losses) <= window:
        return False
    before, now = losses[-window - 1], losses[-1]
    return before <= 0 or (before - now) / before < tol


def run_pretraining(clients: Sequence[SubflowSet], config: FederationConfig, widths: ModelWidths = ModelWidths(),
                    num_features: Optional[int] = None, log_path=None, initial: Optional[ModelParams] = None):
    """FedAvg over ``config.R`` rounds; returns (final global params, round records)."""
    if len(clients) != config.K:
        raise ValueError(f"config.K={config.K} but {len(clients)} client datasets were given")
    if num_features is None:
        num_features = next(c.features.shape[1] for c in clients if c.features is not None)
    network, global_params = build_pretrain_model(config.seed, num_features, widths)
    if initial is not None:
        global_params = initial.copy()
    records = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for r in range(1, config.R + 1):
            started = time.perf_counter()
            selected = select_clients(config.K, config.C, r, config.seed)

            def work(k):
                return client_update(global_params, clients[k], config, r, k, network)

            results = list(pool.map(work, selected)) if pool else [work(k) for k in selected]
            global_params = fedavg_aggregate([(p, n) for p, n, _ in results])
            sizes = [n for _, n, _ in results]
            losses = [loss for _, _, loss in results]
            proxy = float(np.dot(sizes, losses) / sum(sizes))
            rec = RoundRecord(r, selected, losses, sizes, proxy, time.perf_counter() - started)
            records.append(rec)
            log.info("round %d: %d clients, loss %.6f", r, len(selected), proxy)
            if config.early_stop and _plateaued([x.global_loss for x in records]):
                log.info("loss plateaued after round %d", r)
                break
    finally:
        if pool:
            pool.shutdown()
    if log_path is not None:
        write_round_log(records, log_path)
    return global_params, records


def train_centralized(data: SubflowSet, config: FederationConfig, widths: ModelWidths = ModelWidths(),
                      num_features: Optional[int] = None):
    """Pretrain on pooled unlabelled data for ``R * local_epochs`` epochs.

    Adam restarts every ``local_epochs`` epochs and the batch order follows
    the single-client federated schedule, so with K=1, C=1 this reproduces
    :func:`run_pretraining` exactly.
    """
    if len(data) == 0:
        raise EmptyClientDataset("no pooled pretraining data")
    network, params = build_pretrain_model(config.seed, num_features or data.features.shape[1], widths)
    entries = params.entries
    x, y = data.model_inputs, data.features
    losses = []
    for r in range(1, config.R + 1):
        state = AdamState(lr=config.lr)
        for epoch in range(config.local_epochs):
            order = batch_order(len(x), config.seed, _PRETRAIN, r, 0, epoch)
            entries, loss = _train_epoch(network, entries, state, x, y, order, config.batch_size, mse_with_grad)
        losses.append(loss)
        log.info("centralized block %d: loss %.6f", r, loss)
    return ModelParams(params.arch, entries), losses


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0


def retrain_server(pretrain_params: ModelParams, server_train: SubflowSet, config: RetrainConfig,
                   num_classes: Optional[int] = None, widths: Optional[ModelWidths] = None):
    """Copy the pretrained backbone into a fresh classifier and fit it on labelled subflows.

    Returns (classifier params, per-epoch mean cross-entropy).
    """
    labels = server_train.labels
    if len(server_train) == 0 or len(np.unique(labels)) < 2:
        raise DegenerateLabels("retraining needs labelled examples from at least two classes")
    if np.any(labels < 0):
        raise DegenerateLabels("retraining set contains unlabelled subflows")
    num_classes = num_classes or int(labels.max()) + 1
    if widths is None:
        widths = infer_widths(pretrain_params, server_train.values.shape[1])
    network, params = build_retrain_model(config.seed, num_classes, widths)
    params = transfer_backbone(pretrain_params, params)
    entries = params.entries
    state = AdamState(lr=config.lr)
    x = server_train.model_inputs
    history = []
    for epoch in range(config.epochs):
        order = batch_order(len(x), config.seed, _RETRAIN, epoch)
        entries, loss = _train_epoch(network, entries, state, x, labels, order, config.batch_size,
                                     cross_entropy_with_grad)
        history.append(loss)
    return ModelParams(params.arch, entries), history


def write_round_log(records: Sequence[RoundRecord], path) -> None:
    with atomic_write(path) as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_round_log(path) -> list[RoundRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RoundRecord(**json.loads(line)) for line in fh if line.strip()]
