"""Federated class-incremental protocol: clients, FedAvg rounds and replay buffers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gdr
from .config import ExperimentConfig
from .data import Dataset
from .nn import (Model, ModelError, batch_ce_loss, features, loss_and_grads,
                 sgd_step, tts_loss)

log = logging.getLogger(__name__)

INITIAL = "Initial"
INCREMENTAL = "Incremental"


def derive_seed(seed: int, *keys) -> int:
    """Stable integer seed for a named sub-stream of ``seed``."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode())
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class BufferEntry:
    index: int  # dataset index of the stored sample
    class_id: int
    weight: float = 1.0
    score: float = 0.0


@dataclass
class ClientState:
    client_id: int
    task_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    buffer: dict[int, list[BufferEntry]] = field(default_factory=dict)
    rng_seed: int = 0

    def buffer_entries(self) -> list[BufferEntry]:
        return [e for t in sorted(self.buffer) for e in self.buffer[t]]

    @property
    def buffer_size(self) -> int:
        return sum(len(v) for v in self.buffer.values())


@dataclass
class RoundReport:
    task_id: int
    round: int
    client_counts: list[int]
    checksum: str
    train_loss: float
    start_checksums: list[str] = field(default_factory=list)


@dataclass
class LocalResult:
    model: Model
    count: int
    epoch_losses: list[float]

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.epoch_losses)) if self.epoch_losses else float("nan")


def training_set(client: ClientState, dataset: Dataset):
    """Current-task indices followed by buffered ones, with old-sample flags and weights."""
    buf = client.buffer_entries()
    idx = np.concatenate([client.task_indices, np.array([e.index for e in buf], dtype=np.int64)])
    is_old = np.concatenate([np.zeros(len(client.task_indices), bool), np.ones(len(buf), bool)])
    weight = np.concatenate([np.ones(len(client.task_indices)), np.array([e.weight for e in buf])])
    return idx.astype(np.int64), is_old, weight


def local_train(client: ClientState, model: Model, stage: str, config: ExperimentConfig,
                dataset: Dataset, rng_seed: int, use_tts: bool = True) -> LocalResult:
    """E epochs of minibatch SGD over the client's current shard plus its buffer.

    The initial stage uses plain cross-entropy; the incremental stage uses the
    temperature-scaled loss (when ``use_tts``) with buffered samples as the old
    group.
    """
    idx, is_old, weight = training_set(client, dataset)
    if len(idx) == 0:
        log.warning("client %d has no training data; skipped", client.client_id)
        return LocalResult(model.copy(), 0, [])
    labels = model.label_index(dataset.y[idx])
    if not config.use_leverage_weights:
        weight = None
    rng = np.random.default_rng(rng_seed)
    tts = stage == INCREMENTAL and use_tts
    boundary = model.boundary
    epoch_losses = []
    for _ in range(config.local_epochs):
        order = rng.permutation(len(idx))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            sw = None if weight is None else weight[b]
            if tts:
                fn = lambda z, b=b, sw=sw: tts_loss(z, labels[b], is_old[b], config.tts,
                                                    boundary, sample_weight=sw)
            else:
                fn = lambda z, b=b, sw=sw: batch_ce_loss(z, labels[b], sw)
            loss, grads = loss_and_grads(model, dataset.X[idx[b]], fn)
            model = sgd_step(model, grads, config.lr, config.weight_decay)
            total += loss * len(b)
        epoch_losses.append(total / len(idx))
    if not epoch_losses:
        model = model.copy()
    return LocalResult(model, len(idx), epoch_losses)


def fedavg(models: list[Model], counts: list[int]) -> Model:
    """Sample-count-weighted parameter average."""
    if not models or len(models) != len(counts):
        raise ModelError("need one positive count per model")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ModelError("sample counts must be positive")
    ref = models[0]
    for m in models[1:]:
        if m.class_order != ref.class_order or [p.shape for p in m.params()] != [p.shape for p in ref.params()]:
            raise ModelError("client models have different architectures")
    if len(models) == 1:
        return ref.copy()
    w = counts / counts.sum()
    avg = [sum(wi * m.params()[j] for wi, m in zip(w, models)) for j in range(len(ref.params()))]
    return ref.with_params(avg)


def run_task(task_id: int, model: Model, clients: list[ClientState], config: ExperimentConfig,
             dataset: Dataset, seed: int, use_tts: bool = True,
             on_round: Callable[[RoundReport, Model], None] | None = None):
    """T rounds of broadcast, local training on every client and FedAvg."""
    stage = INITIAL if task_id == 0 else INCREMENTAL
    reports = []
    for rnd in range(config.rounds_per_task):
        results, starts = [], []
        for c in clients:
            local = model.copy()
            starts.append(local.checksum())
            res = local_train(c, local, stage, config, dataset,
                              derive_seed(seed, "train", c.client_id, task_id, rnd), use_tts)
            if res.count:
                results.append(res)
        if results:
            model = fedavg([r.model for r in results], [r.count for r in results])
        losses = [r.mean_loss for r in results if r.epoch_losses]
        counts = [r.count for r in results]
        loss = float(np.average(losses, weights=[r.count for r in results if r.epoch_losses])) if losses else float("nan")
        report = RoundReport(task_id, rnd, counts, model.checksum(), loss, starts)
        reports.append(report)
        if on_round is not None:
            on_round(report, model)
    return model, reports


def _random_replay(clients: list[ClientState], dataset: Dataset, task_id: int,
                   per_task: int, seed: int) -> None:
    share = math.ceil(per_task / len(clients)) if clients else 0
    for c in clients:
        rng = np.random.default_rng(derive_seed(seed, "local-replay", c.client_id, task_id))
        k = min(share, len(c.task_indices))
        picks = np.sort(rng.choice(len(c.task_indices), size=k, replace=False))
        c.buffer[task_id] = [BufferEntry(int(c.task_indices[i]), int(dataset.y[c.task_indices[i]]))
                             for i in picks]


def _gdr_replay(model: Model, clients: list[ClientState], dataset: Dataset, task_id: int,
                config: ExperimentConfig, seed: int) -> list[dict]:
    live = [c for c in clients if len(c.task_indices)]
    feats = {c.client_id: features(model, dataset.X[c.task_indices]) for c in live}
    labels = {c.client_id: dataset.y[c.task_indices] for c in live}
    client_seeds = {c.client_id: derive_seed(c.rng_seed, "row-mask", task_id) for c in live}
    selection, decoded, _, _ = gdr.select_replay(
        feats, labels, config.per_task_buffer, task_id,
        derive_seed(seed, "gdr", task_id), client_seeds,
        kind=config.mask_kind, truncate_rank=config.truncate_rank)
    records = []
    by_client = selection.by_client()
    for c in live:
        entries = []
        for sel, local in zip(by_client.get(c.client_id, []), decoded.get(c.client_id, [])):
            ds_index = int(c.task_indices[local])
            entries.append(BufferEntry(ds_index, sel.class_id, sel.weight, sel.score))
            records.append({"task": task_id, "client": c.client_id, "local_index": int(local),
                            "class": sel.class_id, "score": sel.score,
                            "probability": sel.probability, "weight": sel.weight})
        c.buffer[task_id] = entries
    for c in clients:
        c.buffer.setdefault(task_id, [])
    return records


def shrink_buffers(clients: list[ClientState], budget: int, by_leverage: bool, seed: int) -> None:
    """Cap every past task at ``budget // num_tasks`` entries summed over clients.

    Leverage-selected buffers keep a class-balanced set of their highest
    scoring entries; random buffers keep a seeded random subset.
    """
    tasks = sorted({t for c in clients for t in c.buffer})
    total = sum(c.buffer_size for c in clients)
    if not tasks or total <= budget:
        return
    cap = budget // len(tasks)
    for t in tasks:
        pool = [(c.client_id, i, e) for c in clients for i, e in enumerate(c.buffer.get(t, []))]
        if len(pool) <= cap:
            continue
        if by_leverage:
            classes = sorted({e.class_id for _, _, e in pool})
            avail = {k: sum(1 for _, _, e in pool if e.class_id == k) for k in classes}
            prio = {k: sum(e.score for _, _, e in pool if e.class_id == k) for k in classes}
            quotas = gdr.class_quotas(cap, avail, prio)
            keep = []
            for k in classes:
                members = sorted((p for p in pool if p[2].class_id == k),
                                 key=lambda p: (-p[2].score, p[0], p[1]))
                keep += members[:quotas[k]]
        else:
            rng = np.random.default_rng(derive_seed(seed, "shrink", t, len(tasks)))
            keep = [pool[i] for i in rng.choice(len(pool), size=cap, replace=False)]
        kept = {(cid, i) for cid, i, _ in keep}
        for c in clients:
            c.buffer[t] = [e for i, e in enumerate(c.buffer.get(t, [])) if (c.client_id, i) in kept]


def end_of_task_replay_update(task_id: int, model: Model, clients: list[ClientState],
                              config: ExperimentConfig, dataset: Dataset, method: str,
                              seed: int) -> list[dict]:
    """Add the finished task's exemplars to the client buffers.

    Returns selection records (empty for the random and finetune baselines).
    """
    if method == "Finetune":
        return []
    records: list[dict] = []
    leverage = method == "FedCBDR"
    if leverage:
        try:
            records = _gdr_replay(model, clients, dataset, task_id, config, seed)
        except gdr.GdrError as exc:
            log.warning("replay selection failed for task %d (%s); using local random replay",
                        task_id, exc)
            _random_replay(clients, dataset, task_id, config.per_task_buffer, seed)
            records = []
    else:
        _random_replay(clients, dataset, task_id, config.per_task_buffer, seed)
    shrink_buffers(clients, config.budget, leverage, seed)
    return records


def buffer_histogram(clients: list[ClientState], classes) -> dict[int, int]:
    hist = {int(c): 0 for c in classes}
    for c in clients:
        for e in c.buffer_entries():
            hist[e.class_id] = hist.get(e.class_id, 0) + 1
    return hist
