"""Globally coordinated replay selection from masked client features.

Clients mask their feature matrices with a private row mask and a shared
column mask, the server stacks and factors them, scores each row by its
leverage (squared row norm of the left singular vectors), and draws a
class-balanced, leverage-weighted replay set. Selected masked rows are
mapped back to raw local indices by the owning client.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass

import numpy as np

from .linalg import (FactoredMatrix, MaskKind, OrthogonalMatrix, apply_mask,
                     as_matrix, random_orthogonal, thin_svd)

log = logging.getLogger(__name__)

# relative threshold below which singular directions count as numerically zero
RANK_RTOL = 1e-10


class GdrError(ValueError):
    pass


class DegenerateFeaturesError(GdrError):
    pass


class UnsupportedDecodeError(GdrError):
    pass


class NormMode(str, enum.Enum):
    GLOBAL = "Global"
    PER_CLASS = "PerClass"


@dataclass(frozen=True)
class MaskedBlock:
    client_id: int
    task_id: int
    masked: np.ndarray
    labels: np.ndarray  # class ids in masked-row order
    row_map: np.ndarray | None = None  # masked row -> local sample index

    @property
    def n(self) -> int:
        return self.masked.shape[0]


@dataclass(frozen=True)
class IndexTable:
    client_ids: np.ndarray
    rows: np.ndarray  # masked-row index within the client's block
    labels: np.ndarray
    task_id: int


@dataclass
class LeverageProfile:
    client_ids: np.ndarray
    rows: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray
    probs: np.ndarray | None = None
    global_probs: np.ndarray | None = None
    rank: int = 0
    task_id: int = 0

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class Selected:
    client_id: int
    row: int
    class_id: int
    score: float
    probability: float
    weight: float


@dataclass
class ReplaySelection:
    task_id: int
    entries: list[Selected]

    def __len__(self) -> int:
        return len(self.entries)

    def by_client(self) -> dict[int, list[Selected]]:
        out: dict[int, list[Selected]] = {}
        for e in self.entries:
            out.setdefault(e.client_id, []).append(e)
        return out


def mask_local_features(features, d_seed: int, q: OrthogonalMatrix,
                        kind: MaskKind | str = MaskKind.PERMUTATION,
                        labels=None, client_id: int = 0, task_id: int = 0) -> MaskedBlock:
    """Client side: ``P_k @ X @ Q`` with ``P_k`` drawn privately from ``d_seed``."""
    x = as_matrix(features, "features")
    p = random_orthogonal(x.shape[0], d_seed, kind)
    masked = apply_mask(p, x, q)
    labels = np.zeros(x.shape[0], dtype=np.int64) if labels is None else np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise GdrError("labels do not match feature rows")
    if p.perm is not None:
        return MaskedBlock(client_id, task_id, masked, labels[p.perm], p.perm.copy())
    # labels cannot follow mixed rows; keep them in local order
    return MaskedBlock(client_id, task_id, masked, labels.copy(), None)


def aggregate_and_factor(blocks: list[MaskedBlock]) -> tuple[FactoredMatrix, IndexTable]:
    """Stack blocks in ascending client order and take the thin SVD."""
    if not blocks:
        raise GdrError("no blocks to aggregate")
    blocks = sorted(blocks, key=lambda b: b.client_id)
    if len({b.masked.shape[1] for b in blocks}) != 1:
        raise GdrError("blocks disagree on feature dimension")
    if len({b.task_id for b in blocks}) != 1:
        raise GdrError("blocks come from different tasks")
    stacked = np.vstack([b.masked for b in blocks])
    table = IndexTable(
        client_ids=np.concatenate([np.full(b.n, b.client_id) for b in blocks]),
        rows=np.concatenate([np.arange(b.n) for b in blocks]),
        labels=np.concatenate([b.labels for b in blocks]),
        task_id=blocks[0].task_id,
    )
    return thin_svd(stacked), table


def numerical_rank(s: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if len(s) == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def leverage_scores(factor: FactoredMatrix, table: IndexTable,
                    truncate_rank: bool = True) -> LeverageProfile:
    """Squared row norms of ``U``.

    With ``truncate_rank`` only columns whose singular value exceeds
    ``RANK_RTOL * S_max`` are kept; their scores are then the diagonal of
    the projector onto the column space and do not depend on how the
    SVD picks a basis for the null directions.
    """
    r = numerical_rank(factor.S) if truncate_rank else factor.r
    u = factor.U[:, :r]
    scores = np.einsum("ij,ij->i", u, u)
    return LeverageProfile(table.client_ids, table.rows, table.labels, scores,
                           rank=r, task_id=table.task_id)


def _normalize(scores: np.ndarray, groups: np.ndarray) -> np.ndarray:
    probs = np.zeros_like(scores)
    for g in np.unique(groups):
        m = groups == g
        total = scores[m].sum()
        if not total > 0:
            raise DegenerateFeaturesError(f"all leverage scores are zero in group {g}")
        probs[m] = scores[m] / total
    return probs


def build_distribution(profile: LeverageProfile, mode: NormMode | str = NormMode.GLOBAL) -> LeverageProfile:
    """Fill ``probs`` by normalizing scores over the task or within each class.

    The task-wide distribution is always stored in ``global_probs`` as it
    defines the importance weights.
    """
    mode = NormMode(mode)
    if len(profile) == 0:
        raise GdrError("empty leverage profile")
    glob = _normalize(profile.scores, np.zeros(len(profile), dtype=np.int64))
    probs = glob if mode is NormMode.GLOBAL else _normalize(profile.scores, profile.class_ids)
    return LeverageProfile(profile.client_ids, profile.rows, profile.class_ids, profile.scores,
                           probs, glob, profile.rank, profile.task_id)


def class_quotas(budget: int, available: dict[int, int], priority: dict[int, float]) -> dict[int, int]:
    """Split ``budget`` evenly across classes, capped by availability.

    The remainder goes one unit at a time to classes in descending
    ``priority``. Classes that cannot fill their share give up the surplus,
    which is re-split over the rest by the same rule.
    """
    quotas = {c: 0 for c in available}
    active = [c for c in available if available[c] > 0]
    remaining = min(budget, sum(available[c] for c in active))
    while active and remaining > 0:
        order = sorted(active, key=lambda c: (-priority[c], c))
        base, extra = divmod(remaining, len(order))
        share = {c: base + (1 if i < extra else 0) for i, c in enumerate(order)}
        capped = [c for c in order if available[c] - quotas[c] <= share[c]]
        if not capped:
            for c in order:
                quotas[c] += share[c]
            break
        for c in capped:
            take = available[c] - quotas[c]
            quotas[c] += take
            remaining -= take
            active.remove(c)
    if budget < len(available):
        log.info("replay budget %d is below the class count %d", budget, len(available))
    return quotas


def _draw_without_replacement(p: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p = p.astype(np.float64).copy()
    picks = np.empty(k, dtype=np.int64)
    for i in range(k):
        cdf = np.cumsum(p)
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        j = min(j, len(p) - 1)
        while p[j] == 0:  # guard against landing on an exhausted slot at a cdf edge
            j -= 1
        picks[i] = j
        p[j] = 0.0
    return picks


def stratified_sample(profile: LeverageProfile, budget: int, seed: int) -> ReplaySelection:
    """Class-balanced leverage sampling without replacement.

    Only rows with a positive score are eligible. Each pick carries the
    weight ``1 / sqrt(n_s * p_x)`` with ``p_x`` its task-wide probability.
    """
    if len(profile) == 0:
        raise GdrError("empty leverage profile")
    if profile.global_probs is None:
        profile = build_distribution(profile, NormMode.PER_CLASS)
    rng = np.random.default_rng(seed)
    classes = np.unique(profile.class_ids)
    eligible = profile.scores > 0
    available = {int(c): int(np.count_nonzero(eligible & (profile.class_ids == c))) for c in classes}
    priority = {int(c): float(profile.scores[profile.class_ids == c].sum()) for c in classes}
    quotas = class_quotas(budget, available, priority)

    chosen: list[int] = []
    for c in classes:
        idx = np.flatnonzero(profile.class_ids == c)
        q = quotas[int(c)]
        if q:
            chosen.extend(idx[_draw_without_replacement(profile.scores[idx], q, rng)])
    n_s = len(chosen)
    entries = [
        Selected(int(profile.client_ids[i]), int(profile.rows[i]), int(profile.class_ids[i]),
                 float(profile.scores[i]), float(profile.global_probs[i]),
                 float(1.0 / np.sqrt(n_s * profile.global_probs[i])))
        for i in chosen
    ]
    return ReplaySelection(profile.task_id, entries)


def iid_sample(probs: np.ndarray, n_s: int, rng: np.random.Generator) -> np.ndarray:
    """``n_s`` i.i.d. draws (with replacement) from ``probs``."""
    return rng.choice(len(probs), size=n_s, replace=True, p=probs)


def importance_estimate(values: np.ndarray, probs: np.ndarray, picks: np.ndarray) -> float:
    """Unbiased estimate of ``values.sum()`` from i.i.d. picks.

    Each pick contributes ``w**2 * g(x)`` with ``w = 1/sqrt(n_s p_x)``.
    """
    w = 1.0 / np.sqrt(len(picks) * probs[picks])
    return float(np.sum(w * w * values[picks]))


def decode_selection(selection: ReplaySelection, row_maps: dict[int, np.ndarray | None]) -> dict[int, list[int]]:
    """Translate selected masked rows into raw local indices per client."""
    out: dict[int, list[int]] = {}
    for e in selection.entries:
        rmap = row_maps.get(e.client_id)
        if rmap is None:
            raise UnsupportedDecodeError(
                f"client {e.client_id} has no row map; only permutation masks can be decoded")
        out.setdefault(e.client_id, []).append(int(rmap[e.row]))
    return out


def select_replay(client_features: dict[int, np.ndarray], client_labels: dict[int, np.ndarray],
                  budget: int, task_id: int, seed: int, client_seeds: dict[int, int],
                  kind: MaskKind | str = MaskKind.PERMUTATION, truncate_rank: bool = True):
    """Run the full masked pipeline for one task.

    Returns ``(selection, decoded, profile, row_maps)`` where ``decoded`` maps
    each client to the local indices of its selected samples, aligned with
    ``selection.by_client()``.
    """
    d = next(iter(client_features.values())).shape[1]
    q = random_orthogonal(d, seed, MaskKind.GENERAL)
    blocks = [mask_local_features(client_features[k], client_seeds[k], q, kind,
                                  labels=client_labels[k], client_id=k, task_id=task_id)
              for k in sorted(client_features)]
    factor, table = aggregate_and_factor(blocks)
    profile = build_distribution(leverage_scores(factor, table, truncate_rank), NormMode.PER_CLASS)
    selection = stratified_sample(profile, budget, seed)
    row_maps = {b.client_id: b.row_map for b in blocks}
    decoded = decode_selection(selection, row_maps)
    return selection, decoded, profile, row_maps


def write_selection_jsonl(fh, records) -> None:
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
