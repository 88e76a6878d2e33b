"""Small numpy MLP with an expandable classifier head and temperature-scaled losses."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ModelError(ValueError):
    pass


@dataclass
class Model:
    """ReLU MLP feature extractor followed by a linear head.

    Weights are stored ``(out, in)``. Head row ``i`` scores class
    ``class_order[i]``; rows before ``boundary`` belong to old classes.
    """

    hidden: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray
    class_order: list[int] = field(default_factory=list)
    boundary: int = 0

    def __post_init__(self):
        prev = self.hidden[0][0].shape[1] if self.hidden else self.head_w.shape[1]
        for w, b in self.hidden:
            if w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ModelError("hidden layer dimensions do not chain")
            prev = w.shape[0]
        if self.head_w.shape != (len(self.class_order), prev) or self.head_b.shape != (len(self.class_order),):
            raise ModelError("head shape does not match feature dim and class count")
        if len(set(self.class_order)) != len(self.class_order):
            raise ModelError("duplicate class in class_order")
        if not 0 <= self.boundary <= len(self.class_order):
            raise ModelError("boundary outside class range")

    @property
    def d_in(self) -> int:
        return self.hidden[0][0].shape[1] if self.hidden else self.head_w.shape[1]

    @property
    def d(self) -> int:
        return self.head_w.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in self.hidden:
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.hidden)):
            names += [f"hidden.{i}.weight", f"hidden.{i}.bias"]
        return names + ["head.weight", "head.bias"]

    def with_params(self, params: list[np.ndarray]) -> "Model":
        mine = self.params()
        if len(params) != len(mine) or any(p.shape != q.shape for p, q in zip(params, mine)):
            raise ModelError("parameter shapes do not match the model")
        hidden = [(params[2 * i], params[2 * i + 1]) for i in range(len(self.hidden))]
        return Model(hidden, params[-2], params[-1], list(self.class_order), self.boundary)

    def copy(self) -> "Model":
        return self.with_params([p.copy() for p in self.params()])

    def label_index(self, classes) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.class_order)}
        try:
            return np.array([pos[int(c)] for c in classes], dtype=np.int64)
        except KeyError as exc:
            raise ModelError(f"class {exc.args[0]} not covered by the head") from None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class LogitsSplit:
    z_old: np.ndarray
    z_new: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.z_old, self.z_new], axis=-1)


@dataclass(frozen=True)
class TtsParams:
    tau_old: float = 0.9
    tau_new: float = 1.1
    w_old: float = 1.1
    w_new: float = 0.9

    def __post_init__(self):
        for name in ("tau_old", "tau_new", "w_old", "w_new"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ModelError(f"{name} must be positive and finite, got {v}")


def init_model(d_in: int, hidden=(64, 32), seed: int = 0) -> Model:
    """He-initialized MLP with an empty head."""
    rng = np.random.default_rng(seed)
    layers = []
    prev = d_in
    for width in hidden:
        w = rng.standard_normal((width, prev)) * np.sqrt(2.0 / prev)
        layers.append((w, np.zeros(width)))
        prev = width
    return Model(layers, np.zeros((0, prev)), np.zeros(0), [], 0)


def expand_head(model: Model, new_classes, seed: int, std: float = 0.01) -> Model:
    """Append one head row per new class; every previously seen class becomes old."""
    new_classes = [int(c) for c in new_classes]
    if len(set(new_classes)) != len(new_classes) or set(new_classes) & set(model.class_order):
        raise ModelError("duplicate class in head expansion")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((len(new_classes), model.d)) * std
    out = model.copy()
    out.head_w = np.vstack([out.head_w, rows])
    out.head_b = np.concatenate([out.head_b, np.zeros(len(new_classes))])
    out.boundary = model.num_classes
    out.class_order = model.class_order + new_classes
    return out


def _forward(model: Model, X: np.ndarray):
    acts = [X]
    h = X
    for w, b in model.hidden:
        h = np.maximum(h @ w.T + b, 0.0)
        acts.append(h)
    logits = h @ model.head_w.T + model.head_b
    return acts, logits


def forward(model: Model, x):
    """Features ``M_g(x)`` and logits split at the old/new boundary.

    Accepts one vector or a batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d_in or x.ndim not in (1, 2):
        raise ModelError(f"input of shape {x.shape} does not match d_in={model.d_in}")
    acts, logits = _forward(model, np.atleast_2d(x))
    feats = acts[-1]
    if x.ndim == 1:
        feats, logits = feats[0], logits[0]
    return feats, LogitsSplit(logits[..., :model.boundary], logits[..., model.boundary:])


def features(model: Model, X) -> np.ndarray:
    return _forward(model, np.atleast_2d(np.asarray(X, dtype=np.float64)))[0][-1]


def logits(model: Model, X) -> np.ndarray:
    return _forward(model, np.atleast_2d(np.asarray(X, dtype=np.float64)))[1]


def loss_and_grads(model: Model, X, loss_fn) -> tuple[float, list[np.ndarray]]:
    """Full backward pass. ``loss_fn(logits) -> (loss, dloss/dlogits)``."""
    acts, z = _forward(model, np.asarray(X, dtype=np.float64))
    loss, g = loss_fn(z)
    grads = [g.T @ acts[-1], g.sum(axis=0)]
    delta = g @ model.head_w
    for i in range(len(model.hidden) - 1, -1, -1):
        w, _ = model.hidden[i]
        delta = delta * (acts[i + 1] > 0)
        grads = [delta.T @ acts[i], delta.sum(axis=0)] + grads
        if i:
            delta = delta @ w
    return loss, grads


def _log_softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def ce_loss(logits, label: int) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ModelError(f"label {label} out of range for {z.shape[-1]} logits")
    logp = _log_softmax(z)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def batch_ce_loss(z: np.ndarray, labels: np.ndarray, sample_weight=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    n = len(labels)
    logp = _log_softmax(z)
    rows = np.arange(n)
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    loss = float(-(w * logp[rows, labels]).sum() / n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad * (w / n)[:, None]


def tts_loss(batch_logits, labels, is_old_sample, params: TtsParams,
             boundary: int | None = None, sample_weight=None) -> tuple[float, np.ndarray]:
    """Task-aware temperature-scaled, group-weighted cross-entropy.

    Old-class logits are divided by ``tau_old`` and new-class logits by
    ``tau_new`` for every sample. Old and new samples are averaged
    separately, weighted by ``w_old``/``w_new`` and summed; an empty group
    contributes nothing. Returns the loss and its gradient w.r.t. the raw
    logits. ``batch_logits`` is either an ``(n, C)`` array with ``boundary``
    or a sequence of :class:`LogitsSplit`.
    """
    if boundary is None:
        boundary = len(batch_logits[0].z_old)
        z = np.stack([s.concat() for s in batch_logits])
    else:
        z = np.atleast_2d(np.asarray(batch_logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    is_old = np.asarray(is_old_sample, dtype=bool)
    n, c = z.shape
    if n == 0 or len(labels) != n or len(is_old) != n:
        raise ModelError("logits, labels and group flags must be non-empty and equally long")
    if labels.min() < 0 or labels.max() >= c:
        raise ModelError("label index outside the head")
    if not 0 <= boundary <= c:
        raise ModelError("boundary outside the logit vector")

    inv_tau = np.where(np.arange(c) < boundary, 1.0 / params.tau_old, 1.0 / params.tau_new)
    logp = _log_softmax(z * inv_tau)
    rows = np.arange(n)
    n_old = int(is_old.sum())
    n_new = n - n_old
    coef = np.where(is_old, params.w_old / max(n_old, 1), params.w_new / max(n_new, 1))
    if sample_weight is not None:
        coef = coef * np.asarray(sample_weight, dtype=np.float64)
    loss = float(-(coef * logp[rows, labels]).sum())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad * coef[:, None] * inv_tau


def sgd_step(model: Model, grads: list[np.ndarray], lr: float, weight_decay: float = 0.0) -> Model:
    """``w <- w - lr * (g + weight_decay * w)``; biases are not decayed."""
    params = model.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ModelError("gradient shapes do not match the model")
    new = [p - lr * (g + weight_decay * p) if p.ndim == 2 else p - lr * g
           for p, g in zip(params, grads)]
    return model.with_params(new)


def save_model(model: Model, path) -> None:
    arrays = dict(zip(model.param_names(), model.params()))
    arrays["class_order"] = np.asarray(model.class_order, dtype=np.int64)
    arrays["boundary"] = np.asarray(model.boundary, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> Model:
    with np.load(Path(path)) as f:
        n_hidden = sum(1 for k in f.files if k.endswith(".weight")) - 1
        hidden = [(f[f"hidden.{i}.weight"], f[f"hidden.{i}.bias"]) for i in range(n_hidden)]
        return Model(hidden, f["head.weight"], f["head.bias"],
                     [int(c) for c in f["class_order"]], int(f["boundary"]))
