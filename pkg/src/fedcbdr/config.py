"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .linalg import MaskKind
from .nn import TtsParams

METHODS = ("Finetune", "LocalRandomReplay", "FedCBDR")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 6
    per_class: int = 200
    d_in: int = 16
    spread: float = 0.5
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ExperimentConfig:
    beta: float
    num_clients: int = 5
    local_epochs: int = 2
    batch_size: int = 128
    rounds_per_task: int = 100
    lr: float = 0.01
    weight_decay: float = 1e-5
    num_tasks: int = 3
    per_task_buffer: int = 450
    memory_budget: int | None = None
    tts: TtsParams = field(default_factory=TtsParams)
    methods: list[str] = field(default_factory=lambda: ["FedCBDR"])
    mask_kind: str = MaskKind.PERMUTATION.value
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    use_leverage_weights: bool = False
    truncate_rank: bool = True
    use_tts: bool | None = None

    @property
    def budget(self) -> int:
        """Total buffer budget M; defaults to one per-task quota per replayable task."""
        if self.memory_budget is not None:
            return self.memory_budget
        return self.per_task_buffer * max(self.num_tasks - 1, 1)

    def tts_enabled(self, method: str) -> bool:
        return method == "FedCBDR" if self.use_tts is None else self.use_tts

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_INT = (int,)
_NUM = (int, float)

_FIELDS: dict[str, tuple] = {
    "beta": _NUM, "num_clients": _INT, "local_epochs": _INT, "batch_size": _INT,
    "rounds_per_task": _INT, "lr": _NUM, "weight_decay": _NUM, "num_tasks": _INT,
    "per_task_buffer": _INT, "memory_budget": _INT + (type(None),), "tts": (dict,),
    "methods": (list,), "method": (str,), "mask_kind": (str,), "seeds": (list,),
    "dataset": (dict,), "hidden": (list,), "use_leverage_weights": (bool,),
    "truncate_rank": (bool,), "use_tts": (bool, type(None)),
}
REQUIRED = ("beta",)


def _line_of(text: str | None, key: str) -> int | None:
    if text is None:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if m is None:
        return 1
    return text.count("\n", 0, m.start()) + 1


def _type_ok(value, types) -> bool:
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def config_from_dict(raw: dict, text: str | None = None, source: str | None = None) -> ExperimentConfig:
    """Validate a parsed JSON object; diagnostics point at the offending line of ``text``."""

    def fail(msg, key=None):
        raise ConfigError(msg, _line_of(text, key) if key else (1 if text is not None else None), source)

    if not isinstance(raw, dict):
        fail("top level must be a JSON object")
    for key in raw:
        if key not in _FIELDS:
            fail(f"unknown field {key!r}", key)
        if not _type_ok(raw[key], _FIELDS[key]):
            fail(f"field {key!r} has the wrong type ({type(raw[key]).__name__})", key)
    for key in REQUIRED:
        if key not in raw:
            fail(f"missing required field {key!r}")

    kw = {k: v for k, v in raw.items() if k not in ("tts", "dataset", "method")}
    if "method" in raw:
        if "methods" in raw:
            fail("give either 'method' or 'methods', not both", "method")
        kw["methods"] = [raw["method"]]
    try:
        kw["tts"] = TtsParams(**raw.get("tts", {}))
    except (TypeError, ValueError) as exc:
        fail(f"invalid tts block: {exc}", "tts")
    try:
        kw["dataset"] = DatasetSpec(**raw.get("dataset", {}))
    except TypeError as exc:
        fail(f"invalid dataset block: {exc}", "dataset")
    for k in ("lr", "weight_decay", "beta"):
        if k in kw:
            kw[k] = float(kw[k])
    cfg = ExperimentConfig(**kw)
    problem = check(cfg)
    if problem:
        fail(problem[1], problem[0])
    return cfg


def check(cfg: ExperimentConfig) -> tuple[str, str] | None:
    """Return ``(field, message)`` for the first invalid setting, else None."""
    positive = ["num_clients", "batch_size", "rounds_per_task", "num_tasks"]
    for k in positive:
        if getattr(cfg, k) < 1:
            return k, f"{k} must be >= 1"
    if cfg.local_epochs < 0 or cfg.per_task_buffer < 0:
        return "local_epochs", "local_epochs and per_task_buffer must be >= 0"
    if not (np.isfinite(cfg.beta) and cfg.beta > 0):
        return "beta", "beta must be positive"
    if not cfg.lr >= 0 or not cfg.weight_decay >= 0:
        return "lr", "lr and weight_decay must be >= 0"
    if cfg.memory_budget is not None and cfg.memory_budget < 0:
        return "memory_budget", "memory_budget must be >= 0"
    if not cfg.methods or any(m not in METHODS for m in cfg.methods):
        return "methods", f"methods must be drawn from {list(METHODS)}"
    if cfg.mask_kind not in {k.value for k in MaskKind}:
        return "mask_kind", f"mask_kind must be one of {[k.value for k in MaskKind]}"
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds):
        return "seeds", "seeds must be a non-empty list of integers"
    if not cfg.hidden or not all(isinstance(h, int) and h >= 1 for h in cfg.hidden):
        return "hidden", "hidden must list positive layer widths"
    ds = cfg.dataset
    if ds.kind not in ("synthetic", "idx"):
        return "dataset", "dataset.kind must be 'synthetic' or 'idx'"
    if ds.kind == "idx" and not all([ds.train_images, ds.train_labels, ds.test_images, ds.test_labels]):
        return "dataset", "idx datasets need train/test image and label paths"
    if ds.kind == "synthetic" and ds.num_classes % cfg.num_tasks:
        return "num_tasks", "num_tasks must divide dataset.num_classes"
    return None


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, source) from None
    return config_from_dict(raw, text, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, str(path))
