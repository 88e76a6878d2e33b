"""Top-1 evaluation and replay-buffer balance summaries."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn import Model, logits


class ReportError(ValueError):
    pass


def evaluate(model: Model, test: Dataset, task_classes) -> tuple[float, list[float]]:
    """Pooled and per-task Top-1 accuracy over the given tasks' test samples.

    Predictions are the argmax of the raw logits over every seen class.
    """
    per_task, correct, total = [], 0, 0
    for classes in task_classes:
        idx = test.indices_of(classes)
        if len(idx) == 0:
            raise ReportError(f"no test samples for task classes {sorted(classes)}")
        pred = np.asarray(model.class_order)[logits(model, test.X[idx]).argmax(axis=1)]
        hits = int(np.count_nonzero(pred == test.y[idx]))
        per_task.append(hits / len(idx))
        correct += hits
        total += len(idx)
    if total == 0:
        raise ReportError("empty test set")
    return correct / total, per_task


def balance_stats(hist: dict) -> dict:
    counts = np.array(list(hist.values()), dtype=np.float64)
    missing = sorted(int(c) for c, n in hist.items() if n == 0)
    if len(counts) == 0:
        return {"classes": 0, "min": 0, "max": 0, "std": 0.0, "total": 0, "missing": []}
    return {"classes": len(counts), "min": int(counts.min()), "max": int(counts.max()),
            "std": float(counts.std()), "total": int(counts.sum()), "missing": missing}


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"metrics file not found: {path}")
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ReportError(f"{path}:{lineno}: record is not an object")
            out.append(rec)
    return out


def report_buffer_balance(metrics_path) -> list[dict]:
    """Per (method, seed, task) statistics of the buffer's per-class counts.

    Uses the last round record of each task. ``missing`` lists old classes
    with no exemplar.
    """
    last: dict[tuple, dict] = {}
    for i, rec in enumerate(read_jsonl(metrics_path)):
        try:
            key = (rec.get("method", ""), rec.get("seed", 0), int(rec["task"]))
            hist = rec["buffer_class_histogram"]
            int(rec["round"])
        except (KeyError, TypeError, ValueError):
            raise ReportError(f"record {i + 1} lacks task/round/buffer_class_histogram") from None
        if not isinstance(hist, dict):
            raise ReportError(f"record {i + 1}: buffer_class_histogram must be an object")
        if key not in last or rec["round"] >= last[key]["round"]:
            last[key] = rec
    rows = []
    for (method, seed, task), rec in sorted(last.items(), key=lambda kv: (str(kv[0][0]), kv[0][1], kv[0][2])):
        stats = balance_stats({int(k): int(v) for k, v in rec["buffer_class_histogram"].items()})
        rows.append({"method": method, "seed": seed, "task": task, **stats})
    return rows
