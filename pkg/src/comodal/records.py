"""JSON Lines metrics output with round-trippable floats."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Iterator

from .config import ExperimentConfig
from .metrics import MetricsRecord

__all__ = ["run_id", "format_float", "dumps", "metric_lines", "write_jsonl", "read_jsonl"]


def config_bytes(cfg: ExperimentConfig) -> bytes:
    """Canonical JSON encoding of a config (sorted keys, no whitespace)."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")


def run_id(cfg: ExperimentConfig, seed: int) -> str:
    h = hashlib.sha256(config_bytes(cfg))
    h.update(b"\x00seed=" + str(int(seed)).encode("ascii"))
    return h.hexdigest()[:16]


def format_float(x: float) -> str:
    """17 significant digits, enough to recover the exact float64."""
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    text = format(x, ".17g")
    # keep it a JSON float even when it happens to be integral
    return text if any(c in text for c in ".eE") else text + ".0"


def dumps(obj: Any) -> str:
    """Compact JSON where every float is written by :func:`format_float`."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if hasattr(obj, "item"):  # numpy scalar
        return dumps(obj.item())
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def metric_lines(records: Iterable[MetricsRecord], rid: str) -> Iterator[dict]:
    """One dict per (record, branch, metric); loss-only records give one ``loss`` line."""
    for rec in records:
        losses = {k: float(v) for k, v in rec.losses.items()}
        if not rec.metrics:
            yield {"run_id": rid, "epoch": rec.epoch, "split": rec.split, "branch": None,
                   "metric": "loss", "value": losses.get("total"), "losses": losses}
            continue
        for branch, values in rec.metrics.items():
            for metric, value in values.items():
                yield {"run_id": rid, "epoch": rec.epoch, "split": rec.split, "branch": branch,
                       "metric": metric, "value": float(value), "losses": losses}


def write_jsonl(lines: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(dumps(line) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
