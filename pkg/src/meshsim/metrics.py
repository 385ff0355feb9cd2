"""Consensus diagnostics and trajectory serialisation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import vec_mean


def consensus_error(W) -> float:
    """``sum_i ||w_i - mean||^2`` over the rows of ``W``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    r = W - vec_mean(W)
    return float(np.sum(r * r))


def ema_variance(D) -> tuple[float, float]:
    """Mean and max over coordinates of the population variance across replicas."""
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    if D.shape[0] < 2:
        return 0.0, 0.0
    r = D - vec_mean(D)
    var = np.sum(r * r, axis=0) / D.shape[0]
    return float(var.mean()), float(var.max())


@dataclass
class MetricsRecord:
    step: int
    replica_losses: tuple = ()
    consensus_loss: float = math.nan
    consensus_error: float = 0.0
    ema_var_mean: float = 0.0
    ema_var_max: float = 0.0
    diverged: bool = False
    inflight: int = 0
    consensus_error_mean: float = 0.0
    drift_norm: float = 0.0
    drift_change_norm: float = 0.0


TAIL_FIELDS = ("consensus_loss", "consensus_error", "ema_var_mean", "ema_var_max", "diverged", "inflight",
               "consensus_error_mean", "drift_norm", "drift_change_norm")


class TrajectoryIOError(OSError):
    pass


def columns(num_replicas: int) -> list[str]:
    return ["step", *(f"loss_{i}" for i in range(num_replicas)), *TAIL_FIELDS]


def _row(rec: MetricsRecord) -> dict:
    row = {"step": rec.step}
    for i, v in enumerate(rec.replica_losses):
        row[f"loss_{i}"] = float(v)
    for k in TAIL_FIELDS:
        row[k] = getattr(rec, k)
    return row


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_trajectory(records, path, format: str | None = None) -> Path:
    """Write one row (csv) or one object (jsonl) per record; fields in declared order."""
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    path = Path(path)
    format = format or ("jsonl" if path.suffix == ".jsonl" else "csv")
    cols = columns(len(records[0].replica_losses))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if format == "csv":
                w = csv.writer(fh)
                w.writerow(cols)
                for rec in records:
                    row = _row(rec)
                    w.writerow([_fmt(row[c]) for c in cols])
            elif format == "jsonl":
                for rec in records:
                    fh.write(json.dumps(_row(rec)) + "\n")
            else:
                raise ValueError(f"unknown trajectory format {format!r}")
    except OSError as exc:
        raise TrajectoryIOError(f"{path}: {exc.strerror or exc}") from exc
    return path


def _record(row: dict) -> MetricsRecord:
    losses = []
    i = 0
    while f"loss_{i}" in row:
        losses.append(float(row[f"loss_{i}"]))
        i += 1
    div = row["diverged"]
    return MetricsRecord(
        step=int(row["step"]),
        replica_losses=tuple(losses),
        diverged=div if isinstance(div, bool) else str(div) in ("1", "true", "True"),
        inflight=int(row["inflight"]),
        **{k: float(row[k]) for k in TAIL_FIELDS if k not in ("diverged", "inflight")},
    )


def read_trajectory(path, format: str | None = None) -> list[MetricsRecord]:
    path = Path(path)
    format = format or ("jsonl" if path.suffix == ".jsonl" else "csv")
    try:
        with path.open(newline="") as fh:
            if format == "csv":
                return [_record(r) for r in csv.DictReader(fh)]
            return [_record(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise TrajectoryIOError(f"{path}: {exc.strerror or exc}") from exc
