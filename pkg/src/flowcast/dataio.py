"""CSV persistence for series, rollouts and scores.

Floats are written with 17 significant digits so a write/read cycle
reproduces the exact binary values.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ScheduleParseError
from .graph import InterventionSchedule
from .scm import SeriesBatch


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_series_csv(path, batch: SeriesBatch, sidecar: dict | None = None):
    """Write [B, K, T] values as batch,node,t,value rows (t window-relative).

    A JSON sidecar (same path + .json) carries context_len and start_times
    plus any extra payload, so reading restores the full SeriesBatch.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "node", "t", "value"])
        b, k, total = batch.values.shape
        for bb in range(b):
            for i in range(k):
                row = batch.values[bb, i]
                for t in range(total):
                    w.writerow([bb, i, t, _fmt(row[t])])
    meta = {
        "context_len": batch.context_len,
        "start_times": [int(s) for s in batch.start_times],
    }
    if sidecar:
        meta.update(sidecar)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True)
    )


def read_series_csv(path) -> tuple[SeriesBatch, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    rows = []
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["batch", "node", "t", "value"]:
            raise AlignmentError(f"{path}: unexpected header {header}")
        for b, i, t, v in reader:
            rows.append((int(b), int(i), int(t), float(v)))
    if not rows:
        raise AlignmentError(f"{path}: empty series file")
    nb = max(r[0] for r in rows) + 1
    nk = max(r[1] for r in rows) + 1
    nt = max(r[2] for r in rows) + 1
    values = np.full((nb, nk, nt), np.nan)
    for b, i, t, v in rows:
        values[b, i, t] = v
    if np.any(np.isnan(values)):
        raise AlignmentError(f"{path}: missing cells in series grid")
    batch = SeriesBatch(values, meta["context_len"],
                        np.asarray(meta["start_times"], dtype=np.int64))
    return batch, meta


def write_rollouts_csv(path, values: np.ndarray, t_offset: int):
    """Rollouts for one context window: sample,node,t,value with absolute
    window positions t. values is [n_samples, K, horizon]."""
    path = Path(path)
    n, k, horizon = values.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "node", "t", "value"])
        for s in range(n):
            for i in range(k):
                for t in range(horizon):
                    w.writerow([s, i, t_offset + t, _fmt(values[s, i, t])])


def read_rollouts_csv(path) -> tuple[np.ndarray, int]:
    """Returns (values [n_samples, K, horizon], t_offset)."""
    rows = []
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["sample", "node", "t", "value"]:
            raise AlignmentError(f"{path}: unexpected header {header}")
        for s, i, t, v in reader:
            rows.append((int(s), int(i), int(t), float(v)))
    if not rows:
        raise AlignmentError(f"{path}: empty rollout file")
    t0 = min(r[2] for r in rows)
    n = max(r[0] for r in rows) + 1
    k = max(r[1] for r in rows) + 1
    horizon = max(r[2] for r in rows) - t0 + 1
    values = np.full((n, k, horizon), np.nan)
    for s, i, t, v in rows:
        values[s, i, t - t0] = v
    if np.any(np.isnan(values)):
        raise AlignmentError(f"{path}: missing cells in rollout grid")
    return values, t0


def write_scores_csv(path, per_step: np.ndarray, t_offset: int):
    """Scores for one window (batch item 0): node,t,logp plus a totals row."""
    k, horizon = per_step.shape
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "t", "logp"])
        for i in range(k):
            for t in range(horizon):
                w.writerow([i, t_offset + t, _fmt(per_step[i, t])])
        w.writerow(["total", "", _fmt(per_step.sum())])


def write_loss_csv(path, curve):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in curve:
            w.writerow([step, epoch, _fmt(loss)])


def write_metrics_csv(path, rows):
    """rows: iterable of (metric, family, mechanism, regime, mean, std, runs)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "family", "mechanism", "regime",
                    "mean", "std", "runs"])
        for metric, family, mech, regime, mean, std, runs in rows:
            w.writerow([metric, family, mech, regime,
                        _fmt(mean), _fmt(std), runs])


def read_schedule_csv(path, context_len: int, total_len: int) -> InterventionSchedule:
    """Schedule file: node,t,value with 1-based t relative to window start."""
    entries = {}
    try:
        with Path(path).open() as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and header != ["node", "t", "value"]:
                raise ScheduleParseError(f"{path}: unexpected header {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise ScheduleParseError(f"{path}:{lineno}: need node,t,value")
                node, t, value = int(row[0]), int(row[1]), float(row[2])
                entries[(node, t - 1)] = value
    except (ValueError, OSError) as exc:
        raise ScheduleParseError(f"{path}: {exc}") from exc
    return InterventionSchedule(context_len, total_len, entries)
