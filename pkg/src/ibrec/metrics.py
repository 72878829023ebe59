"""Reconstruction metrics: MSE, sequence correlation, activation-time correlation,
and scar Dice, plus per-split aggregation and CSV export.

Activation time of a node is the frame index of its steepest upstroke
(argmax of the backward difference, with a zero difference prepended so a
constant trace maps to frame 0); first occurrence wins ties.  Scar nodes are
those whose above-0.5 duration falls below half the median duration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_HEADER = ["case_id", "split", "mse", "tmp_corr", "at_corr", "dice", "quality_flags"]

SCAR_LEVEL = 0.5          # voltage threshold defining "activated" frames
SCAR_DURATION_FACTOR = 0.5  # scar iff duration < factor * median duration


class MetricError(ValueError):
    pass


@dataclass
class MetricsRecord:
    case_id: int
    split: str
    mse: float | None
    tmp_corr: float | None
    at_corr: float | None
    dice: float | None
    quality_flags: list = field(default_factory=list)

    def ok(self) -> bool:
        return all(v is not None for v in (self.mse, self.tmp_corr, self.at_corr, self.dice))


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    if x.shape != x_hat.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    d = x.astype(np.float64) - x_hat.astype(np.float64)
    return float(np.mean(d * d))


def pearson_corr(x: np.ndarray, x_hat: np.ndarray) -> float:
    if x.shape != x_hat.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    a = x.astype(np.float64).ravel()
    b = x_hat.astype(np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MetricError("correlation undefined for a zero-variance input")
    return float(np.dot(a, b) / (na * nb))


def activation_time(x: np.ndarray):
    """Per-node upstroke frame; returns (at, constant_mask) for quality flagging."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise MetricError("need a (nodes, frames) array with at least 2 frames")
    diffs = np.diff(x.astype(np.float64), axis=1, prepend=x[:, :1].astype(np.float64))
    at = np.argmax(diffs, axis=1)
    constant = np.all(x == x[:, :1], axis=1)
    return at, constant


def at_corr(x: np.ndarray, x_hat: np.ndarray) -> float:
    at_true, _ = activation_time(x)
    at_rec, _ = activation_time(x_hat)
    return pearson_corr(at_true.astype(np.float64), at_rec.astype(np.float64))


def scar_from_tmp(x_hat: np.ndarray) -> set:
    """Nodes whose activated duration is under half the median duration."""
    durations = np.sum(x_hat > SCAR_LEVEL, axis=1)
    cutoff = SCAR_DURATION_FACTOR * np.median(durations)
    return {int(i) for i in np.nonzero(durations < cutoff)[0]}


def dice(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def case_metrics(case_id: int, split: str, x: np.ndarray, x_hat: np.ndarray,
                 scar_mask: np.ndarray) -> MetricsRecord:
    """All four metrics for one case; metric failures become quality flags."""
    rec = MetricsRecord(case_id=case_id, split=split, mse=None, tmp_corr=None,
                        at_corr=None, dice=None)
    rec.mse = mse(x, x_hat)
    try:
        rec.tmp_corr = pearson_corr(x, x_hat)
    except MetricError as err:
        rec.quality_flags.append(f"tmp_corr:{err}")
    at_true, const_true = activation_time(x)
    at_rec, const_rec = activation_time(x_hat)
    if const_true.any() or const_rec.any():
        rec.quality_flags.append("at:constant_trace")
    try:
        rec.at_corr = pearson_corr(at_true.astype(np.float64), at_rec.astype(np.float64))
    except MetricError as err:
        rec.quality_flags.append(f"at_corr:{err}")
    rec.dice = dice(scar_from_tmp(x_hat), {int(i) for i in np.nonzero(scar_mask)[0]})
    return rec


def aggregate(records: list) -> dict:
    """Mean and std per metric over records with that metric defined."""
    out = {"n_cases": len(records)}
    for name in ("mse", "tmp_corr", "at_corr", "dice"):
        vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
        out[name] = {
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "n_excluded": len(records) - len(vals),
        }
    return out


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return format(float(v), ".10g")


def write_metrics_csv(path, records: list, aggregates: dict):
    """Per-case rows followed by AGG:<split> mean and std rows per split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.case_id, r.split, _fmt(r.mse), _fmt(r.tmp_corr),
                             _fmt(r.at_corr), _fmt(r.dice), ";".join(r.quality_flags)])
        for split in sorted(aggregates):
            agg = aggregates[split]
            excluded = max(agg[m]["n_excluded"] for m in ("mse", "tmp_corr", "at_corr", "dice"))
            writer.writerow([f"AGG:{split}", split] +
                            [_fmt(agg[m]["mean"]) for m in ("mse", "tmp_corr", "at_corr", "dice")] +
                            [f"mean;n={agg['n_cases']};excluded={excluded}"])
            writer.writerow([f"AGG:{split}", split] +
                            [_fmt(agg[m]["std"]) for m in ("mse", "tmp_corr", "at_corr", "dice")] +
                            ["std"])
    return path
