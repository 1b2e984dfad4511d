"""Point-tracking evaluation: endpoint error, threshold recall, Jaccard,
occlusion accuracy.

Positional metrics (average distance, delta) are computed over ground-truth
visible queries only; the Jaccard statistic folds occlusion handling into its
TP/FP/FN definitions; occlusion accuracy scores the binary flag on every
query.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from kltrace.errors import ConfigError

DELTA_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class MatchedRecord:
    """One query with its ground truth and its prediction."""
    gt: tuple[float, float]
    gt_occluded: bool
    pred: tuple[float, float]
    pred_occluded: bool


@dataclass(frozen=True)
class MetricsReport:
    average_distance: float
    delta_avg: float
    average_jaccard: float
    occlusion_accuracy: float
    n_queries: int
    n_visible: int

    def to_dict(self) -> dict:
        return asdict(self)


def _arrays(records: list[MatchedRecord]):
    if not records:
        raise ConfigError("metrics need at least one record")
    err = np.array([
        float(np.hypot(r.pred[0] - r.gt[0], r.pred[1] - r.gt[1])) for r in records
    ])
    gt_occ = np.array([r.gt_occluded for r in records], dtype=bool)
    pred_occ = np.array([r.pred_occluded for r in records], dtype=bool)
    return err, gt_occ, pred_occ


def average_distance(records: list[MatchedRecord]) -> float:
    """Mean endpoint error in pixels over ground-truth visible queries."""
    err, gt_occ, _ = _arrays(records)
    vis = ~gt_occ
    if not vis.any():
        raise ConfigError("average distance needs at least one visible query")
    return float(err[vis].mean())


def delta_avg(records: list[MatchedRecord], thresholds=DELTA_THRESHOLDS) -> float:
    """Fraction of visible queries within t pixels, averaged over thresholds."""
    err, gt_occ, _ = _arrays(records)
    vis = ~gt_occ
    if not vis.any():
        raise ConfigError("delta needs at least one visible query")
    return float(np.mean([(err[vis] <= t).mean() for t in thresholds]))


def average_jaccard(records: list[MatchedRecord], thresholds=DELTA_THRESHOLDS) -> float:
    """Jaccard of within-threshold matches, averaged over thresholds.

    Per threshold t: a true positive is predicted visible, truly visible, and
    within t; a false positive is predicted visible but truly occluded or off
    by more than t; a false negative is truly visible but predicted occluded
    or off by more than t. An empty denominator scores 1.
    """
    err, gt_occ, pred_occ = _arrays(records)
    scores = []
    for t in thresholds:
        close = err <= t
        tp = (~pred_occ & ~gt_occ & close).sum()
        fp = (~pred_occ & (gt_occ | ~close)).sum()
        fn = (~gt_occ & (pred_occ | ~close)).sum()
        denom = tp + fp + fn
        scores.append(1.0 if denom == 0 else tp / denom)
    return float(np.mean(scores))


def occlusion_accuracy(records: list[MatchedRecord]) -> float:
    """Fraction of queries whose predicted occlusion flag matches the truth."""
    _, gt_occ, pred_occ = _arrays(records)
    return float((gt_occ == pred_occ).mean())


def compute_report(records: list[MatchedRecord]) -> MetricsReport:
    return MetricsReport(
        average_distance=average_distance(records),
        delta_avg=delta_avg(records),
        average_jaccard=average_jaccard(records),
        occlusion_accuracy=occlusion_accuracy(records),
        n_queries=len(records),
        n_visible=int(sum(not r.gt_occluded for r in records)),
    )


def match_records(queries, estimates) -> list[MatchedRecord]:
    """Pair ground-truth queries with flow estimates, index-aligned."""
    if len(queries) != len(estimates):
        raise ConfigError(f"{len(queries)} queries vs {len(estimates)} estimates")
    return [
        MatchedRecord(gt=(q.gt_x, q.gt_y), gt_occluded=q.occluded,
                      pred=tuple(e.target), pred_occluded=e.occluded)
        for q, e in zip(queries, estimates)
    ]


def write_report_json(path, report: MetricsReport, extra: dict | None = None) -> None:
    """Canonical, timestamp-free JSON so identical runs hash identically."""
    payload = dict(report.to_dict())
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        f.write(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def write_report_csv(path, rows: list[dict]) -> None:
    """One row per configuration; columns from the union of keys, sorted."""
    if not rows:
        raise ConfigError("csv report needs at least one row")
    cols = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
