"""Confusion-matrix metrics, fold aggregation, and fairness reporting.

A metric whose defining denominator is zero (for example precision in a
group with no predicted positives) is reported as the distinguished
``UNDEFINED`` value, never coerced to 0 or 1: per-group analysis relies
on telling "cannot be computed" apart from a real score. ``UNDEFINED``
is represented as ``None`` in Python, ``null`` in JSON, and the string
``UNDEFINED`` in CSV output.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import GROUP_AXES, DemographicGroup, group_by
from .preprocess import ExamplePoint
from .uncertainty import McPrediction

UNDEFINED = None

METRIC_NAMES = ("accuracy", "f1", "precision", "recall", "specificity")

NUM_FOLD_REPORTS = 5


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, predictions: Sequence[int],
                         labels: Sequence[int]) -> "ConfusionMatrix":
        preds = np.asarray(predictions, dtype=int)
        truth = np.asarray(labels, dtype=int)
        if preds.shape != truth.shape:
            raise ValueError(f"predictions ({preds.shape}) and labels "
                             f"({truth.shape}) differ in length")
        if preds.size == 0:
            raise ValueError("cannot build a confusion matrix from no examples")
        return cls(
            tp=int(((preds == 1) & (truth == 1)).sum()),
            fp=int(((preds == 1) & (truth == 0)).sum()),
            fn=int(((preds == 0) & (truth == 1)).sum()),
            tn=int(((preds == 0) & (truth == 0)).sum()),
        )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else UNDEFINED


@dataclass(frozen=True)
class MetricsReport:
    accuracy: Optional[float]
    f1: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        precision = _ratio(cm.tp, cm.tp + cm.fp)
        recall = _ratio(cm.tp, cm.tp + cm.fn)
        if precision is UNDEFINED or recall is UNDEFINED or precision + recall == 0:
            f1 = UNDEFINED
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        return cls(
            accuracy=_ratio(cm.tp + cm.tn, cm.total),
            f1=f1,
            precision=precision,
            recall=recall,
            specificity=_ratio(cm.tn, cm.tn + cm.fp),
        )

    def values(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def compute_metrics(predictions: Sequence[int],
                    labels: Sequence[int]) -> MetricsReport:
    """Score 0/1 predictions against 0/1 labels."""
    return MetricsReport.from_confusion(
        ConfusionMatrix.from_predictions(predictions, labels))


@dataclass(frozen=True)
class FoldAggregate:
    """Per-metric mean over folds, with undefined entries excluded."""

    mean: MetricsReport
    undefined_counts: Dict[str, int]


def aggregate_folds(reports: Sequence[MetricsReport]) -> FoldAggregate:
    """Arithmetic mean of exactly five fold reports per metric.

    UNDEFINED entries are left out of the mean and counted; a metric
    undefined in every fold stays UNDEFINED.
    """
    if len(reports) != NUM_FOLD_REPORTS:
        raise ValueError(f"expected {NUM_FOLD_REPORTS} fold reports, "
                         f"got {len(reports)}")
    means: Dict[str, Optional[float]] = {}
    undefined: Dict[str, int] = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports]
        defined = [v for v in values if v is not UNDEFINED]
        undefined[name] = len(values) - len(defined)
        # fsum is exactly rounded, so the mean is permutation-invariant
        means[name] = math.fsum(defined) / len(defined) if defined else UNDEFINED
    return FoldAggregate(mean=MetricsReport(**means), undefined_counts=undefined)


@dataclass(frozen=True)
class GroupMetrics:
    group: DemographicGroup
    report: MetricsReport
    size: int
    positive_count: int


def fairness_report(predictions: Sequence[int], examples: Sequence[ExamplePoint],
                    axes: Sequence[str] = GROUP_AXES) -> List[GroupMetrics]:
    """Per-demographic-group metrics along the requested axes.

    The groups of each axis partition the evaluation set; metrics keep
    their UNDEFINED semantics (a group with no actual positives has
    UNDEFINED recall, for instance, while accuracy stays defined).
    """
    preds = np.asarray(predictions, dtype=int)
    if len(preds) != len(examples):
        raise ValueError("predictions and examples differ in length")
    labels = np.array([e.label for e in examples], dtype=int)
    out: List[GroupMetrics] = []
    for axis in axes:
        for group in group_by(examples, axis):
            idx = np.array(group.member_indices)
            report = compute_metrics(preds[idx], labels[idx])
            out.append(GroupMetrics(
                group=group,
                report=report,
                size=len(idx),
                positive_count=int(labels[idx].sum()),
            ))
    return out


@dataclass(frozen=True)
class AbstentionBreakdown:
    """Certain/uncertain counts crossed with correctness, plus metrics
    over all predictions and over certain-only predictions."""

    n_certain: int
    n_uncertain: int
    certain_correct: int
    certain_wrong: int
    uncertain_correct: int
    uncertain_wrong: int
    metrics_all: MetricsReport
    metrics_certain_only: Optional[MetricsReport]


def abstention_breakdown(predictions: Sequence[McPrediction],
                         true_labels: Sequence[int]) -> AbstentionBreakdown:
    """Cross abstention flags with correctness and score both ways.

    Abstained (uncertain) examples are reported both included in and
    excluded from the metrics, so the cost of abstention is visible.
    """
    if len(predictions) != len(true_labels):
        raise ValueError("predictions and labels differ in length")
    pred_labels = np.array([p.label for p in predictions], dtype=int)
    truth = np.asarray(true_labels, dtype=int)
    certain = np.array([p.certain for p in predictions], dtype=bool)
    correct = pred_labels == truth
    metrics_all = compute_metrics(pred_labels, truth)
    metrics_certain = (compute_metrics(pred_labels[certain], truth[certain])
                       if certain.any() else None)
    return AbstentionBreakdown(
        n_certain=int(certain.sum()),
        n_uncertain=int((~certain).sum()),
        certain_correct=int((certain & correct).sum()),
        certain_wrong=int((certain & ~correct).sum()),
        uncertain_correct=int((~certain & correct).sum()),
        uncertain_wrong=int((~certain & ~correct).sum()),
        metrics_all=metrics_all,
        metrics_certain_only=metrics_certain,
    )


# ---------------------------------------------------------------------------
# flat serialization: (model, fold, axis, group, metric, value)

MetricRow = Tuple[str, str, str, str, str, Optional[float]]


def report_rows(model: str, fold: str, axis: str, group: str,
                report: MetricsReport) -> List[MetricRow]:
    return [(model, fold, axis, group, name, value)
            for name, value in report.values().items()]


def format_metric(value: Optional[float]) -> str:
    return "UNDEFINED" if value is UNDEFINED else repr(value)


def write_metrics_csv(rows: Iterable[MetricRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "fold", "axis", "group", "metric", "value"])
        for model, fold, axis, group, metric, value in rows:
            writer.writerow([model, fold, axis, group, metric,
                             format_metric(value)])


def write_metrics_json(rows: Iterable[MetricRow], path: Path) -> None:
    payload = [
        {"model": m, "fold": f, "axis": a, "group": g, "metric": name,
         "value": value}
        for m, f, a, g, name, value in rows
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True),
                          encoding="utf-8")
