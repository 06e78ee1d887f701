"""MC-dropout ensembling, predictive entropy, and abstention.

A prediction is obtained by running ``T`` stochastic forward passes
with dropout active at inference, averaging the per-pass probabilities,
and scoring the result with the binary entropy of the averaged
probability. Predictions whose entropy exceeds a threshold ``theta``
are flagged uncertain so a reviewer can handle them instead of the
model.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .dataset import EncodedExample
from .model import Model, predict_proba
from .nn.layers import DropoutMode
from .nn.rng import RngStream

ENTROPY_EPS = 1e-12

MAX_BINARY_ENTROPY = math.log(2.0)

DEFAULT_NUM_PASSES = 100
DEFAULT_THETA = 0.55


@dataclass(frozen=True)
class McPrediction:
    """One example's MC ensemble output and its uncertainty verdict."""

    per_pass_probs: tuple
    mean_prob: float
    entropy_nats: float
    label: int
    certain: bool
    threshold: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "McPrediction":
        d = dict(d)
        d["per_pass_probs"] = tuple(d["per_pass_probs"])
        return cls(**d)


def predictive_entropy(mean_prob: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Binary entropy (nats) of a probability, clamped away from {0, 1}.

    Ranges over [0, ln 2], maximal at 0.5 and monotone decreasing in
    the distance from 0.5.
    """
    p = np.clip(np.asarray(mean_prob, dtype=np.float64), ENTROPY_EPS,
                1.0 - ENTROPY_EPS)
    h = -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
    if np.isscalar(mean_prob) or np.ndim(mean_prob) == 0:
        return float(h)
    return h


def mc_forward(model: Model, examples: Sequence[EncodedExample], num_passes: int,
               rng: RngStream) -> np.ndarray:
    """Run ``num_passes`` dropout-active forward passes.

    Returns a ``[num_passes, n_examples]`` probability array. Pass ``t``
    draws its masks from the derived sub-stream ``rng.derive(t)``, so
    the multiset of outputs does not depend on execution order and
    passes may run concurrently.
    """
    if num_passes < 1:
        raise ValueError(f"num_passes must be >= 1, got {num_passes}")
    if not getattr(model, "has_dropout", False):
        raise ValueError(f"model kind {model.kind!r} has no dropout layer; "
                         "MC-dropout needs at least one")
    out = np.empty((num_passes, len(examples)))
    for t in range(num_passes):
        out[t] = predict_proba(model, examples, DropoutMode.INFERENCE_ACTIVE,
                               rng.derive(t))
    return out


def mc_mean(per_pass: np.ndarray) -> np.ndarray:
    """Column means with compensated summation (order-independent)."""
    num_passes = per_pass.shape[0]
    return np.array([math.fsum(col) / num_passes for col in per_pass.T])


def predict_with_abstention(model: Model, examples: Sequence[EncodedExample],
                            num_passes: int = DEFAULT_NUM_PASSES,
                            theta: float = DEFAULT_THETA,
                            rng: Optional[RngStream] = None) -> List[McPrediction]:
    """MC-averaged predictions with certain/uncertain flags.

    The predicted label is 1 iff the mean probability is at least 0.5;
    a prediction is certain iff its entropy is at most ``theta``.
    """
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    if rng is None:
        rng = RngStream(0)
    per_pass = mc_forward(model, examples, num_passes, rng)
    means = mc_mean(per_pass)
    predictions = []
    for i, mean in enumerate(means):
        entropy = predictive_entropy(float(mean))
        predictions.append(McPrediction(
            per_pass_probs=tuple(float(p) for p in per_pass[:, i]),
            mean_prob=float(mean),
            entropy_nats=entropy,
            label=int(mean >= 0.5),
            certain=entropy <= theta,
            threshold=theta,
        ))
    return predictions


@dataclass(frozen=True)
class HistogramBin:
    bin_low: float
    bin_high: float
    correct_count: int
    misclassified_count: int


def entropy_histogram(predictions: Sequence[McPrediction],
                      correctness: Sequence[bool],
                      bins: int) -> List[HistogramBin]:
    """Bin entropies uniformly over [0, ln 2], split by correctness."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if len(predictions) != len(correctness):
        raise ValueError("predictions and correctness lengths differ")
    edges = np.linspace(0.0, MAX_BINARY_ENTROPY, bins + 1)
    correct = np.zeros(bins, dtype=int)
    wrong = np.zeros(bins, dtype=int)
    for pred, ok in zip(predictions, correctness):
        idx = min(int(np.searchsorted(edges, pred.entropy_nats, side="right")) - 1,
                  bins - 1)
        idx = max(idx, 0)
        if ok:
            correct[idx] += 1
        else:
            wrong[idx] += 1
    return [HistogramBin(float(edges[i]), float(edges[i + 1]),
                         int(correct[i]), int(wrong[i]))
            for i in range(bins)]


def write_histogram(table: Sequence[HistogramBin], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "correct_count",
                         "misclassified_count"])
        for row in table:
            writer.writerow([repr(row.bin_low), repr(row.bin_high),
                             row.correct_count, row.misclassified_count])


@dataclass(frozen=True)
class ThetaSweepRow:
    theta: float
    n_certain: int
    n_uncertain: int
    coverage: float
    accuracy_certain_only: Optional[float]


def theta_sweep(predictions: Sequence[McPrediction],
                true_labels: Sequence[int],
                n_points: int = 15) -> List[ThetaSweepRow]:
    """Coverage/accuracy trade-off over a uniform grid of thresholds.

    Re-thresholds the stored entropies, so no extra forward passes are
    needed; meant for picking the abstention threshold on validation
    predictions.
    """
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    if len(predictions) != len(true_labels):
        raise ValueError("predictions and labels differ in length")
    entropies = np.array([p.entropy_nats for p in predictions])
    correct = np.array([p.label for p in predictions]) == np.asarray(true_labels)
    rows = []
    for theta in np.linspace(0.0, MAX_BINARY_ENTROPY, n_points):
        certain = entropies <= theta
        n_certain = int(certain.sum())
        rows.append(ThetaSweepRow(
            theta=float(theta),
            n_certain=n_certain,
            n_uncertain=len(predictions) - n_certain,
            coverage=n_certain / len(predictions),
            accuracy_certain_only=(float(correct[certain].mean())
                                   if n_certain else None),
        ))
    return rows


def write_theta_sweep(rows: Sequence[ThetaSweepRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "n_certain", "n_uncertain", "coverage",
                         "accuracy_certain_only"])
        for row in rows:
            writer.writerow([
                repr(row.theta), row.n_certain, row.n_uncertain,
                repr(row.coverage),
                "UNDEFINED" if row.accuracy_certain_only is None
                else repr(row.accuracy_certain_only),
            ])


def write_predictions(predictions: Sequence[McPrediction], path: Path,
                      true_labels: Optional[Sequence[int]] = None,
                      deterministic_probs: Optional[Sequence[float]] = None) -> None:
    """Serialize MC predictions as JSON-Lines.

    Optionally attaches the true label and the single dropout-off
    forward probability per row, so downstream reports can compare
    entropy-based abstention against plain probability thresholding.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for i, pred in enumerate(predictions):
            row = pred.to_dict()
            if true_labels is not None:
                row["true_label"] = int(true_labels[i])
            if deterministic_probs is not None:
                row["deterministic_prob"] = float(deterministic_probs[i])
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def probability_band_flags(probs: Sequence[float], band_low: float,
                           band_high: float) -> np.ndarray:
    """Uncertain-flags for plain probability thresholding.

    A prediction counts as uncertain when its probability falls inside
    the band, the non-ensemble analogue of an entropy threshold.
    """
    if not 0.0 <= band_low <= band_high <= 1.0:
        raise ValueError(f"need 0 <= band_low <= band_high <= 1, "
                         f"got [{band_low}, {band_high}]")
    p = np.asarray(probs, dtype=np.float64)
    return (p >= band_low) & (p <= band_high)


def read_predictions(path: Path) -> List[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
