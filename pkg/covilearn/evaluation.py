"""
Screening metrics with covid as the positive class.

Undefined ratios (zero denominator) are `None` in Python and `null` in JSON, never 0.
"""

from collections.abc import Mapping, Sequence
import csv
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from covilearn.architectures import ArchitectureGraph
from covilearn.config import ConvMethod
from covilearn.dataset import POSITIVE, DatasetManifest, label_from_one_hot, load_samples
from covilearn.errors import ArgumentError, FormatError
from covilearn.tensor import Tensor
from covilearn.training import predict

logger = logging.getLogger(__name__)

REPORT_DECIMALS = 4


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ArgumentError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _is_positive(label: Any) -> bool:
    if isinstance(label, str):
        return label == POSITIVE
    return bool(label)


def confusion(predictions: Sequence[Any], truths: Sequence[Any]) -> ConfusionMatrix:
    """Labels are class names or booleans (True = covid)."""
    if len(predictions) != len(truths):
        raise ArgumentError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise ArgumentError("confusion matrix needs at least one sample")
    predicted = np.array([_is_positive(p) for p in predictions])
    actual = np.array([_is_positive(t) for t in truths])
    return ConfusionMatrix(
        tp=int((predicted & actual).sum()),
        tn=int((~predicted & ~actual).sum()),
        fp=int((predicted & ~actual).sum()),
        fn=int((~predicted & actual).sum()),
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def metrics(cm: ConfusionMatrix) -> Metrics:
    return Metrics(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
    )


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float], ...]
    thresholds: tuple[float, ...]
    auc: float


def roc_auc(scores: Sequence[float] | np.ndarray, truths: Sequence[Any]) -> RocCurve:
    """
    Sweep every distinct score as a threshold (predict positive when score >= threshold), starting
    from a +inf sentinel at (0, 0). Tied scores move along a diagonal, so the trapezoidal area
    counts each tied positive/negative pair as one half.
    """
    values = np.asarray(scores, dtype=np.float64)
    if values.ndim != 1 or len(values) != len(truths):
        raise ArgumentError(f"{values.shape} scores for {len(truths)} truths")
    if np.isnan(values).any():
        raise ArgumentError("ROC scores contain NaN")
    actual = np.array([_is_positive(t) for t in truths], dtype=bool)
    positives = int(actual.sum())
    negatives = len(actual) - positives
    if positives == 0 or negatives == 0:
        raise ArgumentError("ROC needs at least one positive and one negative sample")

    thresholds = np.unique(values)[::-1]
    order = np.argsort(-values, kind="stable")
    sorted_scores = values[order]
    sorted_actual = actual[order]
    # Index one past the last sample scoring >= each threshold.
    cut = np.searchsorted(-sorted_scores, -thresholds, side="right")
    tp = np.concatenate([[0], np.cumsum(sorted_actual)])[cut]
    fp = cut - tp
    tpr = np.concatenate([[0.0], tp / positives])
    fpr = np.concatenate([[0.0], fp / negatives])
    area = float(np.trapezoid(tpr, fpr))
    return RocCurve(
        points=tuple(zip(fpr.tolist(), tpr.tolist())),
        thresholds=(float("inf"), *thresholds.tolist()),
        auc=area,
    )


def _rounded(value: float | None) -> float | None:
    return None if value is None else round(value, REPORT_DECIMALS)


@dataclass(frozen=True)
class MetricsReport:
    confusion: ConfusionMatrix
    metrics: Metrics
    roc: RocCurve | None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        cm = self.confusion
        return {
            "confusion": {"tp": cm.tp, "tn": cm.tn, "fp": cm.fp, "fn": cm.fn},
            "accuracy": _rounded(self.metrics.accuracy),
            "sensitivity": _rounded(self.metrics.sensitivity),
            "specificity": _rounded(self.metrics.specificity),
            "auc": None if self.roc is None else _rounded(self.roc.auc),
            "roc": [] if self.roc is None else [list(point) for point in self.roc.points],
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_json(cls, document: Mapping[str, Any]) -> "MetricsReport":
        try:
            cm = ConfusionMatrix(**document["confusion"])
            roc = None
            if document.get("auc") is not None:
                points = tuple((float(x), float(y)) for x, y in document["roc"])
                roc = RocCurve(points, (), float(document["auc"]))
            reported = Metrics(document["accuracy"], document["sensitivity"], document["specificity"])
            return cls(cm, reported, roc, document.get("provenance", {}))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed metrics report: {e}") from e

    def summary(self) -> str:
        def show(value: float | None) -> str:
            return "undefined" if value is None else f"{value:.{REPORT_DECIMALS}f}"

        cm = self.confusion
        lines = [
            f"samples      {cm.total}",
            f"TP {cm.tp}  FN {cm.fn}  TN {cm.tn}  FP {cm.fp}",
            f"accuracy     {show(self.metrics.accuracy)}",
            f"sensitivity  {show(self.metrics.sensitivity)}",
            f"specificity  {show(self.metrics.specificity)}",
            f"auc          {show(None if self.roc is None else self.roc.auc)}",
        ]
        return "\n".join(lines)


def build_report(
    probabilities: np.ndarray, truths: Sequence[Any], provenance: Mapping[str, Any] | None = None
) -> MetricsReport:
    """Confusion at argmax, ROC over the covid probability (column 0)."""
    predicted = [index == 0 for index in probabilities.argmax(axis=1)]
    cm = confusion(predicted, truths)
    actual = [_is_positive(t) for t in truths]
    roc = roc_auc(probabilities[:, 0], actual) if 0 < sum(actual) < len(actual) else None
    if roc is None:
        logger.warning("evaluation set has a single class; ROC and AUC are undefined")
    return MetricsReport(cm, metrics(cm), roc, dict(provenance or {}))


def evaluate(
    graph: ArchitectureGraph,
    params: Mapping[str, Tensor],
    manifest: DatasetManifest,
    *,
    conv_method: ConvMethod = "direct",
    mean: tuple[float, float, float] | None = None,
    provenance: Mapping[str, Any] | None = None,
) -> MetricsReport:
    """
    Evaluate on the manifest's test split, or on every record when the manifest carries no split.
    `mean` is subtracted from each preprocessed image when given.
    """
    records = manifest.of_split("test") if manifest.is_split else manifest
    if len(records) == 0:
        raise ArgumentError("evaluation split is empty")
    samples = load_samples(records, size=graph.input_shape[-1])
    images = np.stack([s.pixels.numpy() for s in samples])
    if mean is not None:
        images = images - np.asarray(mean).reshape(1, 3, 1, 1)
    predictions = predict(graph, params, images, conv_method=conv_method)
    probabilities = np.stack([p.probabilities.numpy() for p in predictions])
    truths = [label_from_one_hot(s.label) for s in samples]

    block = {"variant": graph.variant, "samples": len(samples), "subtract_mean": mean is not None}
    if mean is not None:
        block["mean"] = list(mean)
    block.update(provenance or {})
    report = build_report(probabilities, truths, block)
    logger.info("evaluated %s on %d samples: %s", graph.variant, len(samples), report.metrics)
    return report


def write_report(path: Path, report: MetricsReport) -> None:
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")


def read_report(path: Path) -> MetricsReport:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not JSON: {e}") from e
    return MetricsReport.from_json(document)


def write_roc_csv(path: Path, roc: RocCurve) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fpr", "tpr"])
        for threshold, (fpr, tpr) in zip(roc.thresholds, roc.points, strict=True):
            writer.writerow([threshold, fpr, tpr])
