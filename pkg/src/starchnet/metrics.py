"""Confusion matrix and per-class precision / recall / F1 reports.

Rows of a confusion matrix are actual classes and columns are predicted
classes.  Rates with a zero denominator are reported as 0.0.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, MetricError

REPORT_FORMATS = ("text", "csv", "json")
CSV_HEADER = ("class", "precision", "recall", "f1_score", "support")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ArgumentError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ArgumentError("confusion matrix counts must be non-negative")
        names = tuple(self.class_names) if self.class_names is not None else tuple(str(i) for i in range(len(counts)))
        if len(names) != len(counts):
            raise ArgumentError(f"{len(names)} class names for a {len(counts)}x{len(counts)} matrix")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["actual/predicted", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            writer.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(actual: Sequence[int], predicted: Sequence[int], k: int, class_names=None) -> ConfusionMatrix:
    actual = np.asarray(actual, dtype=np.int64).reshape(-1)
    predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
    if actual.shape != predicted.shape:
        raise ArgumentError(f"actual and predicted lengths differ: {actual.size} vs {predicted.size}")
    for label, values in (("actual", actual), ("predicted", predicted)):
        bad = values[(values < 0) | (values >= k)]
        if bad.size:
            raise ArgumentError(f"{label} class index {int(bad[0])} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (actual, predicted), 1)
    return ConfusionMatrix(counts, class_names)


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassReport:
    rows: tuple[ClassMetrics, ...]
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    total: int

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"class": r.name, "precision": r.precision, "recall": r.recall, "f1_score": r.f1, "support": r.support}
                for r in self.rows
            ],
            "accuracy": self.accuracy,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "total": self.total,
        }


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def per_class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    counts = cm.counts
    tp = np.diag(counts)
    predicted_totals = counts.sum(axis=0)
    actual_totals = counts.sum(axis=1)
    rows = []
    for k, name in enumerate(cm.class_names):
        p = _ratio(tp[k], predicted_totals[k])
        r = _ratio(tp[k], actual_totals[k])
        f1 = _ratio(2 * p * r, p + r)
        rows.append(ClassMetrics(name, p, r, f1, int(actual_totals[k])))
    return rows


def weighted_aggregate(rows: Sequence[ClassMetrics]) -> tuple[float, float, float]:
    """Support-weighted mean of precision, recall and F1."""
    total = sum(r.support for r in rows)
    if total == 0:
        raise MetricError("weighted metrics need at least one class with nonzero support")
    return (
        sum(r.precision * r.support for r in rows) / total,
        sum(r.recall * r.support for r in rows) / total,
        sum(r.f1 * r.support for r in rows) / total,
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


def classification_report(cm: ConfusionMatrix) -> ClassReport:
    rows = per_class_metrics(cm)
    wp, wr, wf = weighted_aggregate(rows)
    return ClassReport(tuple(rows), accuracy(cm), wp, wr, wf, cm.total)


def report(cm: ConfusionMatrix, class_names=None, fmt: str = "text") -> str:
    """Serialize the class report of ``cm`` as text, CSV or JSON.

    Rates are rendered with 6 decimals in text and CSV; JSON keeps full
    precision.  An empty class list produces header-only output.
    """
    if fmt not in REPORT_FORMATS:
        raise ArgumentError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    if class_names is not None:
        cm = ConfusionMatrix(cm.counts, tuple(class_names))
    if cm.num_classes == 0:
        return {
            "csv": ",".join(CSV_HEADER) + "\n",
            "json": json.dumps({"classes": []}) + "\n",
            "text": _text_header() + "\n",
        }[fmt]
    rep = classification_report(cm)
    if fmt == "json":
        return json.dumps(rep.to_dict(), indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rep.rows:
            writer.writerow([r.name, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}", r.support])
        writer.writerow(["weighted avg", f"{rep.weighted_precision:.6f}", f"{rep.weighted_recall:.6f}", f"{rep.weighted_f1:.6f}", rep.total])
        writer.writerow(["accuracy", "", "", f"{rep.accuracy:.6f}", rep.total])
        return buf.getvalue()

    width = max(12, *(len(r.name) for r in rep.rows))
    lines = [_text_header(width)]
    for r in rep.rows:
        lines.append(f"{r.name:<{width}} {r.precision:>10.6f} {r.recall:>10.6f} {r.f1:>10.6f} {r.support:>8d}")
    lines.append("")
    lines.append(f"{'accuracy':<{width}} {'':>10} {'':>10} {rep.accuracy:>10.6f} {rep.total:>8d}")
    lines.append(
        f"{'weighted avg':<{width}} {rep.weighted_precision:>10.6f} {rep.weighted_recall:>10.6f} "
        f"{rep.weighted_f1:>10.6f} {rep.total:>8d}"
    )
    return "\n".join(lines) + "\n"


def _text_header(width: int = 12) -> str:
    return f"{'class':<{width}} {'precision':>10} {'recall':>10} {'f1_score':>10} {'support':>8}"
