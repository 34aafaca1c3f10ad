"""Overall accuracy, macro ("class-balanced") F1, confusion matrices and oracle fusion."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DataError(f"predictions {preds.shape} and labels {labels.shape} must be equal-length vectors")
    if len(labels) == 0:
        raise DataError("no samples to score")
    return preds, labels


def overall_accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """``counts[true, pred]``."""
    preds, labels = _pair(preds, labels)
    for name, v in (("prediction", preds), ("label", labels)):
        if v.min() < 0 or v.max() >= num_classes:
            raise DataError(f"{name} index outside [0, {num_classes}): {v.min()}..{v.max()}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def class_balanced_f1(preds, labels, num_classes: int) -> tuple[float, np.ndarray]:
    """Unweighted mean of one-vs-rest F1 scores.

    A class that is neither present nor predicted scores 0 (with a warning)
    rather than being dropped from the mean.
    """
    preds, labels = _pair(preds, labels)
    if labels.max() >= num_classes:
        raise DataError(f"num_classes={num_classes} but labels reach {labels.max()}")
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    per_class = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    absent = np.flatnonzero(denom == 0)
    if len(absent):
        warnings.warn(f"classes {absent.tolist()} have no support and no predictions; F1 set to 0",
                      UserWarning, stacklevel=2)
    return float(per_class.mean()), per_class


def oracle_fusion(preds_a, preds_b, labels) -> float:
    """Accuracy of an oracle that picks whichever model is right."""
    preds_a, labels = _pair(preds_a, labels)
    preds_b, _ = _pair(preds_b, labels)
    return float(np.mean((preds_a == labels) | (preds_b == labels)))


@dataclass
class EvalReport:
    overall_accuracy: float
    macro_f1: float
    per_class_f1: dict[str, float]
    confusion: list[list[int]]
    n_samples: int
    label_names: list[str]
    oracle_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "overall_accuracy": self.overall_accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": self.per_class_f1,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
            "label_names": self.label_names,
            "oracle_accuracy": self.oracle_accuracy,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred", *self.label_names])
        for name, row in zip(self.label_names, self.confusion):
            writer.writerow([name, *row])
        return buf.getvalue()

    def f1_table(self) -> str:
        """Per-class F1 as a two-row plain-text table, classes as columns."""
        width = max(6, *(len(n) for n in self.label_names))
        head = " ".join(f"{n:>{width}}" for n in self.label_names)
        vals = " ".join(f"{self.per_class_f1[n]:>{width}.2f}" for n in self.label_names)
        return f"{'':>8} {head} {'OA':>6}\n{'F1':>8} {vals} {100 * self.overall_accuracy:>6.1f}\n"


def evaluate(preds, labels, label_names: list[str], preds_other=None) -> EvalReport:
    """Full report; ``preds_other`` (a second model's predictions) adds the oracle accuracy."""
    k = len(label_names)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        macro, per_class = class_balanced_f1(preds, labels, k)
    cm = confusion_matrix(preds, labels, k)
    oracle = oracle_fusion(preds, preds_other, labels) if preds_other is not None else None
    return EvalReport(
        overall_accuracy=overall_accuracy(preds, labels), macro_f1=macro,
        per_class_f1={n: float(f) for n, f in zip(label_names, per_class)},
        confusion=cm.tolist(), n_samples=int(len(labels)), label_names=list(label_names),
        oracle_accuracy=oracle)


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvalReport",
    "type": "object",
    "required": ["overall_accuracy", "macro_f1", "per_class_f1", "confusion", "n_samples",
                 "label_names", "oracle_accuracy"],
    "properties": {
        "overall_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "per_class_f1": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "n_samples": {"type": "integer", "minimum": 1},
        "label_names": {"type": "array", "items": {"type": "string"}},
        "oracle_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
}
