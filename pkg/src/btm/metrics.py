"""Per-class recall and generalized-mean aggregates.

Worst-category performance is summarized by power means M_p of the
per-class recall vector: p=1 arithmetic, p=0 geometric, p=-1 harmonic,
p=-inf the minimum. Zero recalls are floored to a small positive value
before computing means with p <= 0, otherwise those means collapse to 0.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_RECALL_FLOOR = 1e-3

# Fixed column order shared by the JSON and CSV serializations.
REPORT_FIELDS = (
    "h_mean",
    "g_mean",
    "a_mean",
    "lowest_recall",
    "accuracy",
    "recalls",
    "zero_substituted",
)


@dataclass(frozen=True)
class RecallVector:
    """Per-class recall values, each in [0, 1]."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) == 0:
            raise ValueError("RecallVector must hold at least one class")
        for v in vals:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"recall {v} outside [0, 1]")
        object.__setattr__(self, "values", vals)

    @property
    def num_classes(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _coerce(values) -> np.ndarray:
    if isinstance(values, RecallVector):
        return values.as_array()
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a 1-D vector of values")
    return arr


def generalized_mean(values, p: float) -> float:
    """Power mean M_p of a vector of positive fractions.

    p may be any extended real: -inf gives the minimum, +inf the maximum,
    0 the geometric mean (computed in log space). Values must be strictly
    positive when p <= 0; run sanitize_recalls first if zeros may occur.
    """
    x = _coerce(values)
    if x.size == 0:
        raise ValueError("generalized mean of an empty vector is undefined")
    if p <= 0 and np.any(x <= 0.0):
        raise ValueError(
            "nonpositive values with p <= 0; apply sanitize_recalls before aggregating"
        )
    if math.isinf(p):
        return float(x.min() if p < 0 else x.max())
    if p == 0:
        return float(np.exp(np.mean(np.log(x))))
    # Factor out the dominant entry so x**p never overflows, and go through
    # expm1/log1p so tiny |p| stays accurate (continuity at p=0).
    m = float(x.max() if p > 0 else x.min())
    if m == 0.0:
        return 0.0
    with np.errstate(divide="ignore"):
        t = np.expm1(p * np.log(x / m))
    return float(m * np.exp(np.log1p(np.mean(t)) / p))


def per_class_recall(predicted_labels, true_labels, num_classes: int) -> RecallVector:
    """Fraction of each class's samples predicted correctly.

    Every class in [0, num_classes) must appear in true_labels at least
    once; balanced test sets guarantee that.
    """
    pred = np.asarray(predicted_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predicted and true label lists must be equal-length 1-D")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if true.size and (true.min() < 0 or true.max() >= num_classes):
        raise ValueError("true labels outside [0, num_classes)")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError("predicted labels outside [0, num_classes)")
    totals = np.bincount(true, minlength=num_classes)
    missing = np.nonzero(totals == 0)[0]
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no test samples")
    correct = np.bincount(true[pred == true], minlength=num_classes)
    return RecallVector(tuple(correct / totals))


def sanitize_recalls(values, floor: float = DEFAULT_RECALL_FLOOR):
    """Replace zero recalls with a small positive floor.

    Returns (sanitized, zero_substituted); the flag is True when any
    entry was replaced.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    x = _coerce(values)
    substituted = bool(np.any(x == 0.0))
    if substituted:
        x = np.where(x == 0.0, floor, x)
    return RecallVector(tuple(x)), substituted


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary: recall vector plus its generalized means.

    `recalls` holds the raw (pre-substitution) per-class recalls; the
    three means are computed on the sanitized vector so they stay ordered
    lowest_recall <= h_mean <= g_mean <= a_mean.
    """

    recalls: RecallVector
    harmonic_mean: float
    geometric_mean: float
    arithmetic_mean: float
    lowest_recall: float
    accuracy: float
    zero_substituted: bool

    @classmethod
    def from_recalls(cls, recalls: RecallVector, accuracy: float,
                     floor: float = DEFAULT_RECALL_FLOOR) -> "MetricsReport":
        sanitized, substituted = sanitize_recalls(recalls, floor)
        return cls(
            recalls=recalls,
            harmonic_mean=generalized_mean(sanitized, -1.0),
            geometric_mean=generalized_mean(sanitized, 0.0),
            arithmetic_mean=generalized_mean(sanitized, 1.0),
            lowest_recall=float(min(recalls.values)),
            accuracy=float(accuracy),
            zero_substituted=substituted,
        )

    def to_dict(self) -> dict:
        return {
            "h_mean": self.harmonic_mean,
            "g_mean": self.geometric_mean,
            "a_mean": self.arithmetic_mean,
            "lowest_recall": self.lowest_recall,
            "accuracy": self.accuracy,
            "recalls": list(self.recalls.values),
            "zero_substituted": self.zero_substituted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            recalls=RecallVector(tuple(d["recalls"])),
            harmonic_mean=float(d["h_mean"]),
            geometric_mean=float(d["g_mean"]),
            arithmetic_mean=float(d["a_mean"]),
            lowest_recall=float(d["lowest_recall"]),
            accuracy=float(d["accuracy"]),
            zero_substituted=bool(d["zero_substituted"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def csv_values(self) -> list:
        return [
            repr(self.harmonic_mean),
            repr(self.geometric_mean),
            repr(self.arithmetic_mean),
            repr(self.lowest_recall),
            repr(self.accuracy),
            ";".join(repr(v) for v in self.recalls.values),
            "true" if self.zero_substituted else "false",
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        writer.writerow(self.csv_values())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) != 2 or tuple(rows[0]) != REPORT_FIELDS:
            raise ValueError("malformed MetricsReport CSV")
        row = rows[1]
        return cls(
            recalls=RecallVector(tuple(float(v) for v in row[5].split(";"))),
            harmonic_mean=float(row[0]),
            geometric_mean=float(row[1]),
            arithmetic_mean=float(row[2]),
            lowest_recall=float(row[3]),
            accuracy=float(row[4]),
            zero_substituted=row[6] == "true",
        )


def predict(params, features: np.ndarray) -> np.ndarray:
    """Argmax class predictions; ties broken to the lowest class index."""
    from .nn import forward

    logits = forward(params, features)
    return np.argmax(logits, axis=1)


def evaluate(model, test_set, floor: float = DEFAULT_RECALL_FLOOR) -> MetricsReport:
    """Run inference over a test set and build the full metrics report.

    `model` may be a ParamVector or a Checkpoint. The test set must cover
    every class at least once. Deterministic: identical inputs produce
    bit-identical reports.
    """
    params = model.params if hasattr(model, "params") else model
    if test_set.dim != params.arch.in_dim:
        raise ValueError(
            f"feature dim {test_set.dim} does not match model input {params.arch.in_dim}"
        )
    if test_set.n_classes != params.arch.n_classes:
        raise ValueError(
            f"dataset has {test_set.n_classes} classes, model expects {params.arch.n_classes}"
        )
    pred = predict(params, test_set.features)
    recalls = per_class_recall(pred, test_set.labels, test_set.n_classes)
    accuracy = float(np.mean(pred == test_set.labels))
    return MetricsReport.from_recalls(recalls, accuracy, floor)
