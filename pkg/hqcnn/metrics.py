"""Confusion-matrix metrics, ROC analysis and report emitters.

Counts are indexed ``[true class, predicted class]``. Binary metrics take the
positive class index and score it one-vs-rest, so they also apply to a
multi-class matrix. A zero denominator yields 0.0; when a ``flags`` list is
passed, a message naming the metric is appended to it.
"""
import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc as trapezoid_auc
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import roc_curve

from hqcnn import ConfigurationError, Convention, DatasetId, ShapeError

# Positive class per dataset that reproduces the published binary tables.
DEFAULT_POSITIVE_CLASS = {DatasetId.D1: "covid19", DatasetId.D2: "pneumonia", DatasetId.D3: None}
DEFAULT_BETA = 2.0
TABLE_COLUMNS = ("acc", "sns", "spc", "prc", "f1")
# F-beta is also reported at these weights whatever beta is configured.
REPORTED_BETAS = (0.5, 2.0)
REPORT_COLUMNS = ("acc", "sns", "spc", "prc", "f1", "bacc", "fbeta", "fbeta_0.5", "fbeta_2", "fpr", "auc")


class Rounding(Enum):
    HALF_UP = "half_up"
    TRUNCATE = "truncate"


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise ShapeError(f"confusion matrix must be CxC with C >= 2, got shape {counts.shape}")
        if (counts < 0).any():
            raise ConfigurationError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_binary(cls, tp: int, fn: int, fp: int, tn: int, positive: int = 1) -> "ConfusionMatrix":
        """Two-class matrix with the given cells for ``positive`` (0 or 1)."""
        grid = np.array([[tn, fp], [fn, tp]])
        return cls(grid[::-1, ::-1] if positive == 0 else grid)


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ShapeError(f"y_true {y_true.shape} and y_pred {y_pred.shape} must be equal-length lists")
    if n_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {n_classes}")
    for name, ys in (("y_true", y_true), ("y_pred", y_pred)):
        if len(ys) and (ys.min() < 0 or ys.max() >= n_classes):
            raise ConfigurationError(f"{name} holds labels outside [0, {n_classes})")
    if len(y_true) == 0:
        return ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    return ConfusionMatrix(sk_confusion_matrix(y_true, y_pred, labels=list(range(n_classes))))


def binary_counts(cm: ConfusionMatrix, positive: int) -> Tuple[int, int, int, int]:
    """(TP, FN, FP, TN) with ``positive`` against all other classes."""
    if not 0 <= positive < cm.n_classes:
        raise ConfigurationError(f"positive class {positive} outside [0, {cm.n_classes})")
    c = cm.counts
    tp = int(c[positive, positive])
    fn = int(c[positive].sum()) - tp
    fp = int(c[:, positive].sum()) - tp
    tn = cm.total - tp - fn - fp
    return tp, fn, fp, tn


def _ratio(num: float, den: float, name: str, flags: Optional[List[str]]) -> float:
    if den == 0:
        if flags is not None:
            flags.append(f"{name}: zero denominator, reported as 0")
        return 0.0
    return num / den


def accuracy(cm: ConfusionMatrix, flags: Optional[List[str]] = None) -> float:
    return _ratio(float(np.trace(cm.counts)), cm.total, "accuracy", flags)


def sensitivity(cm: ConfusionMatrix, positive: int, flags: Optional[List[str]] = None) -> float:
    tp, fn, _, _ = binary_counts(cm, positive)
    return _ratio(tp, tp + fn, "sensitivity", flags)


def specificity(cm: ConfusionMatrix, positive: int, flags: Optional[List[str]] = None) -> float:
    _, _, fp, tn = binary_counts(cm, positive)
    return _ratio(tn, tn + fp, "specificity", flags)


def precision(cm: ConfusionMatrix, positive: int, flags: Optional[List[str]] = None) -> float:
    tp, _, fp, _ = binary_counts(cm, positive)
    return _ratio(tp, tp + fp, "precision", flags)


def false_positive_rate(cm: ConfusionMatrix, positive: int, flags: Optional[List[str]] = None) -> float:
    _, _, fp, tn = binary_counts(cm, positive)
    return _ratio(fp, fp + tn, "false_positive_rate", flags)


def f1(cm: ConfusionMatrix, positive: int, flags: Optional[List[str]] = None) -> float:
    tp, fn, fp, _ = binary_counts(cm, positive)
    return _ratio(2 * tp, 2 * tp + fp + fn, "f1", flags)


def balanced_accuracy(cm: ConfusionMatrix, positive: int, convention: Convention = Convention.STANDARD,
                      flags: Optional[List[str]] = None) -> float:
    """STANDARD: (TPR + TNR) / 2. PUBLISHED: (TP/(TP+FP) + TN/(TN+FN)) / 2."""
    tp, fn, fp, tn = binary_counts(cm, positive)
    if convention is Convention.STANDARD:
        return (_ratio(tp, tp + fn, "balanced_accuracy", flags) + _ratio(tn, tn + fp, "balanced_accuracy", flags)) / 2
    return (_ratio(tp, tp + fp, "balanced_accuracy", flags) + _ratio(tn, tn + fn, "balanced_accuracy", flags)) / 2


def fbeta(cm: ConfusionMatrix, positive: int, beta: float = DEFAULT_BETA, convention: Convention = Convention.STANDARD,
          flags: Optional[List[str]] = None) -> float:
    """STANDARD: (1+b^2)PR / (b^2 P + R). PUBLISHED: (1+b^2)PR / (b^2 (P + R))."""
    if beta <= 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    p = precision(cm, positive, flags)
    r = sensitivity(cm, positive, flags)
    b2 = beta * beta
    den = b2 * p + r if convention is Convention.STANDARD else b2 * (p + r)
    value = _ratio((1 + b2) * p * r, den, "fbeta", flags)
    if flags is not None and not 0.0 <= value <= 1.0:
        flags.append(f"fbeta(beta={beta:g}, {convention.value}) = {value:.4f} lies outside [0, 1]")
    return value


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self) -> str:
        lines = ["threshold,fpr,tpr"]
        lines += [f"{t!r},{f!r},{p!r}" for t, f, p in zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist())]
        return "\n".join(lines) + "\n"


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Threshold sweep over the distinct scores, ties grouped into one step.

    The curve runs from (0, 0) to (1, 1); the area is trapezoidal, which
    equals the Mann-Whitney U statistic over n+ * n-.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal-length lists")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ConfigurationError(f"ROC labels must be 0/1, got {sorted(set(labels.tolist()))}")
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("ROC analysis needs at least one positive and one negative sample")
    fpr, tpr, thresholds = roc_curve(labels, scores, pos_label=1, drop_intermediate=False)
    return RocCurve(fpr, tpr, thresholds, float(trapezoid_auc(fpr, tpr)))


def _safe_roc(scores, labels, name: str, flags: List[str]) -> Optional[RocCurve]:
    try:
        return roc_auc(scores, labels)
    except ConfigurationError as e:
        flags.append(f"auc[{name}]: {e}")
        return None


def class_scores(cm: ConfusionMatrix, positive: int, beta: float = DEFAULT_BETA,
                 convention: Convention = Convention.STANDARD, flags: Optional[List[str]] = None) -> Dict[str, float]:
    tp, fn, fp, tn = binary_counts(cm, positive)
    return {
        "acc": _ratio(tp + tn, cm.total, "accuracy", flags),
        "sns": sensitivity(cm, positive, flags),
        "spc": specificity(cm, positive, flags),
        "prc": precision(cm, positive, flags),
        "f1": f1(cm, positive, flags),
        "bacc": balanced_accuracy(cm, positive, convention, flags),
        "fbeta": fbeta(cm, positive, beta, convention, flags),
        **{f"fbeta_{b:g}": fbeta(cm, positive, b, convention, flags) for b in REPORTED_BETAS},
        "fpr": false_positive_rate(cm, positive, flags),
    }


@dataclass
class MetricsReport:
    class_names: Tuple[str, ...]
    confusion: ConfusionMatrix
    overall: Dict[str, float]
    per_class: Dict[str, Dict[str, float]]
    positive_class: Optional[str] = None
    beta: float = DEFAULT_BETA
    convention: Convention = Convention.STANDARD
    warnings: List[str] = field(default_factory=list)
    roc: Dict[str, RocCurve] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        def clean(scores):
            return {k: (None if v is None or np.isnan(v) else v) for k, v in scores.items()}

        return {
            "class_names": list(self.class_names),
            "positive_class": self.positive_class,
            "beta": self.beta,
            "convention": self.convention.value,
            "confusion": self.confusion.counts.tolist(),
            "overall": clean(self.overall),
            "per_class": {name: clean(scores) for name, scores in self.per_class.items()},
            "warnings": list(self.warnings),
        }


def _check_probas(cm: ConfusionMatrix, probas, y_true) -> Tuple[np.ndarray, np.ndarray]:
    probas = np.asarray(probas, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if probas.ndim != 2 or probas.shape != (len(y_true), cm.n_classes):
        raise ShapeError(f"probabilities {probas.shape} do not match {len(y_true)} samples x {cm.n_classes} classes")
    if len(y_true) != cm.total:
        raise ShapeError(f"{len(y_true)} labels but the confusion matrix holds {cm.total} samples")
    return probas, y_true


def per_class_report(cm: ConfusionMatrix, probas, y_true, class_names: Sequence[str],
                     beta: float = DEFAULT_BETA, convention: Convention = Convention.STANDARD) -> MetricsReport:
    """Each class scored one-vs-rest; overall values are macro averages plus top-1 accuracy."""
    probas, y_true = _check_probas(cm, probas, y_true)
    if len(class_names) != cm.n_classes:
        raise ShapeError(f"{len(class_names)} class names for a {cm.n_classes}-class matrix")
    flags: List[str] = []
    per_class, rocs = {}, {}
    for k, name in enumerate(class_names):
        scores = class_scores(cm, k, beta, convention, flags)
        curve = _safe_roc(probas[:, k], (y_true == k).astype(np.int64), name, flags)
        scores["auc"] = curve.auc if curve is not None else float("nan")
        if curve is not None:
            rocs[name] = curve
        per_class[name] = scores
    overall = {col: float(np.mean([s[col] for s in per_class.values()])) for col in REPORT_COLUMNS if col != "auc"}
    aucs = [s["auc"] for s in per_class.values() if not np.isnan(s["auc"])]
    overall["auc"] = float(np.mean(aucs)) if aucs else float("nan")
    overall["acc"] = accuracy(cm, flags)
    warnings = list(dict.fromkeys(flags))
    return MetricsReport(tuple(class_names), cm, overall, per_class, None, beta, convention, warnings, rocs)


def binary_report(cm: ConfusionMatrix, probas, y_true, class_names: Sequence[str], positive: int,
                  beta: float = DEFAULT_BETA, convention: Convention = Convention.STANDARD) -> MetricsReport:
    """Scores with ``positive`` as the positive class; ``per_class`` holds both orientations."""
    if cm.n_classes != 2:
        raise ShapeError(f"binary report needs a 2-class matrix, got {cm.n_classes}")
    report = per_class_report(cm, probas, y_true, class_names, beta, convention)
    report.overall = dict(report.per_class[class_names[positive]])
    report.overall["acc"] = accuracy(cm)
    report.positive_class = class_names[positive]
    return report


def format_percent(value: Optional[float], rounding: Rounding = Rounding.HALF_UP) -> str:
    """A rate in [0, 1] as a percentage with one decimal."""
    if value is None or np.isnan(value):
        return "nan"
    mode = ROUND_HALF_UP if rounding is Rounding.HALF_UP else ROUND_DOWN
    return str(Decimal(repr(round(value * 100, 9))).quantize(Decimal("0.1"), rounding=mode))


def format_table_row(scores: Dict[str, float], columns: Sequence[str] = TABLE_COLUMNS,
                     rounding: Rounding = Rounding.HALF_UP) -> List[str]:
    return [format_percent(scores[c], rounding) for c in columns]


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report: MetricsReport, rounding: Rounding = Rounding.HALF_UP) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("scope",) + REPORT_COLUMNS)
    writer.writerow(["overall"] + format_table_row(report.overall, REPORT_COLUMNS, rounding))
    for name, scores in report.per_class.items():
        writer.writerow([name] + format_table_row(scores, REPORT_COLUMNS, rounding))
    return buf.getvalue()


def confusion_csv(cm: ConfusionMatrix, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted"] + list(class_names))
    for name, row in zip(class_names, cm.counts.tolist()):
        writer.writerow([name] + row)
    return buf.getvalue()
