"""
Confusion matrices, classification reports and frequency baselines.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from sklearn import metrics

from artifacts import write_records

REPORT_SCHEMA = "report"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes"""
    counts: np.ndarray

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def supports(self):
        return self.counts.sum(axis=1)


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    zero_division: bool = False


@dataclass
class ClassificationReport:
    classes: List[ClassMetrics]
    accuracy: float
    micro: Dict[str, float] = field(default_factory=dict)
    macro: Dict[str, float] = field(default_factory=dict)
    weighted: Dict[str, float] = field(default_factory=dict)

    @property
    def support(self):
        return sum(c.support for c in self.classes)

    def flagged(self):
        """Classes whose precision or recall fell back to 0 on a zero denominator"""
        return [c.name for c in self.classes if c.zero_division]


def confusion(y_true, y_pred, num_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"y_true {y_true.shape} and y_pred {y_pred.shape} differ in shape")
    for name, values in (("y_true", y_true), ("y_pred", y_pred)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(f"{name} holds labels outside 0..{num_classes - 1}")
    counts = metrics.confusion_matrix(y_true, y_pred, labels=list(range(num_classes)))
    return ConfusionMatrix(counts.astype(np.int64))


def normalize(cm):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    counts = counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def _expand(counts):
    """One (true, predicted, weight) triple per confusion cell"""
    k = counts.shape[0]
    y_true, y_pred = np.divmod(np.arange(k * k), k)
    return y_true, y_pred, counts.ravel().astype(np.float64)


def report(cm, class_names=None):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    k = counts.shape[0]
    if k < 2:
        raise ValueError("A classification report needs at least two classes")
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    labels = list(range(k))
    y_true, y_pred, weight = _expand(counts)

    def scores(average):
        return metrics.precision_recall_fscore_support(
            y_true, y_pred, labels=labels, average=average, sample_weight=weight, zero_division=0)

    precision, recall, f1, _ = scores(None)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    classes = [
        ClassMetrics(
            name=names[c],
            precision=float(precision[c]),
            recall=float(recall[c]),
            f1=float(f1[c]),
            support=int(support[c]),
            zero_division=bool(predicted[c] == 0 or support[c] == 0),
        )
        for c in range(k)
    ]

    total = int(counts.sum())
    accuracy = float(np.trace(counts)) / total if total else 0.0
    averages = {}
    for average in ("micro", "macro", "weighted"):
        p, r, f, _ = scores(average) if total else (0.0, 0.0, 0.0, None)
        averages[average] = {"precision": float(p), "recall": float(r), "f1": float(f)}
    return ClassificationReport(classes, accuracy, **averages)


def baseline_accuracy(supports):
    """Majority-class rate; `supports` is a mapping class -> count or a sequence of counts"""
    values = list(supports.values()) if isinstance(supports, dict) else list(supports)
    if not values or sum(values) == 0:
        raise ValueError("baseline_accuracy needs at least one non-empty class")
    return max(values) / sum(values)


def format_report(rep, digits=2):
    """Aligned text table: precision, recall, F1-score, support per class and averages"""
    width = max(12, max(len(c.name) for c in rep.classes) + 2)
    col = 10
    lines = [f"{'':>{width}}{'precision':>{col}}{'recall':>{col}}{'f1-score':>{col}}{'support':>{col}}", ""]

    def row(label, p, r, f, s):
        return f"{label:>{width}}{p:>{col}.{digits}f}{r:>{col}.{digits}f}{f:>{col}.{digits}f}{s:>{col}}"

    for c in rep.classes:
        flag = " *" if c.zero_division else ""
        lines.append(row(c.name, c.precision, c.recall, c.f1, c.support) + flag)
    lines.append("")
    lines.append(f"{'accuracy':>{width}}{'':>{col}}{'':>{col}}{rep.accuracy:>{col}.{digits}f}{rep.support:>{col}}")
    for label, avg in (("micro avg", rep.micro), ("macro avg", rep.macro), ("weighted avg", rep.weighted)):
        lines.append(row(label, avg["precision"], avg["recall"], avg["f1"], rep.support))
    if rep.flagged():
        lines.append("")
        lines.append("* precision or recall undefined (no predicted or no true samples), reported as 0")
    return "\n".join(lines) + "\n"


def report_to_record(rep):
    return {
        "classes": [
            {
                "name": c.name,
                "precision": c.precision,
                "recall": c.recall,
                "f1": c.f1,
                "support": c.support,
                "zero_division": c.zero_division,
            }
            for c in rep.classes
        ],
        "accuracy": rep.accuracy,
        "micro": rep.micro,
        "macro": rep.macro,
        "weighted": rep.weighted,
    }


def save_report(path, rep, cm, config_hash="", meta=None):
    record = report_to_record(rep)
    record["confusion"] = cm.counts.tolist()
    return write_records(path, REPORT_SCHEMA, [record], config_hash, meta)


def save_confusion_grid(path, cm, normalized=True):
    """Write the (normalised) confusion matrix as a CSV grid for external plotting"""
    grid = normalize(cm) if normalized else cm.counts
    fmt = "%.6f" if normalized else "%d"
    np.savetxt(path, grid, delimiter=",", fmt=fmt)


def summarize_predictions(y_true, y_pred, class_names: Sequence[str]):
    """Confusion matrix and report in one call"""
    cm = confusion(y_true, y_pred, len(class_names))
    return cm, report(cm, class_names)
