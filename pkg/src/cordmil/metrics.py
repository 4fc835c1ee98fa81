"""Classification metrics: confusion matrix, balanced accuracy,
sensitivity/specificity, and one-vs-rest AUROC.

Balanced accuracy is the unweighted mean of per-class recalls over the
classes that actually appear in the truth; absent classes are excluded
rather than counted as zero so small validation splits are not punished.
AUROC is the Mann-Whitney pairwise win rate, (wins + 0.5 * ties) / (n_pos
* n_neg), computed via average ranks, which is exactly equal to pair
enumeration.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .validation import check_labels

__all__ = [
    "ConfusionMatrix",
    "MetricReport",
    "confusion",
    "balanced_accuracy",
    "sensitivity_specificity",
    "auroc_binary",
    "macro_auroc",
    "metric_report",
]


@dataclass
class ConfusionMatrix:
    """Count matrix with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"counts must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        self.counts = c

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def proportions(self) -> np.ndarray:
        """Row-normalized counts; rows with no samples become zeros."""
        row = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            p = np.where(row > 0, self.counts / np.maximum(row, 1), 0.0)
        return p

    def to_csv(self, path) -> None:
        """Write counts followed by row-normalized proportions."""
        props = self.proportions()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["section"] + [f"pred_{j}" for j in range(self.n_classes)])
            for i, row in enumerate(self.counts):
                w.writerow([f"count_true_{i}"] + [int(v) for v in row])
            for i, row in enumerate(props):
                w.writerow([f"prop_true_{i}"] + [repr(float(v)) for v in row])


@dataclass
class MetricReport:
    balanced_accuracy: float
    macro_auroc: float
    macro_sensitivity: float
    macro_specificity: float
    per_class_recalls: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        payload = {
            "balanced_accuracy": self.balanced_accuracy,
            "macro_auroc": self.macro_auroc,
            "macro_sensitivity": self.macro_sensitivity,
            "macro_specificity": self.macro_specificity,
            "per_class_recalls": self.per_class_recalls,
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def confusion(y_true, y_pred, n_classes: int = 3) -> ConfusionMatrix:
    """Tally exact counts; rows are truth, columns are predictions."""
    t = check_labels(y_true, n_classes, "y_true")
    p = check_labels(y_pred, n_classes, "y_pred")
    if len(t) != len(p):
        raise ValueError(f"length mismatch: {len(t)} true vs {len(p)} predicted")
    if len(t) < 1:
        raise ValueError("need at least one sample")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _present_recalls(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    row_sums = cm.counts.sum(axis=1)
    present = row_sums > 0
    if not present.any():
        raise ValueError("all rows empty: no true samples in confusion matrix")
    diag = np.diag(cm.counts)
    recalls = diag[present] / row_sums[present]
    return recalls, present


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean of per-class recalls over classes present in the truth."""
    recalls, _ = _present_recalls(cm)
    return float(recalls.mean())


def sensitivity_specificity(cm: ConfusionMatrix) -> tuple[float, float]:
    """Macro one-vs-rest sensitivity and specificity.

    Macro sensitivity equals balanced accuracy by definition. Specificity
    for class c is TN / (TN + FP) over the samples whose truth is not c;
    classes with no negative samples are excluded from the macro mean.
    """
    recalls, present = _present_recalls(cm)
    total = cm.total
    row_sums = cm.counts.sum(axis=1)
    col_sums = cm.counts.sum(axis=0)
    specs = []
    for c in np.flatnonzero(present):
        negatives = total - row_sums[c]
        if negatives == 0:
            continue
        fp = col_sums[c] - cm.counts[c, c]
        tn = negatives - fp
        specs.append(tn / negatives)
    if not specs:
        raise ValueError("specificity undefined: no class has negative samples")
    return float(recalls.mean()), float(np.mean(specs))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(scores, positive) -> float:
    """Mann-Whitney AUROC: (wins + 0.5 * ties) / (n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise ValueError("scores and positive flags must be equal-length 1-D")
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUROC: need at least one positive and one negative")
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc(probabilities, y_true) -> float:
    """Unweighted mean of one-vs-rest AUROCs, one per class column."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probabilities must be 2-D, got shape {p.shape}")
    n_classes = p.shape[1]
    t = check_labels(y_true, n_classes, "y_true")
    if len(t) != p.shape[0]:
        raise ValueError("probabilities and labels length mismatch")
    aucs = []
    for c in range(n_classes):
        flags = t == c
        if not flags.any():
            raise ValueError(f"missing class {c} in y_true")
        aucs.append(auroc_binary(p[:, c], flags))
    return float(np.mean(aucs))


def metric_report(y_true, y_pred, probabilities, n_classes: int = 3) -> MetricReport:
    """Assemble the standard report from predictions and probabilities."""
    cm = confusion(y_true, y_pred, n_classes)
    recalls, _ = _present_recalls(cm)
    sens, spec = sensitivity_specificity(cm)
    return MetricReport(
        balanced_accuracy=balanced_accuracy(cm),
        macro_auroc=macro_auroc(probabilities, y_true),
        macro_sensitivity=sens,
        macro_specificity=spec,
        per_class_recalls=[float(r) for r in recalls],
    )
