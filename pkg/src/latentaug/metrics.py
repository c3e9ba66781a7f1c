"""Recognition metrics and the latent-compactness diagnostic.

All rates are percentages in [0, 100].  UA averages per-class recall over
classes present in the test set; WA weights recalls by test frequency and
therefore equals overall accuracy.  Group accuracies follow the long-tail
convention: classes are bucketed by their *training* counts into many
(>100), medium (20-100) and small (<20).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InsufficientSupport

MANY_THRESHOLD = 100
SMALL_THRESHOLD = 20


@dataclass
class MetricsReport:
    per_class_recall: np.ndarray  # percent; NaN for classes absent from the test set
    per_class_precision: np.ndarray
    per_class_f1: np.ndarray
    ua: float
    wa: float
    macro_f1: float
    ua_wo_excluded: float | None
    acc_many: float | None
    acc_medium: float | None
    acc_small: float | None
    confusion: np.ndarray  # rows = true class, cols = predicted
    n: int

    def to_dict(self) -> dict:
        def opt(x):
            return None if x is None else round(float(x), 6)

        return {
            "per_class_recall": [None if np.isnan(r) else round(float(r), 6) for r in self.per_class_recall],
            "ua": round(float(self.ua), 6),
            "wa": round(float(self.wa), 6),
            "macro_f1": round(float(self.macro_f1), 6),
            "ua_wo_excluded": opt(self.ua_wo_excluded),
            "acc_many": opt(self.acc_many),
            "acc_medium": opt(self.acc_medium),
            "acc_small": opt(self.acc_small),
            "n": self.n,
        }

    def to_csv(self, class_names=None) -> str:
        """Per-class rows then a summary row, 2-decimal fixed."""
        lines = ["class,recall,precision,f1"]
        for c, (r, p, f) in enumerate(
            zip(self.per_class_recall, self.per_class_precision, self.per_class_f1)
        ):
            name = class_names[c] if class_names else str(c)
            if np.isnan(r):
                continue
            lines.append(f"{name},{r:.2f},{p:.2f},{f:.2f}")
        lines.append("ua,wa,macro_f1,ua_wo_excluded,acc_many,acc_medium,acc_small")

        def fmt(x):
            return "" if x is None else f"{x:.2f}"

        lines.append(
            ",".join(
                [
                    f"{self.ua:.2f}",
                    f"{self.wa:.2f}",
                    f"{self.macro_f1:.2f}",
                    fmt(self.ua_wo_excluded),
                    fmt(self.acc_many),
                    fmt(self.acc_medium),
                    fmt(self.acc_small),
                ]
            )
        )
        return "\n".join(lines) + "\n"


def compute_metrics(
    predictions,
    labels,
    train_histogram,
    excluded_class: int | None = None,
) -> MetricsReport:
    """Metrics from predicted/true class ids.

    `train_histogram` gives per-class training counts (group thresholds only);
    its length fixes the class count C.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DimensionMismatch(
            f"{len(predictions)} predictions vs {len(labels)} labels"
        )
    if len(labels) == 0:
        raise EmptyInput("no predictions to score")
    train_counts = np.asarray(train_histogram, dtype=np.int64)
    c = len(train_counts)
    if predictions.max() >= c or labels.max() >= c:
        raise DimensionMismatch("class id beyond histogram length")

    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)  # test items per true class
    predicted = confusion.sum(axis=0)
    diag = np.diag(confusion).astype(np.float64)

    present = support > 0
    recall = np.full(c, np.nan)
    recall[present] = 100.0 * diag[present] / support[present]
    precision = np.zeros(c)
    nz = predicted > 0
    precision[nz] = 100.0 * diag[nz] / predicted[nz]
    f1 = np.zeros(c)
    pr = np.nan_to_num(precision + recall, nan=0.0)
    mask = present & (pr > 0)
    f1[mask] = 2 * precision[mask] * recall[mask] / pr[mask]

    n = len(labels)
    ua = float(np.mean(recall[present]))
    wa = float((support[present] / n * recall[present]).sum())
    macro_f1 = float(np.mean(f1[present]))
    ua_wo = None
    if excluded_class is not None:
        keep = present.copy()
        if 0 <= excluded_class < c:
            keep[excluded_class] = False
        if keep.any():
            ua_wo = float(np.mean(recall[keep]))

    def group_acc(lo, hi) -> float | None:
        sel = present & (train_counts > lo) & (train_counts < hi)
        return float(np.mean(recall[sel])) if sel.any() else None

    return MetricsReport(
        per_class_recall=recall,
        per_class_precision=precision,
        per_class_f1=f1,
        ua=ua,
        wa=wa,
        macro_f1=macro_f1,
        ua_wo_excluded=ua_wo,
        acc_many=group_acc(MANY_THRESHOLD, np.inf),
        acc_medium=group_acc(SMALL_THRESHOLD - 1, MANY_THRESHOLD + 1),
        acc_small=group_acc(-1, SMALL_THRESHOLD),
        confusion=confusion,
        n=n,
    )


def compactness_ratio(space_a: np.ndarray, space_b: np.ndarray, labels) -> float:
    """Ratio (b over a) of mean intra-class pairwise Euclidean distances.

    Both spaces must contain the same samples in the same order; every class
    needs at least two members for a pair to exist.
    """
    a = np.asarray(space_a, dtype=np.float64)
    b = np.asarray(space_b, dtype=np.float64)
    labels = np.asarray(labels)
    if len(a) != len(b) or len(a) != len(labels):
        raise DimensionMismatch("spaces and labels must align")

    def mean_intro(x: np.ndarray) -> float:
        total, count = 0.0, 0
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            if len(idx) < 2:
                raise InsufficientSupport(f"class {cls} has fewer than 2 samples")
            pts = x[idx]
            diff = pts[:, None, :] - pts[None, :, :]
            dists = np.sqrt((diff**2).sum(axis=-1))
            iu = np.triu_indices(len(idx), k=1)
            total += dists[iu].sum()
            count += len(iu[0])
        return total / count

    return mean_intro(b) / mean_intro(a)
