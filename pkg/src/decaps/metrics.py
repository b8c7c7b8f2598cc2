"""Binary classification metrics and the ROC curve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("precision", "recall", "specificity", "accuracy", "f1", "auc")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _aligned(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.size == 0:
        raise ValueError("metrics need at least one sample")
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def confusion(scores, labels, threshold: float = 0.5) -> Confusion:
    """Counts with a sample predicted positive iff score >= threshold."""
    s, y = _aligned(scores, labels)
    return confusion_from_predictions(s >= threshold, y)


def confusion_from_predictions(predicted_positive, labels) -> Confusion:
    p = np.asarray(predicted_positive).astype(bool).ravel()
    y = np.asarray(labels).astype(int).ravel() == 1
    if p.size == 0:
        raise ValueError("metrics need at least one sample")
    return Confusion(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y)))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) after admitting each distinct score, highest first, from (0, 0)."""
    s, y = _aligned(scores, labels)
    pos, neg = int(np.sum(y == 1)), int(np.sum(y != 1))
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both classes in the labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(np.sum(y[i:j] == 1))
        fp += int(np.sum(y[i:j] != 1))
        points.append((fp / neg, tp / pos))
        i = j
    return points


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC polyline (ties contribute a diagonal segment)."""
    pts = roc_curve(scores, labels)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def _ratio(a: int, b: int) -> float:
    return a / b if b > 0 else 0.0


@dataclass
class EvalReport:
    precision: float
    recall: float
    specificity: float
    accuracy: float
    f1: float
    auc: float
    counts: Confusion
    roc: list[tuple[float, float]] = field(default_factory=list)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in METRIC_NAMES)

    def counts_text(self) -> str:
        c = self.counts
        return f"tp={c.tp}\nfp={c.fp}\ntn={c.tn}\nfn={c.fn}\n"

    def roc_csv(self) -> str:
        return "fpr,tpr\n" + "".join(f"{x!r},{y!r}\n" for x, y in self.roc)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def evaluate(predicted_positive, positive_scores, labels) -> EvalReport:
    """Metrics at the given decisions plus threshold-free AUC over the scores."""
    c = confusion_from_predictions(predicted_positive, labels)
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        precision=precision,
        recall=recall,
        specificity=_ratio(c.tn, c.tn + c.fp),
        accuracy=_ratio(c.tp + c.tn, c.total),
        f1=f1,
        auc=auc(positive_scores, labels),
        counts=c,
        roc=roc_curve(positive_scores, labels),
    )


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out
