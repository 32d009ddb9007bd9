"""Per-class F1 and head/medium/tail/all reporting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bags import GROUP_NAMES, Bag
from .errors import SpecError
from .model import ModelBundle, predict


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> "ConfusionCounts":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        if y_true.shape != y_pred.shape:
            raise SpecError(f"{y_true.size} labels vs {y_pred.size} predictions")
        tp = np.zeros(num_classes, dtype=int)
        fp = np.zeros(num_classes, dtype=int)
        fn = np.zeros(num_classes, dtype=int)
        for t, p in zip(y_true, y_pred):
            if t == p:
                tp[t] += 1
            else:
                fp[p] += 1
                fn[t] += 1
        return cls(tp, fp, fn)


def per_class_f1(counts: ConfusionCounts) -> np.ndarray:
    """``2TP / (2TP + FP + FN)``, taken as 0 where the denominator is 0."""
    num = 2.0 * counts.tp
    den = num + counts.fp + counts.fn
    return np.divide(num, den, out=np.zeros(len(num)), where=den > 0)


@dataclass
class MetricsReport:
    """F1 in percent. A group with no member classes is ``None`` (absent), never 0."""

    per_class: List[float]
    head: Optional[float]
    medium: Optional[float]
    tail: Optional[float]
    all: float
    groups: Dict[str, List[int]] = field(default_factory=dict)

    def row(self) -> Dict[str, Optional[float]]:
        return {"head": self.head, "medium": self.medium, "tail": self.tail, "all": self.all}

    def to_dict(self) -> dict:
        return {
            "per_class_f1": [round(v, 2) for v in self.per_class],
            **{k: (None if v is None else round(v, 2)) for k, v in self.row().items()},
            "groups": self.groups,
        }


def report_from_predictions(
    y_true: Sequence[int], y_pred: Sequence[int], num_classes: int, groups: Dict[str, List[int]]
) -> MetricsReport:
    f1 = 100.0 * per_class_f1(ConfusionCounts.from_predictions(y_true, y_pred, num_classes))
    means = {}
    for g in GROUP_NAMES:
        members = groups.get(g, [])
        means[g] = float(np.mean(f1[members])) if members else None
    return MetricsReport(
        per_class=[float(v) for v in f1],
        head=means["head"],
        medium=means["medium"],
        tail=means["tail"],
        all=float(np.mean(f1)),
        groups={g: list(groups.get(g, [])) for g in GROUP_NAMES},
    )


def evaluate(
    bundle: ModelBundle,
    test_bags: Sequence[Bag],
    groups: Dict[str, List[int]],
    fusion: str = "mean-softmax",
) -> MetricsReport:
    preds = [predict(bundle, bag.embeddings, fusion)[1] for bag in test_bags]
    return report_from_predictions([b.label for b in test_bags], preds, bundle.shape.num_classes, groups)


def mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Cross-seed mean of each reported number."""
    if not reports:
        raise SpecError("no reports to average")

    def avg(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return MetricsReport(
        per_class=[float(v) for v in np.mean([r.per_class for r in reports], axis=0)],
        head=avg(r.head for r in reports),
        medium=avg(r.medium for r in reports),
        tail=avg(r.tail for r in reports),
        all=float(np.mean([r.all for r in reports])),
        groups=reports[0].groups,
    )
