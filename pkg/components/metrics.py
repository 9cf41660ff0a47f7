"""Accuracy metrics and the per-model metrics report."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.errors import ReportError, UsageError

logger = logging.getLogger(__name__)

METRICS = ("average_accuracy", "class_average_accuracy")
# (first split, second split, hm label) per generalisation protocol
HM_PAIRS = (("within-test", "cross-test", "within/cross"), ("base-test", "novel-test", "base/novel"))
REPORT_COLUMNS = ["component", "split", "metric", "value"]


def _as_labels(preds, truth):
    preds, truth = np.asarray(preds).reshape(-1), np.asarray(truth).reshape(-1)
    if preds.shape != truth.shape:
        raise UsageError(f"prediction/label length mismatch: {preds.size} vs {truth.size}")
    if truth.size == 0:
        raise UsageError("cannot score an empty label list")
    return preds, truth


def average_accuracy(preds: Sequence[int], truth: Sequence[int]) -> float:
    preds, truth = _as_labels(preds, truth)
    return 100.0 * float(np.mean(preds == truth))


def class_average_accuracy(preds: Sequence[int], truth: Sequence[int]) -> float:
    """Unweighted mean of per-class recall, over the classes present in ``truth``."""
    preds, truth = _as_labels(preds, truth)
    classes = np.unique(truth)
    recalls = [np.mean(preds[truth == c] == c) for c in classes]
    return 100.0 * float(np.mean(recalls))


def harmonic_mean(a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        raise UsageError(f"harmonic mean needs positive inputs, got ({a}, {b})")
    return 2.0 * a * b / (a + b)


def report_harmonic_mean(a: float, b: float) -> float:
    """Harmonic mean as shown in reports: 0 when either accuracy is 0."""
    return 0.0 if a <= 0 or b <= 0 else harmonic_mean(a, b)


@dataclass
class MetricsReport:
    """Long-format metric rows: one per (component, split, metric)."""

    rows: List[Dict] = field(default_factory=list)

    def add(self, component: str, split: str, metric: str, value: float) -> None:
        if not 0.0 <= value <= 100.0 + 1e-9:
            raise ReportError(f"{component}/{split}/{metric} = {value} is not a percentage")
        self.rows.append({"component": component, "split": split, "metric": metric, "value": float(value)})

    def value(self, component: str, split: str, metric: str) -> Optional[float]:
        for row in self.rows:
            if (row["component"], row["split"], row["metric"]) == (component, split, metric):
                return row["value"]
        return None

    def add_harmonic_means(self, components: Sequence[str]) -> None:
        for component in components:
            for first, second, label in HM_PAIRS:
                for metric in METRICS:
                    a, b = self.value(component, first, metric), self.value(component, second, metric)
                    if a is None or b is None:
                        continue
                    self.add(component, label, f"hm_{metric}", report_harmonic_mean(a, b))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)
