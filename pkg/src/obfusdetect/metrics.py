"""Counting metrics shared by training and evaluation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = ["ClassMetrics", "class_metrics", "technique_recall", "roc_auc", "count_spikes", "spike_mask"]


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    support: int
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)



def class_metrics(labels: Sequence[int], decisions: Sequence[bool]) -> dict[str, ClassMetrics]:
    """Precision/recall for ``benign`` (label 0) and ``obfuscated`` (label 1)."""
    y = np.asarray(labels, dtype=bool)
    d = np.asarray(decisions, dtype=bool)
    out = {}
    for name, cls in (("benign", False), ("obfuscated", True)):
        pos = y == cls
        pred = d == cls
        tp = int(np.sum(pos & pred))
        fp = int(np.sum(~pos & pred))
        fn = int(np.sum(pos & ~pred))
        prec = tp / (tp + fp) if tp + fp else (1.0 if not pos.any() else 0.0)
        rec = tp / (tp + fn) if tp + fn else 1.0
        out[name] = ClassMetrics(prec, rec, int(pos.sum()), tp, fp, fn)
    return out


def technique_recall(
    techniques: Iterable[str | None], labels: Sequence[int], decisions: Sequence[bool]
) -> dict[str, dict]:
    """Recall of the obfuscated class per technique tag."""
    hit: dict[str, int] = defaultdict(int)
    tot: dict[str, int] = defaultdict(int)
    for t, y, d in zip(techniques, labels, decisions):
        if y and t:
            tot[t] += 1
            hit[t] += int(bool(d))
    return {t: {"recall": hit[t] / tot[t], "support": tot[t]} for t in sorted(tot)}


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank-sum identity (ties averaged)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    r = rankdata(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def spike_mask(losses: Sequence[float], factor: float = 5.0, window: int = 50) -> np.ndarray:
    """True where a loss exceeds ``factor`` times the median of the previous ``window`` values."""
    x = np.asarray(losses, dtype=np.float64)
    out = np.zeros(len(x), dtype=bool)
    for i in range(1, len(x)):
        med = np.median(x[max(0, i - window) : i])
        out[i] = x[i] > factor * med
    return out


def count_spikes(losses: Sequence[float], factor: float = 5.0, window: int = 50) -> int:
    return int(spike_mask(losses, factor, window).sum())
