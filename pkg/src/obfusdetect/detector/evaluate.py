"""Exact counting metrics and the decision-threshold sweep."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from ..metrics import class_metrics, technique_recall

__all__ = ["EvalReport", "SweepRow", "sweep", "detection_sets", "evaluate", "DEFAULT_THRESHOLDS"]

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    detections: int
    true_positives: int
    precision: float
    recall: float


def _check_thresholds(thresholds: Sequence[float]) -> list[float]:
    ts = [float(t) for t in thresholds]
    bad = [t for t in ts if not 0.0 <= t <= 1.0 or t != t]
    if bad:
        raise ValueError(f"thresholds must lie in [0, 1], got {bad}")
    return ts


def sweep(probabilities: Sequence[float], labels: Sequence[int], thresholds: Sequence[float]) -> list[SweepRow]:
    """Detections and precision at each threshold from one sort of the scores."""
    ts = _check_thresholds(thresholds)
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    order = np.argsort(-p, kind="stable")
    ps = p[order]
    tp_cum = np.concatenate([[0], np.cumsum(y[order])])
    n_pos = int(y.sum())
    rows = []
    for t in ts:
        # number of scores >= t in a descending array
        k = int(np.searchsorted(-ps, -t, side="right"))
        tp = int(tp_cum[k])
        rows.append(SweepRow(t, k, tp, tp / k if k else 1.0, tp / n_pos if n_pos else 1.0))
    return rows


def detection_sets(probabilities: Sequence[float], thresholds: Sequence[float]) -> list[frozenset[int]]:
    p = np.asarray(probabilities, dtype=np.float64)
    return [frozenset(np.flatnonzero(p >= t).tolist()) for t in _check_thresholds(thresholds)]


@dataclass
class EvalReport:
    n: int
    threshold: float
    classes: dict[str, dict]
    techniques: dict[str, dict]
    sweep: list[SweepRow]
    categories: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sweep"] = [asdict(r) for r in self.sweep]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def sweep_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "detections", "true_positives", "precision", "recall"])
        for r in self.sweep:
            w.writerow([r.threshold, r.detections, r.true_positives, f"{r.precision:.6f}", f"{r.recall:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"samples: {self.n}   threshold: {self.threshold}", "",
                 f"{'class':<12}{'precision':>11}{'recall':>9}{'support':>9}"]
        for name, m in self.classes.items():
            lines.append(f"{name:<12}{m['precision']:>11.4f}{m['recall']:>9.4f}{m['support']:>9d}")
        if self.techniques:
            lines += ["", f"{'technique':<34}{'recall':>9}{'support':>9}"]
            for name, m in self.techniques.items():
                lines.append(f"{name:<34}{m['recall']:>9.4f}{m['support']:>9d}")
        lines += ["", f"{'threshold':>9}{'detections':>12}{'precision':>11}{'recall':>9}"]
        for r in self.sweep:
            lines.append(f"{r.threshold:>9.3f}{r.detections:>12d}{r.precision:>11.4f}{r.recall:>9.4f}")
        if self.categories:
            lines += ["", f"{'category':<24}{'detected':>10}{'missed':>8}"]
            for name, c in self.categories.items():
                lines.append(f"{name:<24}{c['detected']:>10d}{c['missed']:>8d}")
        return "\n".join(lines) + "\n"


def _get(item: Any, name: str, default=None):
    if isinstance(item, dict):
        return item.get(name, default)
    return getattr(item, name, default)


def evaluate(
    classifier: Any,
    labeled_set: Sequence[Any],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    *,
    threshold: float = 0.5,
    probabilities: Sequence[float] | None = None,
) -> EvalReport:
    """Score ``labeled_set`` and count.

    ``classifier`` is anything with ``score(raws)`` or a callable on the raw
    list. Items need ``raw`` and ``label`` and may carry ``technique`` and an
    analyst ``category``. Precomputed ``probabilities`` skip scoring.
    """
    if not labeled_set:
        raise ValueError("labeled_set is empty")
    _check_thresholds(list(thresholds) + [threshold])
    labels = [int(_get(s, "label")) for s in labeled_set]
    if probabilities is None:
        raws = [_get(s, "raw") for s in labeled_set]
        score: Callable = classifier.score if hasattr(classifier, "score") else classifier
        probabilities = score(raws)
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape != (len(labeled_set),):
        raise ValueError("one probability per sample expected")
    dec = p >= threshold
    cm = class_metrics(labels, dec)
    techs = technique_recall([_get(s, "technique") for s in labeled_set], labels, dec)
    cats: dict[str, dict] = {}
    for s, d in zip(labeled_set, dec):
        c = _get(s, "category")
        if c is None:
            continue
        key = getattr(c, "value", c)
        slot = cats.setdefault(key, {"detected": 0, "missed": 0})
        slot["detected" if d else "missed"] += 1
    return EvalReport(
        n=len(labeled_set),
        threshold=threshold,
        classes={k: v.to_dict() for k, v in cm.items()},
        techniques=techs,
        sweep=sweep(p, labels, thresholds),
        categories=dict(sorted(cats.items())),
    )
