"""Focal loss in probability form and loss-peak diagnostics."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..metrics import spike_mask
from .finetune import BatchRecord, LabeledSample

__all__ = [
    "FOCAL_EPS",
    "focal_loss",
    "escape_density",
    "PeakSample",
    "loss_peak_report",
    "TAG_IDENTICAL",
    "TAG_MARKERS",
    "TAG_RARE",
]

FOCAL_EPS = 1e-12


def focal_loss(p_t, gamma: float, reduction: str = "mean"):
    """``-(1 - p_t)^gamma * log(p_t)``; ``p_t`` is clamped below at 1e-12.

    >>> round(float(focal_loss(0.9, 2.0)), 10)
    0.0010536052
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    p = np.asarray(p_t, dtype=np.float64)
    if np.any(p > 1.0) or np.any(p < 0.0):
        raise ValueError("p_t must lie in [0, 1]")
    p = np.maximum(p, FOCAL_EPS)
    loss = -((1.0 - p) ** gamma) * np.log(p) + 0.0  # + 0.0 turns -0.0 into 0.0
    if reduction == "mean":
        return float(loss.mean()) if loss.ndim else float(loss)
    if reduction == "none":
        return loss
    if reduction == "sum":
        return float(loss.sum())
    raise ValueError("reduction must be mean, sum or none")


TAG_IDENTICAL = "labeled_obfuscated_but_identical"
TAG_MARKERS = "benign_with_obfuscation_markers"
TAG_RARE = "rare_technique"

_ESCAPES = set("^`")


def escape_density(raw: str) -> float:
    """Share of characters that are shell escape characters."""
    return sum(c in _ESCAPES for c in raw) / len(raw) if raw else 0.0


@dataclass
class PeakSample:
    sample_id: int
    step: int
    loss: float
    raw: str
    label: int
    technique: str | None
    tags: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)


def loss_peak_report(
    loss_trace: Sequence[BatchRecord],
    dataset: Sequence[LabeledSample],
    *,
    factor: float = 5.0,
    window: int = 50,
    escape_threshold: float = 0.05,
    rare_min: int = 20,
    per_batch: int = 3,
) -> list[PeakSample]:
    """Samples from batches whose loss spikes above ``factor`` x the trailing median.

    From each peak batch the ``per_batch`` highest-loss samples are kept and
    tagged; the report is ranked by per-sample loss.
    """
    if not loss_trace:
        return []
    peaks = spike_mask([b.loss for b in loss_trace], factor, window)
    tech_counts = Counter(s.technique for s in dataset if s.label == 1 and s.technique)
    out: list[PeakSample] = []
    for rec, hit in zip(loss_trace, peaks):
        if not hit:
            continue
        ranked = sorted(zip(rec.sample_ids, rec.sample_losses), key=lambda t: -t[1])[:per_batch]
        for sid, loss in ranked:
            s = dataset[sid]
            out.append(PeakSample(sid, rec.step, loss, s.raw, s.label, s.technique, tag_sample(s, tech_counts,
                                                                                              escape_threshold, rare_min)))
    out.sort(key=lambda p: -p.loss)
    return out


def tag_sample(s: LabeledSample, tech_counts: Counter, escape_threshold: float = 0.05, rare_min: int = 20) -> list[str]:
    tags = []
    if s.label == 1 and s.original is not None and s.raw == s.original:
        tags.append(TAG_IDENTICAL)
    if s.label == 0 and escape_density(s.raw) >= escape_threshold:
        tags.append(TAG_MARKERS)
    if s.label == 1 and s.technique and tech_counts.get(s.technique, 0) < rare_min:
        tags.append(TAG_RARE)
    return tags
