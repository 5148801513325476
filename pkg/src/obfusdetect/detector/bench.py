"""Inference throughput at 32-bit and emulated 16-bit precision."""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..classifier import Classifier

__all__ = ["BenchReport", "bench"]


@dataclass
class BenchReport:
    hardware: str
    batch_size: int
    measurements: list[dict] = field(default_factory=list)
    agreement: float | None = None
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        lines = [f"hardware: {self.hardware}", f"batch size: {self.batch_size}"]
        for m in self.measurements:
            lines.append(f"{m['mode']:>7}: {m['n_logs']} logs in {m['wall_seconds']:.3f}s = {m['logs_per_second']:.1f} logs/s")
        if self.agreement is not None:
            lines.append(f"decision agreement between modes: {self.agreement:.4%}")
        if self.note:
            lines.append(self.note)
        return "\n".join(lines) + "\n"


def _hardware() -> str:
    return f"{platform.processor() or platform.machine()}, {os.cpu_count()} cpu, numpy {np.__version__}"


def bench(
    classifier: Classifier,
    logs: Sequence[str],
    n_logs: int | None = None,
    modes: Sequence[str] = ("bits32", "bits16"),
    batch_size: int = 64,
) -> BenchReport:
    """Time scoring of ``n_logs`` commands (cycled from ``logs``) in each mode.

    The 16-bit mode rounds weights and activations to half precision but
    multiplies in single precision, so it measures the numeric effect, not
    a hardware speedup.
    """
    n = len(logs) if n_logs is None else n_logs
    if n < 1:
        raise ValueError("n_logs must be at least 1")
    if not logs:
        raise ValueError("no logs to benchmark")
    sample = [logs[i % len(logs)] for i in range(n)]
    report = BenchReport(_hardware(), batch_size,
                         note="bits16 is emulated (half-precision rounding, single-precision arithmetic)")
    ids = classifier.encode(sample)
    decisions = {}
    for mode in modes:
        t0 = time.perf_counter()
        probs = classifier.score_ids(ids, batch_size, precision=mode)
        wall = time.perf_counter() - t0
        decisions[mode] = probs >= classifier.threshold
        report.measurements.append(
            {"mode": mode, "n_logs": n, "wall_seconds": wall, "logs_per_second": n / wall if wall > 0 else float("inf")}
        )
    if len(decisions) >= 2:
        a, b = list(decisions.values())[:2]
        report.agreement = float(np.mean(a == b))
    return report
