"""Scoring, evaluation, analyst triage files and throughput benchmarks."""

from .bench import BenchReport, bench
from .evaluate import EvalReport, detection_sets, evaluate, sweep
from .scoring import DetectionResult, score_stream
from .triage import TRIAGE_HEADER, triage_export, triage_import

__all__ = [
    "BenchReport", "bench", "EvalReport", "detection_sets", "evaluate", "sweep",
    "DetectionResult", "score_stream", "TRIAGE_HEADER", "triage_export", "triage_import",
]
