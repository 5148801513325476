"""Streaming inference over execution logs."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import islice
from typing import Any, Iterable, Iterator

from ..classifier import Classifier
from ..corpus import Category, ExecutionLog
from ..tokenizer import TokenizerModel

__all__ = ["DetectionResult", "score_stream"]


@dataclass
class DetectionResult:
    log_ref: str
    probability: float
    decision: bool
    category: Category | None = None
    raw: str | None = None
    error: str | None = None

    def to_record(self) -> dict:
        d = asdict(self)
        d["category"] = self.category.value if self.category else None
        return d


def _coerce(item: Any, index: int) -> tuple[str, str | None, str | None]:
    """``(log_ref, raw, error)`` for one stream item."""
    if isinstance(item, ExecutionLog):
        return item.source_id or str(index), item.raw, None
    if isinstance(item, dict):
        ref = str(item.get("source_id") or item.get("log_ref") or index)
        raw = item.get("raw")
    else:
        ref, raw = str(index), item
    if isinstance(raw, (bytes, bytearray)):
        text = bytes(raw).decode("utf-8", errors="replace")
        return ref, text, "undecodable bytes replaced" if "�" in text else None
    if not isinstance(raw, str):
        return ref, None, f"malformed log: raw is {type(raw).__name__}, expected text"
    return ref, raw, None


def score_stream(
    classifier: Classifier,
    logs: Iterable[Any],
    batch_size: int = 64,
    *,
    threshold: float | None = None,
    tokenizer: TokenizerModel | None = None,
    precision: str = "bits32",
) -> Iterator[DetectionResult]:
    """Yield one result per log, in input order, holding at most one batch in memory.

    A log without usable text yields probability 0 with an ``error`` note and
    the stream continues.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if tokenizer is not None and tokenizer.hash != classifier.tokenizer_hash:
        raise ValueError("tokenizer does not match the one the classifier was trained with")
    thr = classifier.threshold if threshold is None else threshold
    it = iter(logs)
    index = 0
    while True:
        chunk = list(islice(it, batch_size))
        if not chunk:
            return
        items = [_coerce(x, index + i) for i, x in enumerate(chunk)]
        index += len(chunk)
        good = [i for i, (_, raw, _) in enumerate(items) if raw is not None]
        probs = classifier.score([items[i][1] for i in good], batch_size, precision) if good else []
        by_pos = dict(zip(good, probs))
        for i, (ref, raw, err) in enumerate(items):
            p = float(by_pos.get(i, 0.0))
            yield DetectionResult(ref, p, raw is not None and p >= thr, None, raw, err)
