"""Analyst labeling files: one JSON object per line after a header line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from ..corpus import Category, LabeledDetection
from .scoring import DetectionResult

__all__ = ["TRIAGE_HEADER", "REVIEW_FLOOR", "triage_export", "triage_import"]

REVIEW_FLOOR = 0.1
TRIAGE_HEADER = {"format": "obfusdetect-triage", "version": 1, "fields": ["log_ref", "raw", "probability", "category"]}
_VALID = ", ".join(c.value for c in Category)


def triage_export(results: Iterable[DetectionResult], path: str | Path, floor: float = REVIEW_FLOOR) -> int:
    """Write every result with probability >= ``floor``; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(TRIAGE_HEADER) + "\n")
        for r in results:
            if r.probability < floor:
                continue
            rec = {
                "log_ref": r.log_ref,
                "raw": r.raw,
                "probability": r.probability,
                "category": r.category.value if r.category else None,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def triage_import(path: str | Path, *, require_category: bool = False) -> list[LabeledDetection]:
    """Read a labeling file back; bad lines raise ``ValueError`` naming the line."""
    out: list[LabeledDetection] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if lineno == 1 and rec.get("format") == TRIAGE_HEADER["format"]:
                if rec.get("version") != TRIAGE_HEADER["version"]:
                    raise ValueError(f"{path}:1: unsupported triage file version {rec.get('version')}")
                continue
            missing = [k for k in ("log_ref", "raw", "probability") if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            cat = rec.get("category")
            if cat in (None, ""):
                if require_category:
                    raise ValueError(f"{path}:{lineno}: category is empty; expected one of {_VALID}")
                category = None
            else:
                try:
                    category = Category(cat)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: unknown category {cat!r}; expected one of {_VALID}") from None
            out.append(LabeledDetection(str(rec["log_ref"]), rec["raw"], float(rec["probability"]), category))
    return out
