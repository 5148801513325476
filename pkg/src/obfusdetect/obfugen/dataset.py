"""Balanced generation of artificially obfuscated samples."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..corpus import ExecutionLog
from .catalog import (
    Inapplicable,
    ObfuscatedSample,
    Shell,
    Technique,
    _info,
    derive_seed,
    obfuscate_log,
    shell_of,
    split_binary_and_args,
)

__all__ = ["DatasetResult", "allocate", "generate_dataset", "INTENSITY_RANGE"]

INTENSITY_RANGE = (0.3, 1.0)


@dataclass
class DatasetResult:
    samples: list[ObfuscatedSample]
    requested: dict[Technique, int]
    underfilled: dict[Technique, int] = field(default_factory=dict)  # technique -> missing count

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def counts(self) -> dict[Technique, int]:
        out = {t: 0 for t in self.requested}
        for s in self.samples:
            out[s.technique] += 1
        return out


def allocate(weights: Mapping[Technique | str, float], count: int) -> dict[Technique, int]:
    """Split ``count`` across techniques by largest remainder."""
    w = {Technique(k): float(v) for k, v in weights.items()}
    if any(v < 0 for v in w.values()):
        raise ValueError("technique weights must be nonnegative")
    total = sum(w.values())
    if total <= 0:
        raise ValueError("technique weights are all zero")
    exact = {t: count * v / total for t, v in w.items()}
    alloc = {t: int(x) for t, x in exact.items()}
    short = count - sum(alloc.values())
    order = sorted(w, key=lambda t: (-(exact[t] - alloc[t]), list(Technique).index(t)))
    for t in order[:short]:
        alloc[t] += 1
    return alloc


def _compatible(tech: Technique, shell: Shell | None) -> bool:
    s = _info(tech).shell
    return s is Shell.ANY or s is shell


def generate_dataset(
    benign_corpus: Iterable[ExecutionLog | str],
    technique_weights: Mapping[Technique | str, float] | None = None,
    count: int = 0,
    seed: int = 0,
    *,
    max_retries: int = 50,
    intensity: float | None = None,
) -> DatasetResult:
    """Draw ``count`` obfuscated samples from benign commands.

    Each slot gets its own seed ``derive_seed(seed, index)``, so the output
    does not depend on evaluation order. A slot whose technique cannot be
    applied after ``max_retries`` commands is left empty and counted in
    ``underfilled``. Intensities are drawn from ``INTENSITY_RANGE`` unless
    a fixed ``intensity`` is given.
    """
    if intensity is not None and not 0.0 < intensity <= 1.0:
        raise ValueError("a fixed intensity must lie in (0, 1]")
    if count < 0:
        raise ValueError("count must be nonnegative")
    weights = technique_weights or {t: 1.0 for t in Technique}
    alloc = allocate(weights, count)
    logs = [x if isinstance(x, ExecutionLog) else ExecutionLog(raw=x, source_id="") for x in benign_corpus]
    pools: dict[Shell | None, list[int]] = {}
    for i, log in enumerate(logs):
        try:
            binary, _ = split_binary_and_args(log.raw)
        except ValueError:
            continue
        pools.setdefault(shell_of(binary), []).append(i)

    samples: list[ObfuscatedSample] = []
    underfilled: dict[Technique, int] = {}
    index = 0
    for tech in Technique:
        n = alloc.get(tech, 0)
        if n == 0:
            continue
        cands = [i for sh, idx in pools.items() if _compatible(tech, sh) for i in idx]
        missing = 0
        for _ in range(n):
            rng = random.Random(derive_seed(seed, index))
            sample_seed = derive_seed(seed, index, "apply")
            index += 1
            made = None
            for _attempt in range(max_retries if cands else 0):
                log = logs[rng.choice(cands)]
                level = intensity if intensity is not None else round(rng.uniform(*INTENSITY_RANGE), 4)
                try:
                    s = obfuscate_log(log.raw, tech, sample_seed, level)
                except (Inapplicable, ValueError):
                    continue
                made = ObfuscatedSample(s.original, s.obfuscated, tech, sample_seed, level, log.source_id)
                break
            if made is None:
                missing += 1
            else:
                samples.append(made)
        if missing:
            underfilled[tech] = missing
    return DatasetResult(samples, alloc, underfilled)
