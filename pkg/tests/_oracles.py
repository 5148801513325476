"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import re

import numpy as np

from obfusdetect.microformer import Batch, LossSpec, Role, init_params, preset, value_and_grad


def gradcheck_setup(role: Role = Role.DISCRIMINATOR, seed: int = 0, vocab: int = 40, T: int = 7, B: int = 3):
    """Miniature model in float64 with weights large enough to make every path matter."""
    name = "miniature-disc" if role is Role.DISCRIMINATOR else "miniature-gen"
    cfg = preset(name, vocab, 16, dropout=0.0)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, std=0.3, dtype=np.float64)
    for k, v in params.items():
        if k.endswith(".b") or k.endswith(".bias"):
            v += rng.normal(0, 0.1, v.shape)
    ids = rng.integers(5, vocab, (B, T))
    amask = np.ones((B, T), dtype=bool)
    amask[1, T - 2 :] = False
    if role is Role.DISCRIMINATOR:
        batch = Batch(ids, amask, rng.integers(0, 2, (B, T)), rng.integers(0, 2, B))
        spec = LossSpec(rtd_weight=1.0, seq_weight=1.0, focal_gamma=2.0)
    else:
        labels = np.where(rng.random((B, T)) < 0.4, rng.integers(0, vocab, (B, T)), -1)
        labels[:, 1] = rng.integers(0, vocab, B)
        batch = Batch(ids, amask, labels)
        spec = LossSpec(mlm_weight=1.0)
    return cfg, params, batch, spec


def layer_type(name: str) -> str:
    return re.sub(r"^l\d+\.", "layer.", name)


def gradcheck(cfg, params, batch, spec, *, coords_per_type: int = 20, h: float = 1e-5, seed: int = 0,
              floor: float = 1e-5) -> dict[str, float]:
    """Worst relative error per layer type, analytic vs central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    exactly-zero gradients (the key bias under softmax shift invariance)
    from dividing noise by noise.
    """
    _, grads, _ = value_and_grad(params, cfg, batch, spec)
    rng = np.random.default_rng(seed)
    by_type: dict[str, list[tuple[str, tuple]]] = {}
    for name, v in params.items():
        coords = [np.unravel_index(i, v.shape) for i in range(v.size)]
        by_type.setdefault(layer_type(name), []).extend((name, c) for c in coords)

    def loss(p):
        return value_and_grad(p, cfg, batch, spec)[0].total

    worst = {}
    for t, coords in by_type.items():
        pick = rng.choice(len(coords), size=min(coords_per_type, len(coords)), replace=False)
        errs = []
        for j in pick:
            name, c = coords[j]
            old = params[name][c]
            params[name][c] = old + h
            up = loss(params)
            params[name][c] = old - h
            down = loss(params)
            params[name][c] = old
            num = (up - down) / (2 * h)
            ana = grads[name][c]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
        worst[t] = float(max(errs))
    return worst


def uniform_replaced_rate(vocab: int) -> float:
    return 1.0 - 1.0 / vocab


def brute_force_metrics(labels, decisions) -> dict:
    out = {}
    for cls, want in (("benign", 0), ("obfuscated", 1)):
        tp = sum(1 for y, d in zip(labels, decisions) if y == want and d == want)
        fp = sum(1 for y, d in zip(labels, decisions) if y != want and d == want)
        fn = sum(1 for y, d in zip(labels, decisions) if y == want and d != want)
        out[cls] = (tp / (tp + fp) if tp + fp else 1.0, tp / (tp + fn) if tp + fn else 0.0, tp, fp, fn)
    return out
