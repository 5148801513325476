"""AdamW with linear warmup and linear decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Params, decays

__all__ = ["AdamW", "linear_schedule"]


def linear_schedule(step: int, total: int, peak: float, warmup_frac: float = 0.06) -> float:
    """Learning rate at 0-based ``step``: ramp to ``peak``, then fall to zero at ``total``."""
    warm = max(1, int(round(total * warmup_frac)))
    if step < warm:
        return peak * (step + 1) / warm
    return peak * max(0.0, (total - step) / max(1, total - warm))


@dataclass
class AdamW:
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    clip_norm: float | None = 1.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Params, grads: Params, lr: float | None = None) -> float:
        """Update ``params`` in place; returns the pre-clip gradient norm."""
        lr = self.lr if lr is None else lr
        names = [k for k in params if k in grads]
        norm = float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in names)))
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k in names:
            p = params[k]
            g = grads[k] * scale if scale != 1.0 else grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and decays(k):
                p -= lr * self.weight_decay * p
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        return norm
