"""Replaced-token-detection pretraining of a generator/discriminator pair."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..classifier import make_batch
from ..microformer import (
    AdamW,
    Batch,
    LossSpec,
    ModelConfig,
    Params,
    Role,
    forward,
    init_params,
    linear_schedule,
    value_and_grad,
)
from ..tokenizer import TokenizerModel

__all__ = [
    "PretrainSpec",
    "Corruption",
    "TrainingDiverged",
    "PretrainResult",
    "choose_masks",
    "sample_rows",
    "mask_and_corrupt",
    "pretrain",
    "shares_embeddings",
    "rtd_auc",
]

SHARED = ("emb.tok", "emb.pos")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"training diverged at step {step}: non-finite {what}")
        self.step = step


@dataclass(frozen=True)
class PretrainSpec:
    mask_fraction: float = 0.15
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    disc_weight: float = 50.0
    warmup_frac: float = 0.06
    max_len: int = 128

    def __post_init__(self):
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps nonnegative")


@dataclass
class Corruption:
    gen_batch: Batch  # [MASK]ed input, token_labels = original ids at masked positions, -1 elsewhere
    disc_batch: Batch  # sampled replacements, token_labels = replaced flags
    masked: np.ndarray
    replaced: np.ndarray
    skipped: int = 0


def choose_masks(batch: Batch, special_ids: Sequence[int], fraction: float, rng: np.random.Generator):
    """Pick positions to mask, uniformly without replacement per sequence.

    Special tokens and padding are never chosen. A sequence with no eligible
    position is skipped and counted.
    """
    ids, amask = batch.token_ids, batch.attention_mask
    eligible = amask & ~np.isin(ids, np.asarray(list(special_ids)))
    masked = np.zeros_like(eligible)
    skipped = 0
    for i in range(ids.shape[0]):
        pos = np.flatnonzero(eligible[i])
        if pos.size == 0:
            skipped += 1
            continue
        k = max(1, int(round(fraction * pos.size)))
        masked[i, rng.choice(pos, size=k, replace=False)] = True
    return masked, skipped


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (inverse CDF)."""
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    cdf = np.cumsum(probs, axis=1, dtype=np.float64)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(1)
    return np.minimum(idx, probs.shape[1] - 1)


def _corrupt(batch, masked, gen_probs, mask_id, rng):
    ids = batch.token_ids
    gen_ids = np.where(masked, mask_id, ids)
    labels = np.where(masked, ids, -1)
    sampled = ids.copy()
    flat = np.flatnonzero(masked)
    sampled.reshape(-1)[flat] = sample_rows(gen_probs, rng)
    replaced = masked & (sampled != ids)
    gen_batch = Batch(gen_ids, batch.attention_mask, labels)
    disc_batch = Batch(sampled, batch.attention_mask, replaced.astype(np.float32))
    return gen_batch, disc_batch, replaced


def _specials(tok: TokenizerModel):
    return (tok.cls_id, tok.sep_id, tok.pad_id, tok.mask_id)


def mask_and_corrupt(
    batch: Batch,
    generator_params: Params,
    gen_config: ModelConfig,
    tokenizer: TokenizerModel,
    mask_fraction: float,
    seed: int,
) -> Corruption:
    """Mask, let the generator fill in, and flag positions whose sample differs."""
    rng = np.random.default_rng(seed)
    masked, skipped = choose_masks(batch, _specials(tokenizer), mask_fraction, rng)
    gen_in = Batch(np.where(masked, tokenizer.mask_id, batch.token_ids), batch.attention_mask)
    out = forward(generator_params, gen_config, gen_in, predict_mask=masked)
    gen_batch, disc_batch, replaced = _corrupt(batch, masked, out.gen_probs, tokenizer.mask_id, rng)
    return Corruption(gen_batch, disc_batch, masked, replaced, skipped)


def shares_embeddings(gen_cfg: ModelConfig, disc_cfg: ModelConfig) -> bool:
    return (
        gen_cfg.embedding_size == disc_cfg.embedding_size
        and gen_cfg.vocab_size == disc_cfg.vocab_size
        and gen_cfg.max_position == disc_cfg.max_position
    )


@dataclass
class PretrainResult:
    disc_params: Params
    gen_params: Params
    curve: list[dict] = field(default_factory=list)
    skipped: int = 0
    shared_embeddings: bool = False


def pretrain(
    gen_config: ModelConfig,
    disc_config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    spec: PretrainSpec,
    tokenizer: TokenizerModel,
    *,
    log_path: str | Path | None = None,
    log_every: int = 1,
    init: tuple[Params, Params] | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> PretrainResult:
    """Joint training: generator masked-token loss + ``disc_weight`` x replaced-token loss.

    ``corpus`` holds encoded sequences (with [CLS]/[SEP]). Token and position
    embeddings are shared when the two configs have equal embedding widths.
    """
    if gen_config.role is not Role.GENERATOR or disc_config.role is not Role.DISCRIMINATOR:
        raise ValueError("expected a generator config and a discriminator config")
    if gen_config.vocab_size != tokenizer.vocab_size or disc_config.vocab_size != tokenizer.vocab_size:
        raise ValueError("config vocab_size does not match the tokenizer")
    if init is None:
        gen = init_params(gen_config, spec.seed * 2 + 1)
        disc = init_params(disc_config, spec.seed * 2)
    else:
        gen = {k: v.copy() for k, v in init[0].items()}
        disc = {k: v.copy() for k, v in init[1].items()}
    share = shares_embeddings(gen_config, disc_config)
    if share:
        for k in SHARED:
            gen[k] = disc[k]
    result = PretrainResult(disc, gen, shared_embeddings=share)
    if spec.steps == 0:
        return result
    if len(corpus) == 0:
        raise ValueError("empty pretraining corpus")

    seqs = [list(s[: spec.max_len]) for s in corpus]
    opt = AdamW(lr=spec.learning_rate, weight_decay=spec.weight_decay)
    params = {f"d:{k}": v for k, v in disc.items()}
    params.update({f"g:{k}": v for k, v in gen.items() if not (share and k in SHARED)})
    gen_spec = LossSpec(mlm_weight=1.0)
    disc_spec = LossSpec(rtd_weight=spec.disc_weight)
    specials = _specials(tokenizer)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(spec.steps):
            rng = np.random.default_rng([spec.seed, step])
            pick = rng.choice(len(seqs), size=spec.batch_size, replace=len(seqs) < spec.batch_size)
            clean = make_batch([seqs[i] for i in pick], tokenizer.pad_id)
            masked, skipped = choose_masks(clean, specials, spec.mask_fraction, rng)
            result.skipped += skipped
            gen_in = Batch(np.where(masked, tokenizer.mask_id, clean.token_ids), clean.attention_mask,
                           np.where(masked, clean.token_ids, -1))
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    g_loss, g_grads, g_out = value_and_grad(gen, gen_config, gen_in, gen_spec, train=True, rng=rng)
                    _, disc_in, replaced = _corrupt(clean, masked, g_out.gen_probs, tokenizer.mask_id, rng)
                    d_loss, d_grads, d_out = value_and_grad(disc, disc_config, disc_in, disc_spec, train=True,
                                                            rng=rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc).removeprefix("non-finite ")) from exc
            total = g_loss.total + d_loss.total
            if not math.isfinite(total):
                raise TrainingDiverged(step)
            grads = {f"d:{k}": v for k, v in d_grads.items()}
            for k, v in g_grads.items():
                if share and k in SHARED:
                    grads[f"d:{k}"] = grads[f"d:{k}"] + v
                else:
                    grads[f"g:{k}"] = v
            lr = linear_schedule(step, spec.steps, spec.learning_rate, spec.warmup_frac)
            opt.step(params, grads, lr)
            valid = clean.attention_mask
            acc = float(((d_out.token_logits > 0) == replaced)[valid].mean())
            rec = {
                "step": step,
                "loss": total,
                "mlm": g_loss.mlm,
                "rtd": d_loss.rtd,
                "rtd_acc": acc,
                "replaced_frac": float(replaced.sum() / max(masked.sum(), 1)),
                "lr": lr,
            }
            if step % log_every == 0 or step == spec.steps - 1:
                result.curve.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            if callback:
                callback(step, rec)
    finally:
        if log_fh:
            log_fh.close()
    return result


def rtd_auc(
    disc_params: Params,
    disc_config: ModelConfig,
    gen_params: Params,
    gen_config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    tokenizer: TokenizerModel,
    *,
    mask_fraction: float = 0.15,
    seed: int = 12345,
    batch_size: int = 64,
) -> float:
    """Per-token ROC AUC of the discriminator on freshly corrupted held-out sequences."""
    from ..metrics import roc_auc

    scores, labels = [], []
    for i in range(0, len(corpus), batch_size):
        clean = make_batch([list(s) for s in corpus[i : i + batch_size]], tokenizer.pad_id)
        c = mask_and_corrupt(clean, gen_params, gen_config, tokenizer, mask_fraction, seed + i)
        out = forward(disc_params, disc_config, c.disc_batch)
        valid = clean.attention_mask
        scores.append(out.token_logits[valid])
        labels.append(c.replaced[valid])
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


def spec_dict(spec) -> dict:
    return asdict(spec)
