"""Focal-loss fine-tuning, dataset assembly and the stage-2 correction pass."""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..classifier import Classifier, encode_texts, make_batch
from ..corpus import Category, ExecutionLog, LabeledDetection
from ..metrics import class_metrics, technique_recall
from ..microformer import AdamW, LossSpec, ModelConfig, Params, Role, linear_schedule, value_and_grad
from ..obfugen import ObfuscatedSample
from ..tokenizer import TokenizerModel
from .pretrain import TrainingDiverged

__all__ = [
    "MAX_STABLE_RATIO",
    "DESK_SCALE",
    "FinetuneSpec",
    "LabeledSample",
    "FinetuneDataset",
    "BatchRecord",
    "FinetuneResult",
    "build_finetune_dataset",
    "finetune",
    "evaluate_split",
    "CorrectionResult",
    "correct_stage",
]

MAX_STABLE_RATIO = 30.0
# full-scale pool sizes divided by ten
DESK_SCALE = {"benign": 54_000, "artificial": 5_250, "real": 150}


@dataclass(frozen=True)
class FinetuneSpec:
    gamma: float = 2.0
    imbalance_ratio: float = 10.0
    learning_rate: float = 3e-4
    epochs: int = 3
    seed: int = 0
    batch_size: int = 32
    weight_decay: float = 0.01
    warmup_frac: float = 0.06
    max_len: int = 128
    test_fraction: float = 0.25
    allow_unstable_ratio: bool = False
    loss: str = "focal"  # "focal" or "bce"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.imbalance_ratio <= 0:
            raise ValueError("imbalance_ratio must be positive")
        if self.imbalance_ratio > MAX_STABLE_RATIO and not self.allow_unstable_ratio:
            raise ValueError(
                f"imbalance_ratio {self.imbalance_ratio} exceeds {MAX_STABLE_RATIO}:1; training beyond that "
                "ratio was reported unstable (set allow_unstable_ratio to override)"
            )
        if self.loss not in ("focal", "bce"):
            raise ValueError("loss must be 'focal' or 'bce'")

    def loss_spec(self) -> LossSpec:
        return LossSpec(seq_weight=1.0, focal_gamma=self.gamma, seq_loss=self.loss)


@dataclass
class LabeledSample:
    raw: str
    label: int  # 1 = obfuscated
    technique: str | None = None
    original: str | None = None
    source_id: str = ""
    pool: str = "benign"  # benign / artificial / real / labeled / supplement

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledSample":
        return cls(**{k: rec[k] for k in ("raw", "label", "technique", "original", "source_id", "pool") if k in rec})

    @classmethod
    def from_obfuscated(cls, s: ObfuscatedSample, pool: str) -> "LabeledSample":
        return cls(s.obfuscated, 1, s.technique.value, s.original, s.source_id, pool)


@dataclass
class FinetuneDataset:
    train: list[LabeledSample]
    test: list[LabeledSample]

    @property
    def all(self) -> list[LabeledSample]:
        return self.train + self.test

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for s in self.all:
            out[s.pool] += 1
        return dict(out)

    @property
    def ratio(self) -> float:
        pos = sum(s.label for s in self.all)
        return (len(self.all) - pos) / pos if pos else math.inf

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for split, items in (("train", self.train), ("test", self.test)):
                for s in items:
                    fh.write(json.dumps({**s.to_record(), "split": split}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FinetuneDataset":
        train, test = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    (train if rec.get("split") == "train" else test).append(LabeledSample.from_record(rec))
        return cls(train, test)


def _raw(x) -> str:
    return x.raw if isinstance(x, ExecutionLog) else str(x)


def build_finetune_dataset(
    benign_corpus: Iterable[ExecutionLog | str],
    artificial: Sequence[ObfuscatedSample],
    real: Sequence[ObfuscatedSample],
    spec: FinetuneSpec,
    seed: int,
) -> FinetuneDataset:
    """Mix benign and obfuscated samples at ``spec.imbalance_ratio`` benign per obfuscated.

    All obfuscated samples are used when enough benign commands exist;
    otherwise both obfuscated pools shrink proportionally. The test split
    takes ``spec.test_fraction`` of every (label, technique) stratum.
    """
    benign = [_raw(x) for x in benign_corpus]
    if not benign:
        raise ValueError("benign pool is empty")
    if not artificial and not real:
        raise ValueError("no obfuscated samples: both the artificial and the real pool are empty")
    if not real:
        warnings.warn("real-world pool is empty; building an artificial-only dataset", UserWarning, stacklevel=2)
    ratio = spec.imbalance_ratio
    rng = np.random.default_rng(seed)
    art, rea = list(artificial), list(real)
    n_obf = len(art) + len(rea)
    if len(benign) < ratio * n_obf:
        scale = len(benign) / (ratio * n_obf)
        art = [art[i] for i in sorted(rng.permutation(len(art))[: int(len(art) * scale)])]
        rea = [rea[i] for i in sorted(rng.permutation(len(rea))[: max(int(len(rea) * scale), 1 if rea else 0)])]
        n_obf = len(art) + len(rea)
        if n_obf == 0:
            raise ValueError("benign pool too small for even one obfuscated sample at this ratio")
    n_ben = min(len(benign), int(round(ratio * n_obf)))
    pick = rng.permutation(len(benign))[:n_ben]
    samples = [LabeledSample(benign[i], 0, None, None, "", "benign") for i in sorted(pick)]
    samples += [LabeledSample.from_obfuscated(s, "artificial") for s in art]
    samples += [LabeledSample.from_obfuscated(s, "real") for s in rea]

    strata: dict[tuple, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        strata[(s.label, s.technique or "")].append(i)
    test_idx: set[int] = set()
    for key in sorted(strata):
        idx = strata[key]
        order = rng.permutation(len(idx))
        n_test = int(round(len(idx) * spec.test_fraction))
        test_idx.update(idx[j] for j in order[:n_test])
    train = [samples[i] for i in range(len(samples)) if i not in test_idx]
    test = [samples[i] for i in sorted(test_idx)]
    perm = rng.permutation(len(train))
    return FinetuneDataset([train[i] for i in perm], test)


@dataclass
class BatchRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    sample_ids: list[int]
    sample_losses: list[float]

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneResult:
    classifier: Classifier
    loss_trace: list[BatchRecord] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [b.loss for b in self.loss_trace]


def evaluate_split(clf: Classifier, samples: Sequence[LabeledSample], ids: Sequence[Sequence[int]] | None = None,
                   threshold: float = 0.5) -> dict:
    ids = ids if ids is not None else clf.encode([s.raw for s in samples])
    probs = clf.score_ids(ids)
    labels = [s.label for s in samples]
    dec = probs >= threshold
    cm = class_metrics(labels, dec)
    return {
        "threshold": threshold,
        "classes": {k: v.to_dict() for k, v in cm.items()},
        "techniques": technique_recall([s.technique for s in samples], labels, dec),
        "min_pr": min(min(v.precision, v.recall) for v in cm.values()),
    }


def finetune(
    disc_params: Params,
    disc_config: ModelConfig,
    dataset: FinetuneDataset | Sequence[LabeledSample],
    tokenizer: TokenizerModel,
    spec: FinetuneSpec,
    *,
    evaluate_each_epoch: bool = True,
    log_path: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
    dtype=np.float32,
) -> FinetuneResult:
    """Train the sequence head (and the encoder under it) with focal loss.

    ``dataset`` may be a :class:`FinetuneDataset` (metrics on its test split
    after every epoch) or a plain list of training samples.
    """
    if disc_config.role is not Role.DISCRIMINATOR:
        raise ValueError("fine-tuning needs a discriminator config")
    if isinstance(dataset, FinetuneDataset):
        train, test = dataset.train, dataset.test
    else:
        train, test = list(dataset), []
    if not train:
        raise ValueError("empty training set")
    params = {k: np.array(v, dtype=dtype, copy=True) for k, v in disc_params.items()}
    clf = Classifier(params, disc_config, tokenizer, spec.max_len)
    train_ids = encode_texts(tokenizer, [s.raw for s in train], spec.max_len)
    test_ids = encode_texts(tokenizer, [s.raw for s in test], spec.max_len) if test else []
    labels = np.array([s.label for s in train], dtype=dtype)

    n = len(train)
    per_epoch = math.ceil(n / spec.batch_size)
    total = per_epoch * spec.epochs
    opt = AdamW(lr=spec.learning_rate, weight_decay=spec.weight_decay)
    lspec = spec.loss_spec()
    result = FinetuneResult(clf)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(spec.epochs):
            order = np.random.default_rng([spec.seed, epoch]).permutation(n)
            for b in range(per_epoch):
                idx = order[b * spec.batch_size : (b + 1) * spec.batch_size]
                rng = np.random.default_rng([spec.seed, epoch, b, 1])
                batch = make_batch([train_ids[i] for i in idx], tokenizer.pad_id, seq_labels=labels[idx])
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        losses, grads, _ = value_and_grad(params, disc_config, batch, lspec, train=True, rng=rng)
                except FloatingPointError as exc:
                    raise TrainingDiverged(step, str(exc).removeprefix("non-finite ")) from exc
                if not math.isfinite(losses.total):
                    raise TrainingDiverged(step)
                lr = linear_schedule(step, total, spec.learning_rate, spec.warmup_frac)
                opt.step(params, grads, lr)
                rec = BatchRecord(step, epoch, losses.seq, lr, [int(i) for i in idx],
                                  [float(x) for x in losses.per_sequence])
                result.loss_trace.append(rec)
                if log_fh:
                    log_fh.write(json.dumps({"step": step, "epoch": epoch, "loss": rec.loss, "lr": lr}) + "\n")
                if callback:
                    callback(step, {"loss": rec.loss, "lr": lr, "epoch": epoch})
                step += 1
            if evaluate_each_epoch and test:
                m = evaluate_split(clf, test, test_ids)
                m["epoch"] = epoch + 1
                result.epoch_metrics.append(m)
    finally:
        if log_fh:
            log_fh.close()
    return result


@dataclass
class CorrectionResult:
    classifier: Classifier
    positives: int
    negatives: int
    supplement: int
    trace: list[BatchRecord] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.negatives / self.positives if self.positives else math.inf


def correct_stage(
    classifier: Classifier,
    labeled_detections: Sequence[LabeledDetection],
    supplement_pool: Sequence[LabeledSample | ObfuscatedSample | str],
    seed: int,
    spec: FinetuneSpec | None = None,
    *,
    target_ratio: float = 10.0,
) -> CorrectionResult:
    """Retrain on analyst-labeled detections.

    Negatives are ``non_obfuscated`` plus ``obfuscated_benign``; positives
    are ``obfuscated_malicious`` plus enough supplement samples to reach
    ``target_ratio`` negatives per positive.
    """
    spec = spec or FinetuneSpec(epochs=3, learning_rate=1e-4, seed=seed, max_len=classifier.max_len)
    if not labeled_detections:
        warnings.warn("no labeled detections; classifier left unchanged", UserWarning, stacklevel=2)
        return CorrectionResult(classifier, 0, 0, 0)
    unlabeled = [d.log_ref for d in labeled_detections if d.category is None]
    if unlabeled:
        raise ValueError(f"{len(unlabeled)} detections have no category (first: {unlabeled[0]!r})")
    neg = [d for d in labeled_detections if d.category in (Category.NON_OBFUSCATED, Category.OBFUSCATED_BENIGN)]
    mal = [d for d in labeled_detections if d.category is Category.OBFUSCATED_MALICIOUS]
    want = int(round(len(neg) / target_ratio))
    need = max(0, want - len(mal))
    rng = np.random.default_rng(seed)
    pool = list(supplement_pool)
    take = [pool[i] for i in sorted(rng.permutation(len(pool))[: min(need, len(pool))])]
    if not mal and not take:
        raise ValueError("correction needs positives: no obfuscated_malicious labels and no supplement samples")

    def as_sample(x) -> LabeledSample:
        if isinstance(x, LabeledSample):
            return LabeledSample(x.raw, 1, x.technique, x.original, x.source_id, "supplement")
        if isinstance(x, ObfuscatedSample):
            return LabeledSample.from_obfuscated(x, "supplement")
        return LabeledSample(str(x), 1, None, None, "", "supplement")

    train = [LabeledSample(d.raw, 0, None, None, d.log_ref, "labeled") for d in neg]
    train += [LabeledSample(d.raw, 1, None, None, d.log_ref, "labeled") for d in mal]
    train += [as_sample(x) for x in take]
    res = finetune(classifier.params, classifier.config, train, classifier.tokenizer, spec, evaluate_each_epoch=False)
    clf = res.classifier
    clf.max_len, clf.threshold = classifier.max_len, classifier.threshold
    clf.meta = {**classifier.meta, "corrected": True}
    return CorrectionResult(clf, len(mal) + len(take), len(neg), len(take), res.loss_trace)
