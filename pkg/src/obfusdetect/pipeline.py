"""End-to-end desk-scale run with resumable, hash-checked stages.

Stages run in order: normalize, train-tokenizer, pretrain, build-dataset,
finetune, evaluate, sweep. Each one records a hash of its inputs (config
slice plus upstream artifact hashes) and of every file it wrote in
``manifest.json``. A stage is skipped when its inputs are unchanged and
its files are intact; it is rerun when a file is missing; a file whose
content no longer matches the manifest halts the run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tokenizer as tk
from .classifier import Classifier, encode_texts
from .corpus import ExecutionLog, iter_logs, synth_corpus, write_jsonl, write_logs
from .detector import evaluate
from .detector.evaluate import DEFAULT_THRESHOLDS, EvalReport
from .microformer import init_params, load_checkpoint, preset, save_checkpoint
from .normalizer import normalize
from .obfugen import ObfuscatedSample, Technique, generate_dataset
from .trainer import (
    DESK_SCALE,
    FinetuneDataset,
    FinetuneSpec,
    PretrainSpec,
    build_finetune_dataset,
    finetune,
    pretrain,
)

__all__ = [
    "STAGES",
    "ARTIFICIAL_TECHNIQUES",
    "REAL_STANDIN_TECHNIQUES",
    "RunConfig",
    "StageError",
    "RunState",
    "run_pipeline",
    "load_classifier",
    "file_hash",
]

log = logging.getLogger(__name__)

STAGES = ("normalize", "train-tokenizer", "pretrain", "build-dataset", "finetune", "evaluate", "sweep")
REAL_STANDIN_TECHNIQUES = (Technique.WHITESPACE_INSERTION, Technique.CASE_MIXING)
ARTIFICIAL_TECHNIQUES = tuple(t for t in Technique if t not in REAL_STANDIN_TECHNIQUES)


@dataclass
class RunConfig:
    run_dir: str = "runs/desk"
    seed: int = 0
    corpus_path: str | None = None  # benign JSONL; synthetic corpus when unset
    corpus_size: int = DESK_SCALE["benign"] + 6_000
    vocab_size: int = 8_000
    tokenizer_lines: int = 20_000
    preset: str = "small"
    max_len: int = 128
    n_artificial: int = DESK_SCALE["artificial"]
    n_real: int = DESK_SCALE["real"]
    n_pretrain_obfuscated: int = 2_000
    pretrain_corpus_size: int = 20_000
    skip_pretrain: bool = False
    pretrain: dict = field(default_factory=lambda: {"steps": 1000})
    finetune: dict = field(default_factory=lambda: {"epochs": 3})
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    threshold: float = 0.5
    precision: str = "bits32"

    def pretrain_spec(self) -> PretrainSpec:
        return PretrainSpec(**{"seed": self.seed, "max_len": self.max_len, **self.pretrain})

    def finetune_spec(self) -> FinetuneSpec:
        return FinetuneSpec(**{"seed": self.seed, "max_len": self.max_len, **self.finetune})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def validate(self) -> None:
        self.pretrain_spec()
        self.finetune_spec()
        preset(self.preset, 100)
        if self.corpus_path is None and self.corpus_size < 1:
            raise ValueError("corpus_size must be at least 1")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


@dataclass
class RunState:
    config: RunConfig
    dir: Path
    manifest: dict = field(default_factory=dict)
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def path(self, name: str) -> Path:
        return self.dir / name

    def outputs(self, stage: str) -> dict[str, str]:
        return self.manifest.get(stage, {}).get("outputs", {})

    def save_manifest(self) -> None:
        tmp = self.path("manifest.json.tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(self.path("manifest.json"))


# --------------------------------------------------------------------------
# stage bodies; each returns the artifact paths (relative to the run dir) it wrote


def _benign(cfg: RunConfig) -> list[ExecutionLog]:
    if cfg.corpus_path:
        return list(iter_logs(cfg.corpus_path))
    return synth_corpus(cfg.seed, cfg.corpus_size)


def _stage_normalize(st: RunState) -> list[str]:
    cfg = st.config
    benign = _benign(cfg)
    write_logs(st.path("corpus.jsonl"), benign)
    extra = generate_dataset(benign, None, cfg.n_pretrain_obfuscated, cfg.seed + 101).samples
    recs = [{"source_id": l.source_id, "text": normalize(l.raw).text} for l in benign]
    recs += [{"source_id": f"obf-{i}", "text": normalize(s.obfuscated).text} for i, s in enumerate(extra)]
    write_jsonl(st.path("normalized.jsonl"), recs)
    return ["corpus.jsonl", "normalized.jsonl"]


def _normalized_texts(st: RunState) -> list[str]:
    with open(st.path("normalized.jsonl"), encoding="utf-8") as fh:
        return [json.loads(line)["text"] for line in fh if line.strip()]


def _mixed_sample(texts: list[str], n: int, seed: int) -> list[str]:
    """Seeded subset of ``texts``, kept in corpus order."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(texts))[: min(n, len(texts))]
    return [texts[i] for i in sorted(idx)]


def _stage_tokenizer(st: RunState) -> list[str]:
    cfg = st.config
    texts = _mixed_sample(_normalized_texts(st), cfg.tokenizer_lines, cfg.seed + 202)
    model = tk.train(texts, cfg.vocab_size)
    tk.save(model, st.path("tokenizer.json"))
    return ["tokenizer.json"]


def _stage_pretrain(st: RunState) -> list[str]:
    cfg = st.config
    tok = tk.load(st.path("tokenizer.json"))
    gen_cfg = preset(f"{cfg.preset}-gen", tok.vocab_size, cfg.max_len)
    disc_cfg = preset(f"{cfg.preset}-disc", tok.vocab_size, cfg.max_len)
    (st.path("pretrain")).mkdir(exist_ok=True)
    curve = st.path("pretrain/curve.jsonl")
    if curve.exists():
        curve.unlink()
    if cfg.skip_pretrain:
        disc = init_params(disc_cfg, cfg.seed * 2)
        save_checkpoint(st.path("pretrain/disc.ckpt"), disc, disc_cfg, tok.hash, extra={"pretrained": False})
        curve.write_text("", encoding="utf-8")
        return ["pretrain/disc.ckpt", "pretrain/curve.jsonl"]
    texts = _mixed_sample(_normalized_texts(st), cfg.pretrain_corpus_size, cfg.seed + 303)
    seqs = [list(tk.encode(tok, t, cfg.max_len).ids) for t in texts]
    t0 = time.time()
    res = pretrain(gen_cfg, disc_cfg, seqs, cfg.pretrain_spec(), tok, log_path=curve)
    log.info("pretrain: %d steps in %.0fs", cfg.pretrain_spec().steps, time.time() - t0)
    save_checkpoint(st.path("pretrain/disc.ckpt"), res.disc_params, disc_cfg, tok.hash, extra={"pretrained": True})
    save_checkpoint(st.path("pretrain/gen.ckpt"), res.gen_params, gen_cfg, tok.hash)
    return ["pretrain/disc.ckpt", "pretrain/gen.ckpt", "pretrain/curve.jsonl"]


def _write_samples(path: Path, samples: list[ObfuscatedSample], pool: str) -> None:
    write_jsonl(path, ({**asdict(s), "technique": s.technique.value, "pool": pool} for s in samples))


def _stage_dataset(st: RunState) -> list[str]:
    cfg = st.config
    benign = list(iter_logs(st.path("corpus.jsonl")))
    art = generate_dataset(benign, {t: 1.0 for t in ARTIFICIAL_TECHNIQUES}, cfg.n_artificial, cfg.seed + 404)
    real = generate_dataset(benign, {t: 1.0 for t in REAL_STANDIN_TECHNIQUES}, cfg.n_real, cfg.seed + 505)
    _write_samples(st.path("artificial.jsonl"), art.samples, "artificial")
    _write_samples(st.path("real.jsonl"), real.samples, "real")
    ds = build_finetune_dataset(benign, art.samples, real.samples, cfg.finetune_spec(), cfg.seed + 606)
    ds.save(st.path("dataset.jsonl"))
    under = {t.value: n for t, n in {**art.underfilled, **real.underfilled}.items()}
    st.path("dataset_stats.json").write_text(
        json.dumps({"counts": ds.counts(), "ratio": ds.ratio, "train": len(ds.train), "test": len(ds.test),
                    "underfilled": under}, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    return ["artificial.jsonl", "real.jsonl", "dataset.jsonl", "dataset_stats.json"]


def _stage_finetune(st: RunState) -> list[str]:
    cfg = st.config
    tok = tk.load(st.path("tokenizer.json"))
    params, disc_cfg = load_checkpoint(st.path("pretrain/disc.ckpt"), tokenizer_hash=tok.hash,
                                       vocab_size=tok.vocab_size)
    ds = FinetuneDataset.load(st.path("dataset.jsonl"))
    t0 = time.time()
    res = finetune(params, disc_cfg, ds, tok, cfg.finetune_spec())
    log.info("finetune: %d steps in %.0fs", len(res.loss_trace), time.time() - t0)
    clf = res.classifier
    clf.threshold = cfg.threshold
    clf.meta = {"pretrained": not cfg.skip_pretrain, "seed": cfg.seed}
    clf.save(st.path("classifier"))
    write_jsonl(st.path("finetune_trace.jsonl"), (b.to_record() for b in res.loss_trace))
    st.path("epoch_metrics.json").write_text(json.dumps(res.epoch_metrics, indent=2, sort_keys=True), encoding="utf-8")
    return ["classifier/model.ckpt", "classifier/tokenizer.json", "finetune_trace.jsonl", "epoch_metrics.json"]


def load_classifier(run_dir: str | Path) -> Classifier:
    return Classifier.load(Path(run_dir) / "classifier")


def _stage_evaluate(st: RunState) -> list[str]:
    cfg = st.config
    clf = load_classifier(st.dir)
    ds = FinetuneDataset.load(st.path("dataset.jsonl"))
    probs = clf.score_ids(encode_texts(clf.tokenizer, [s.raw for s in ds.test], clf.max_len))
    write_jsonl(st.path("test_scores.jsonl"),
                ({"raw": s.raw, "label": s.label, "technique": s.technique, "probability": float(p)}
                 for s, p in zip(ds.test, probs)))
    report = evaluate(None, ds.test, cfg.thresholds, threshold=cfg.threshold, probabilities=probs)
    st.path("report.json").write_text(report.to_json(), encoding="utf-8")
    st.path("report.txt").write_text(report.to_text(), encoding="utf-8")
    return ["test_scores.jsonl", "report.json", "report.txt"]


def _stage_sweep(st: RunState) -> list[str]:
    rep = json.loads(st.path("report.json").read_text(encoding="utf-8"))
    from .detector.evaluate import SweepRow

    report = EvalReport(rep["n"], rep["threshold"], rep["classes"], rep["techniques"],
                        [SweepRow(**r) for r in rep["sweep"]], rep.get("categories", {}))
    st.path("sweep.csv").write_text(report.sweep_csv(), encoding="utf-8")
    return ["sweep.csv"]


_BODIES: dict[str, Callable[[RunState], list[str]]] = {
    "normalize": _stage_normalize,
    "train-tokenizer": _stage_tokenizer,
    "pretrain": _stage_pretrain,
    "build-dataset": _stage_dataset,
    "finetune": _stage_finetune,
    "evaluate": _stage_evaluate,
    "sweep": _stage_sweep,
}

# config fields each stage depends on; upstream stages are folded in through their hashes
_DEPENDS = {
    "normalize": ("seed", "corpus_path", "corpus_size", "n_pretrain_obfuscated"),
    "train-tokenizer": ("seed", "vocab_size", "tokenizer_lines"),
    "pretrain": ("seed", "preset", "max_len", "pretrain", "skip_pretrain", "pretrain_corpus_size"),
    "build-dataset": ("seed", "n_artificial", "n_real", "finetune"),
    "finetune": ("seed", "finetune", "max_len", "threshold", "skip_pretrain"),
    "evaluate": ("thresholds", "threshold"),
    "sweep": (),
}
_UPSTREAM = {
    "normalize": (),
    "train-tokenizer": ("normalize",),
    "pretrain": ("normalize", "train-tokenizer"),
    "build-dataset": ("normalize",),
    "finetune": ("train-tokenizer", "pretrain", "build-dataset"),
    "evaluate": ("finetune", "build-dataset"),
    "sweep": ("evaluate",),
}


def _inputs_hash(st: RunState, stage: str) -> str:
    cfg = st.config.to_dict()
    if stage == "normalize" and cfg["corpus_path"]:
        cfg["corpus_hash"] = file_hash(cfg["corpus_path"])
    return _digest({
        "stage": stage,
        "config": {k: cfg[k] for k in _DEPENDS[stage]},
        "corpus_hash": cfg.get("corpus_hash"),
        "upstream": {u: st.outputs(u) for u in _UPSTREAM[stage]},
    })


def _up_to_date(st: RunState, stage: str, inputs: str) -> bool:
    entry = st.manifest.get(stage)
    if not entry or entry.get("inputs") != inputs:
        return False
    for rel, digest in entry["outputs"].items():
        p = st.path(rel)
        if not p.exists():
            return False
        if file_hash(p) != digest:
            raise StageError(stage, f"artifact {rel} was modified after it was recorded; remove it to rebuild")
    return True


class _Lock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory is locked by another process ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_pipeline(config: RunConfig, *, stages: tuple[str, ...] = STAGES, force: tuple[str, ...] = ()) -> RunState:
    """Run (or resume) every stage in ``stages`` for ``config``.

    Returns the :class:`RunState`; ``ran`` and ``skipped`` list what happened.
    """
    config.validate()
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    st = RunState(config, run_dir)
    mpath = st.path("manifest.json")
    if mpath.exists():
        st.manifest = json.loads(mpath.read_text(encoding="utf-8"))
    with _Lock(st.path(".lock")):
        st.path("config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        for stage in STAGES:
            if stage not in stages:
                continue
            inputs = _inputs_hash(st, stage)
            if stage not in force and _up_to_date(st, stage, inputs):
                st.skipped.append(stage)
                continue
            log.info("stage %s: running", stage)
            t0 = time.time()
            try:
                outs = _BODIES[stage](st)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            st.manifest[stage] = {
                "inputs": inputs,
                "outputs": {rel: file_hash(st.path(rel)) for rel in outs},
                "seconds": round(time.time() - t0, 3),
            }
            # downstream entries are now stale; their input hashes will no longer match
            st.save_manifest()
            st.ran.append(stage)
    return st
