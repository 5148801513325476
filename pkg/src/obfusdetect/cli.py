"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_lines_jsonl(path):
    from .corpus import read_jsonl

    return list(read_jsonl(path))


def _out(path: str | None):
    # stdout must outlive the with-block, or the broken-pipe handler has nothing to redirect
    return open(path, "w", encoding="utf-8") if path and path != "-" else contextlib.nullcontext(sys.stdout)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_corpus(a):
    from .corpus import synth_corpus, write_logs

    if a.n < 1:
        raise UsageError("--n must be at least 1")
    n = write_logs(a.output, synth_corpus(a.seed, a.n))
    print(f"wrote {n} logs to {a.output}", file=sys.stderr)


def cmd_normalize(a):
    from .corpus import iter_logs
    from .normalizer import normalize

    with _out(a.output) as fh:
        for log in iter_logs(a.input):
            nc = normalize(log.raw)
            rec = {**log.to_record(), "normalized": nc.text,
                   "replacements": [[r.kind.value, r.start, r.length, r.original] for r in nc.replacements]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _normalized_corpus(path):
    from .corpus import iter_logs
    from .normalizer import normalize

    return [normalize(l.raw).text for l in iter_logs(path)]


def cmd_train_tokenizer(a):
    from . import tokenizer as tk

    model = tk.train(_normalized_corpus(a.input), a.vocab_size, a.min_frequency)
    tk.save(model, a.output)
    print(f"vocab {model.vocab_size}, hash {model.hash[:16]} -> {a.output}", file=sys.stderr)


def cmd_encode(a):
    from . import tokenizer as tk
    from .corpus import iter_logs
    from .normalizer import normalize

    model = tk.load(a.tokenizer)
    with _out(a.output) as fh:
        for log in iter_logs(a.input):
            seq = tk.encode(model, normalize(log.raw).text, a.max_len)
            fh.write(json.dumps({"source_id": log.source_id, "ids": list(seq.ids)}) + "\n")


def cmd_compression_report(a):
    from . import tokenizer as tk

    corpus = _normalized_corpus(a.input)
    models = {Path(p).stem: tk.load(p) for p in a.tokenizers}
    models["character-baseline"] = tk.character_baseline(corpus)
    rows = tk.compression_report(models, corpus)
    with _out(a.output) as fh:
        fh.write(f"{'tokenizer':<24}{'vocab':>8}{'tokens':>12}{'tokens/char':>13}\n")
        for r in rows:
            fh.write(f"{r.name:<24}{r.vocab_size:>8}{r.total_tokens:>12}{r.tokens_per_char:>13.4f}\n")


def cmd_gen_obfuscate(a):
    from .corpus import ExecutionLog, Label, iter_logs, write_logs
    from .obfugen import Technique, generate_dataset

    techs = [Technique(t) for t in a.technique] if a.technique else list(Technique)
    res = generate_dataset(list(iter_logs(a.input)), {t: 1.0 for t in techs}, a.count, a.seed, intensity=a.intensity)
    logs = (
        ExecutionLog(s.obfuscated, f"{s.source_id}#{s.technique.value}", Label.OBFUSCATED, s.technique.value,
                     extra={"original": s.original, "seed": s.seed, "intensity": s.intensity})
        for s in res.samples
    )
    n = write_logs(a.output, logs)
    print(f"wrote {n} samples to {a.output}", file=sys.stderr)
    for t, miss in res.underfilled.items():
        print(f"under-filled: {t.value} short by {miss}", file=sys.stderr)


def _samples_from_logs(path):
    from .obfugen import ObfuscatedSample, Technique

    out = []
    for rec in _read_lines_jsonl(path):
        out.append(ObfuscatedSample(rec.get("original", rec["raw"]), rec["raw"], Technique(rec["technique"]),
                                    int(rec.get("seed", 0)), float(rec.get("intensity", 1.0)), rec.get("source_id", "")))
    return out


def _finetune_spec(a, **extra):
    from .trainer import FinetuneSpec

    kw = {k: v for k, v in extra.items() if v is not None}
    return FinetuneSpec(seed=a.seed, **kw)


def cmd_build_dataset(a):
    from .corpus import iter_logs
    from .trainer import build_finetune_dataset

    spec = _finetune_spec(a, imbalance_ratio=a.ratio, allow_unstable_ratio=a.allow_unstable_ratio)
    real = _samples_from_logs(a.real) if a.real else []
    ds = build_finetune_dataset(list(iter_logs(a.benign)), _samples_from_logs(a.artificial), real, spec, a.seed)
    ds.save(a.output)
    print(f"train {len(ds.train)}, test {len(ds.test)}, ratio {ds.ratio:.3f} -> {a.output}", file=sys.stderr)


def cmd_pretrain(a):
    from . import tokenizer as tk
    from .microformer import preset, save_checkpoint
    from .trainer.pretrain import PretrainSpec, pretrain, spec_dict

    tok = tk.load(a.tokenizer)
    texts = _normalized_corpus(a.corpus)
    seqs = [list(tk.encode(tok, t, a.max_len).ids) for t in texts]
    spec = PretrainSpec(steps=a.steps, batch_size=a.batch_size, seed=a.seed, max_len=a.max_len,
                        learning_rate=a.learning_rate)
    gen_cfg = preset(f"{a.preset}-gen", tok.vocab_size, a.max_len)
    disc_cfg = preset(f"{a.preset}-disc", tok.vocab_size, a.max_len)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = pretrain(gen_cfg, disc_cfg, seqs, spec, tok, log_path=out / "metrics.jsonl", log_every=10)
    (out / "config.json").write_text(json.dumps({"spec": spec_dict(spec), "preset": a.preset}, indent=2))
    save_checkpoint(out / "disc.ckpt", res.disc_params, disc_cfg, tok.hash)
    save_checkpoint(out / "gen.ckpt", res.gen_params, gen_cfg, tok.hash)


def cmd_finetune(a):
    from . import tokenizer as tk
    from .corpus import write_jsonl
    from .microformer import init_params, load_checkpoint, preset
    from .trainer import FinetuneDataset, finetune

    tok = tk.load(a.tokenizer)
    if a.init:
        params, cfg = load_checkpoint(a.init, tokenizer_hash=tok.hash, vocab_size=tok.vocab_size)
    else:
        cfg = preset(a.preset, tok.vocab_size, a.max_len)
        params = init_params(cfg, a.seed)
    spec = _finetune_spec(a, epochs=a.epochs, gamma=a.gamma, learning_rate=a.learning_rate, max_len=a.max_len)
    ds = FinetuneDataset.load(a.dataset)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = finetune(params, cfg, ds, tok, spec, log_path=out / "metrics.jsonl")
    res.classifier.save(out / "classifier")
    write_jsonl(out / "loss_trace.jsonl", (b.to_record() for b in res.loss_trace))
    (out / "epoch_metrics.json").write_text(json.dumps(res.epoch_metrics, indent=2))


def cmd_correct(a):
    from .classifier import Classifier
    from .detector import triage_import
    from .trainer import correct_stage

    clf = Classifier.load(a.classifier)
    labels = triage_import(a.labels, require_category=True)
    supplement = _samples_from_logs(a.supplement) if a.supplement else []
    res = correct_stage(clf, labels, supplement, a.seed)
    res.classifier.save(a.out_dir)
    print(f"positives {res.positives} (supplement {res.supplement}), negatives {res.negatives}", file=sys.stderr)


def cmd_loss_peaks(a):
    from .trainer import BatchRecord, FinetuneDataset, loss_peak_report

    trace = [BatchRecord(**r) for r in _read_lines_jsonl(a.trace)]
    ds = FinetuneDataset.load(a.dataset)
    report = loss_peak_report(trace, ds.train, factor=a.factor, window=a.window)
    with _out(a.output) as fh:
        for p in report:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")


def cmd_detect(a):
    from .classifier import Classifier
    from .corpus import read_jsonl
    from .detector import score_stream

    clf = Classifier.load(a.classifier)
    with _out(a.output) as fh:
        for r in score_stream(clf, read_jsonl(a.input), a.batch_size, threshold=a.threshold, precision=a.precision):
            fh.write(json.dumps(r.to_record(), ensure_ascii=False) + "\n")


def _labeled(path, split):
    from .trainer import FinetuneDataset

    recs = _read_lines_jsonl(path)
    if recs and "label" in recs[0] and isinstance(recs[0]["label"], int):
        ds = FinetuneDataset.load(path)
        return {"train": ds.train, "test": ds.test, "all": ds.all}[split]
    out = []
    for r in recs:
        lab = r.get("label")
        if lab is None:
            raise ValueError(f"record {r.get('source_id')!r} has no label")
        out.append({"raw": r["raw"], "label": int(lab in (1, "obfuscated")), "technique": r.get("technique"),
                    "category": r.get("category")})
    return out


def cmd_eval(a):
    from .classifier import Classifier
    from .detector import evaluate

    clf = Classifier.load(a.classifier)
    rep = evaluate(clf, _labeled(a.dataset, a.split), a.thresholds, threshold=a.threshold)
    if a.output:
        Path(a.output).write_text(rep.to_json(), encoding="utf-8")
    sys.stdout.write(rep.to_text())


def cmd_sweep(a):
    from .classifier import Classifier
    from .detector import evaluate

    clf = Classifier.load(a.classifier)
    rep = evaluate(clf, _labeled(a.dataset, a.split), a.thresholds)
    with _out(a.output) as fh:
        fh.write(rep.sweep_csv())


def cmd_triage_export(a):
    from .corpus import read_jsonl
    from .detector import DetectionResult, triage_export

    results = (DetectionResult(r["log_ref"], float(r["probability"]), bool(r.get("decision")), None, r.get("raw"))
               for r in read_jsonl(a.detections))
    n = triage_export(results, a.output, a.floor)
    print(f"exported {n} detections to {a.output}", file=sys.stderr)


def cmd_triage_import(a):
    from collections import Counter

    from .detector import triage_import

    dets = triage_import(a.input, require_category=a.require_category)
    counts = Counter(d.category.value if d.category else "unlabeled" for d in dets)
    print(json.dumps({"records": len(dets), "categories": dict(sorted(counts.items()))}, indent=2))


def cmd_bench(a):
    from .classifier import Classifier
    from .corpus import iter_logs
    from .detector import bench

    clf = Classifier.load(a.classifier)
    logs = [l.raw for l in iter_logs(a.input)]
    rep = bench(clf, logs, a.n_logs, a.modes, a.batch_size)
    if a.output:
        Path(a.output).write_text(rep.to_json(), encoding="utf-8")
    sys.stdout.write(rep.to_text())


def cmd_run_pipeline(a):
    from .pipeline import RunConfig, run_pipeline

    cfg = RunConfig.from_dict(a.config_data) if a.config_data else RunConfig()
    if a.run_dir:
        cfg.run_dir = a.run_dir
    if a.seed_given:
        cfg.seed = a.seed
    cfg.precision = a.precision
    st = run_pipeline(cfg, force=tuple(a.force or ()))
    print(json.dumps({"run_dir": str(st.dir), "ran": st.ran, "skipped": st.skipped}), file=sys.stderr)
    rep = st.path("report.txt")
    if rep.exists():
        sys.stdout.write(rep.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="obfusdetect", description="Obfuscated command-line detection toolkit.")
    p.add_argument("--config", help="JSON file of option defaults (a RunConfig for run-pipeline)")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    p.add_argument("--precision", choices=("bits32", "bits16"), default="bits32")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    s = add("synth-corpus", cmd_synth_corpus, "write the synthetic benign corpus")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--output", required=True)

    s = add("normalize", cmd_normalize, "replace value patterns with meta-tokens")
    s.add_argument("--input", required=True)
    s.add_argument("--output")

    s = add("train-tokenizer", cmd_train_tokenizer, "train a subword tokenizer on a corpus")
    s.add_argument("--input", required=True)
    s.add_argument("--vocab-size", type=int, default=8000)
    s.add_argument("--min-frequency", type=int, default=2)
    s.add_argument("--output", required=True)

    s = add("encode", cmd_encode, "encode a corpus to token ids")
    s.add_argument("--tokenizer", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--max-len", type=int, default=256)
    s.add_argument("--output")

    s = add("compression-report", cmd_compression_report, "compare token counts of tokenizers")
    s.add_argument("--input", required=True)
    s.add_argument("--tokenizers", nargs="+", required=True)
    s.add_argument("--output")

    s = add("gen-obfuscate", cmd_gen_obfuscate, "generate artificially obfuscated samples")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--technique", action="append")
    s.add_argument("--intensity", type=float)
    s.add_argument("--count", type=int, default=1000)

    s = add("build-dataset", cmd_build_dataset, "assemble the imbalanced fine-tuning dataset")
    s.add_argument("--benign", required=True)
    s.add_argument("--artificial", required=True)
    s.add_argument("--real")
    s.add_argument("--ratio", type=float, default=10.0)
    s.add_argument("--allow-unstable-ratio", action="store_true")
    s.add_argument("--output", required=True)

    s = add("pretrain", cmd_pretrain, "replaced-token-detection pretraining")
    s.add_argument("--corpus", required=True)
    s.add_argument("--tokenizer", required=True)
    s.add_argument("--preset", default="small")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--learning-rate", type=float, default=5e-4)
    s.add_argument("--max-len", type=int, default=128)
    s.add_argument("--out-dir", required=True)

    s = add("finetune", cmd_finetune, "focal-loss fine-tuning of the discriminator")
    s.add_argument("--dataset", required=True)
    s.add_argument("--tokenizer", required=True)
    s.add_argument("--init", help="pretrained discriminator checkpoint (random init when omitted)")
    s.add_argument("--preset", default="small")
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--gamma", type=float, default=2.0)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--max-len", type=int, default=128)
    s.add_argument("--out-dir", required=True)

    s = add("correct", cmd_correct, "stage-2 correction on analyst labels")
    s.add_argument("--classifier", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--supplement")
    s.add_argument("--out-dir", required=True)

    s = add("loss-peaks", cmd_loss_peaks, "report samples behind fine-tuning loss spikes")
    s.add_argument("--trace", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--factor", type=float, default=5.0)
    s.add_argument("--window", type=int, default=50)
    s.add_argument("--output")

    s = add("detect", cmd_detect, "score execution logs")
    s.add_argument("--classifier", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--threshold", type=float)
    s.add_argument("--output")

    for name, fn, help_ in (("eval", cmd_eval, "evaluate on a labeled set"),
                            ("sweep", cmd_sweep, "precision and detections per threshold (CSV)")):
        s = add(name, fn, help_)
        s.add_argument("--classifier", required=True)
        s.add_argument("--dataset", required=True)
        s.add_argument("--split", choices=("train", "test", "all"), default="test")
        s.add_argument("--thresholds", type=float, nargs="+",
                       default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
        s.add_argument("--output")
        if name == "eval":
            s.add_argument("--threshold", type=float, default=0.5)

    s = add("triage-export", cmd_triage_export, "write detections above the review floor for labeling")
    s.add_argument("--detections", required=True)
    s.add_argument("--floor", type=float, default=0.1)
    s.add_argument("--output", required=True)

    s = add("triage-import", cmd_triage_import, "validate an analyst labeling file")
    s.add_argument("--input", required=True)
    s.add_argument("--require-category", action="store_true")

    s = add("bench", cmd_bench, "inference throughput in 32- and 16-bit modes")
    s.add_argument("--classifier", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--n-logs", type=int)
    s.add_argument("--modes", nargs="+", choices=("bits32", "bits16"), default=["bits32", "bits16"])
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--output")

    s = add("run-pipeline", cmd_run_pipeline, "run or resume the end-to-end desk-scale pipeline")
    s.add_argument("--run-dir")
    s.add_argument("--force", action="append", help="rerun this stage even if up to date")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    args.config_data = None
    if args.config:
        try:
            args.config_data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"obfusdetect: cannot read config: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if args.command != "run-pipeline":
            # config keys fill options the user did not give on the command line
            for k, v in args.config_data.items():
                key = k.replace("-", "_")
                if getattr(args, key, None) in (None, False):
                    setattr(args, key, v)

    from .microformer import CheckpointError
    from .pipeline import StageError
    from .trainer import TrainingDiverged

    try:
        args.fn(args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except UsageError as exc:
        print(f"obfusdetect: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"obfusdetect: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as exc:
        print(f"obfusdetect: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(exc.__cause__, TrainingDiverged) else EXIT_DATA
    except (ValueError, KeyError, OSError, CheckpointError) as exc:
        print(f"obfusdetect: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
