"""Build (or reuse) the pinned fixture runs the acceptance suite reads.

    python tests/fixtures/fixture_run.py            # build everything missing
    python tests/fixtures/fixture_run.py --force    # rebuild the derived studies

Two pipeline runs share one configuration and differ only in whether the
discriminator is pretrained. On top of the pretrained run this script
measures stage-2 correction, 16/32-bit agreement and the regression corpus,
writing each study to its own JSON file. Pipeline stages resume from their
manifest, so a second invocation is cheap.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path

import numpy as np

from obfusdetect.classifier import Classifier
from obfusdetect.corpus import Category, LabeledDetection, synth_corpus
from obfusdetect.detector import bench
from obfusdetect.obfugen import ObfuscatedSample, Technique, generate_dataset
from obfusdetect.pipeline import ARTIFICIAL_TECHNIQUES, RunConfig, load_classifier, run_pipeline
from obfusdetect.trainer import FinetuneDataset, correct_stage

HERE = Path(__file__).resolve().parent
ROOT = HERE.parents[1] / "artifacts" / "fixture-run"
REGRESSION = HERE / "regression.json"

BASE = dict(
    seed=7,
    corpus_size=12_000,
    vocab_size=4_000,
    tokenizer_lines=12_000,
    preset="small",
    max_len=96,
    n_artificial=440,
    n_real=40,
    n_pretrain_obfuscated=1_000,
    pretrain_corpus_size=10_000,
    pretrain={"steps": 1_500, "batch_size": 32},
    finetune={"epochs": 3, "imbalance_ratio": 10},
)

log = logging.getLogger("fixture")


def config(kind: str) -> RunConfig:
    return RunConfig(run_dir=str(ROOT / kind), skip_pretrain=(kind == "scratch"), **json.loads(json.dumps(BASE)))


def run(kind: str):
    t0 = time.time()
    st = run_pipeline(config(kind))
    log.info("%s: ran %s in %.0fs", kind, st.ran or "nothing", time.time() - t0)
    return st


# --------------------------------------------------------------------------
# stage-2 correction study

_TOOLS = ["mocha", "jest", "eslint", "tsc", "webpack", "karma", "prettier", "nyc", "ava", "gulp", "grunt", "rollup"]
_FLAGS = ["--recursive", "--colors", "--exit", "--watch", "--fix", "--config", "--coverage", "--silent",
          "--bail", "--verbose", "--timeout", "--reporter"]
_PATHS = ["./test", "./test/config.js", "./src", "./spec/unit", "./build/tsconfig.json", "./lib/index.js"]


def escape_heavy(rng: random.Random) -> str:
    """A benign build/test command wrapped in triple carets, like npm shims on Windows."""
    args = rng.sample(_FLAGS, rng.randint(2, 4)) + rng.sample(_PATHS, rng.randint(1, 2))
    rng.shuffle(args)
    wrapped = " ".join(f"^^^{a}^^^" for a in args)
    head = rng.choice(["C:\\Windows\\system32\\cmd.exe /d /s /c", "cmd.exe /d /s /c", "C:\\WINDOWS\\system32\\cmd.exe /s /c"])
    return f"{head} {rng.choice(_TOOLS)} {wrapped}"


def correction_study(clf: Classifier, st_dir: Path, seed: int) -> dict:
    rng = random.Random(seed)
    candidates = list(dict.fromkeys(escape_heavy(rng) for _ in range(400)))
    cand_p = clf.score(candidates)
    planted = [c for c, p in zip(candidates, cand_p) if p > 0.5]
    held = planted[1::2]  # half never enters the labeled set
    planted = planted[0::2]

    ds = FinetuneDataset.load(st_dir / "dataset.jsonl")
    supp_tech = {t.value for t in ARTIFICIAL_TECHNIQUES}
    supp_test = [s for s in ds.test if s.label == 1 and s.technique in supp_tech]

    def recall(model: Classifier) -> float:
        p = model.score([s.raw for s in supp_test])
        return float(np.mean(p >= 0.5))

    fresh = synth_corpus(seed + 1, 900)
    neg = [LabeledDetection(f"fp-{i}", raw, float(p), Category.OBFUSCATED_BENIGN) for i, (raw, p) in enumerate(
        (c, p) for c, p in zip(planted, clf.score(planted)))]
    benign_raw = [l.raw for l in fresh[:700]]
    neg += [LabeledDetection(f"benign-{i}", r, 0.0, Category.NON_OBFUSCATED) for i, r in enumerate(benign_raw)]
    mal_pool = generate_dataset(fresh[700:], {t: 1.0 for t in ARTIFICIAL_TECHNIQUES}, 38, seed + 2).samples
    mal = [LabeledDetection(f"mal-{i}", s.obfuscated, 1.0, Category.OBFUSCATED_MALICIOUS) for i, s in enumerate(mal_pool)]
    supplement = [ObfuscatedSample(r["original"], r["obfuscated"], Technique(r["technique"]), r["seed"], r["intensity"],
                                   r.get("source_id", ""))
                  for r in map(json.loads, (st_dir / "artificial.jsonl").read_text(encoding="utf-8").splitlines())]

    before = recall(clf)
    res = correct_stage(clf, neg + mal, supplement, seed)
    after = recall(res.classifier)
    p_planted = res.classifier.score(planted) if planted else np.array([])
    p_held = res.classifier.score(held) if held else np.array([])
    p_mundane = res.classifier.score([l.raw for l in synth_corpus(seed + 3, 500)])
    return {
        "candidates": len(candidates),
        "planted": len(planted),
        "held_out": len(held),
        "positives": res.positives,
        "negatives": res.negatives,
        "supplement": res.supplement,
        "ratio": res.ratio,
        "planted_below_0.5": float(np.mean(p_planted < 0.5)) if planted else None,
        "held_out_below_0.5": float(np.mean(p_held < 0.5)) if held else None,
        "supplement_recall_before": before,
        "supplement_recall_after": after,
        "supplement_test_n": len(supp_test),
        "benign_fp_rate_after": float(np.mean(p_mundane >= 0.5)),
    }


# --------------------------------------------------------------------------
# precision-mode agreement and regression corpus


def bench_logs(seed: int, n: int = 10_000) -> list[str]:
    benign = synth_corpus(seed, n - n // 11)
    obf = generate_dataset(benign[:2000], None, n // 11, seed + 1).samples
    return [l.raw for l in benign] + [s.obfuscated for s in obf]


def regression_scores(clf: Classifier) -> dict:
    doc = json.loads(REGRESSION.read_text(encoding="utf-8"))
    out = {}
    for group, items in doc.items():
        probs = clf.score([it["raw"] for it in items])
        out[group] = {it["id"]: float(p) for it, p in zip(items, probs)}
    return out


def _cached(path: Path, force: bool, fn):
    if path.exists() and not force:
        return json.loads(path.read_text(encoding="utf-8"))
    t0 = time.time()
    data = fn()
    data["seconds"] = round(time.time() - t0, 1)
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return data


def ensure(force: bool = False) -> dict:
    """Build whatever is missing; returns the paths and cached study results."""
    ROOT.mkdir(parents=True, exist_ok=True)
    pre, scratch = run("pretrained"), run("scratch")
    clf = load_classifier(pre.dir)
    seed = BASE["seed"]
    studies = {
        "correction": _cached(ROOT / "correction.json", force, lambda: correction_study(clf, pre.dir, seed + 900)),
        "bench": _cached(ROOT / "bench.json", force,
                         lambda: json.loads(bench(clf, bench_logs(seed + 1000), batch_size=128).to_json())),
        "regression": _cached(ROOT / "regression_scores.json", force, lambda: regression_scores(clf)),
    }
    return {"pretrained": pre.dir, "scratch": scratch.dir, **studies}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--force", action="store_true", help="recompute the derived studies")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    res = ensure(args.force)
    print(json.dumps({k: (str(v) if isinstance(v, Path) else v) for k, v in res.items()}, indent=2))
