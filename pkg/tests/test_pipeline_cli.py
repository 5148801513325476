import json
import re
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from obfusdetect.cli import main
from obfusdetect.corpus import BINARIES, iter_logs, synth_corpus
from obfusdetect.normalizer import normalize
from obfusdetect.pipeline import RunConfig, StageError, run_pipeline
from obfusdetect.tokenizer import pretokenize

GOLDEN = Path(__file__).parent / "fixtures" / "synth_corpus_seed0_n5.jsonl"

TINY = dict(
    seed=3, corpus_size=400, vocab_size=400, tokenizer_lines=400, preset="miniature", max_len=32,
    n_artificial=44, n_real=4, n_pretrain_obfuscated=40, pretrain_corpus_size=200,
    pretrain={"steps": 4, "batch_size": 8}, finetune={"epochs": 1, "batch_size": 16},
)


# synthetic corpus ------------------------------------------------------------

def test_synth_corpus_golden(tmp_path):
    out = tmp_path / "c.jsonl"
    assert main(["--seed", "0", "synth-corpus", "--n", "5", "--output", str(out)]) == 0
    assert out.read_bytes() == GOLDEN.read_bytes()


def test_synth_corpus_coverage():
    logs = synth_corpus(5, 300)
    assert len({l.raw for l in logs}) > 250
    for b in BINARIES:
        assert any(re.search(b, l.raw, re.I) for l in logs), b
    for l in logs:
        assert "\n" not in l.raw and l.raw.strip()
        assert pretokenize(normalize(l.raw).text)


# pipeline ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    st = run_pipeline(RunConfig(run_dir=str(d), **TINY))
    return d, st


def test_pipeline_runs_all(tiny_run):
    d, st = tiny_run
    assert st.ran == ["normalize", "train-tokenizer", "pretrain", "build-dataset", "finetune", "evaluate", "sweep"]
    for rel in ("report.json", "sweep.csv", "classifier/model.ckpt", "test_scores.jsonl", "pretrain/curve.jsonl"):
        assert (d / rel).exists(), rel
    assert not (d / ".lock").exists()


def test_resume_is_noop(tiny_run):
    d, _ = tiny_run
    before = (d / "report.json").read_bytes()
    st = run_pipeline(RunConfig(run_dir=str(d), **TINY))
    assert st.ran == [] and len(st.skipped) == 7
    assert (d / "report.json").read_bytes() == before


def test_rerun_reproduces(tiny_run, tmp_path):
    d, _ = tiny_run
    run_pipeline(RunConfig(run_dir=str(tmp_path), **TINY))
    assert (tmp_path / "report.json").read_bytes() == (d / "report.json").read_bytes()


def test_missing_checkpoint_resumes_from_finetune(tiny_run, tmp_path):
    d, _ = tiny_run
    run_dir = tmp_path / "copy"
    shutil.copytree(d, run_dir)
    (run_dir / "classifier" / "model.ckpt").unlink()
    st = run_pipeline(RunConfig(run_dir=str(run_dir), **TINY))
    assert st.ran[0] == "finetune"
    assert st.skipped[:4] == ["normalize", "train-tokenizer", "pretrain", "build-dataset"]
    # the rebuilt checkpoint is bit-identical, so evaluation stays valid
    assert (run_dir / "classifier" / "model.ckpt").read_bytes() == (d / "classifier" / "model.ckpt").read_bytes()
    assert (run_dir / "report.json").read_bytes() == (d / "report.json").read_bytes()


def test_config_change_invalidates_downstream(tiny_run, tmp_path):
    d, _ = tiny_run
    run_dir = tmp_path / "copy"
    shutil.copytree(d, run_dir)
    st = run_pipeline(RunConfig(run_dir=str(run_dir), **{**TINY, "thresholds": [0.5, 0.9]}))
    assert st.ran == ["evaluate", "sweep"]


def test_modified_artifact_refused(tiny_run, tmp_path):
    d, _ = tiny_run
    run_dir = tmp_path / "copy"
    shutil.copytree(d, run_dir)
    with open(run_dir / "dataset.jsonl", "a") as fh:
        fh.write("\n")
    with pytest.raises(StageError, match="modified"):
        run_pipeline(RunConfig(run_dir=str(run_dir), **TINY))


def test_lock(tmp_path):
    (tmp_path / ".lock").write_text("1")
    with pytest.raises(RuntimeError, match="locked"):
        run_pipeline(RunConfig(run_dir=str(tmp_path), **TINY))


def test_unknown_config_key():
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"bogus": 1})


# command line --------------------------------------------------------------------

def _cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "obfusdetect.cli", *map(str, args)], capture_output=True,
                          text=True, cwd=cwd, timeout=600)


def test_exit_usage():
    r = _cli("frobnicate")
    assert r.returncode == 1
    assert _cli("synth-corpus", "--n", "0", "--output", "-").returncode == 1


def test_exit_data(tmp_path):
    r = _cli("normalize", "--input", tmp_path / "missing.jsonl", "--output", "-")
    assert r.returncode == 2 and "missing.jsonl" in r.stderr
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert _cli("normalize", "--input", bad, "--output", "-").returncode == 2


def test_exit_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{")
    assert _cli("--config", cfg, "synth-corpus", "--n", "2", "--output", "-").returncode == 1


def test_exit_diverged(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "pretrain": {"steps": 20, "batch_size": 8, "learning_rate": 1e12,
                                                     "warmup_frac": 0.0}}))
    r = _cli("--config", cfg, "run-pipeline", "--run-dir", tmp_path / "run")
    assert r.returncode == 3, r.stderr
    assert "diverged" in r.stderr


def test_cli_chain(tmp_path, tiny_run):
    d, _ = tiny_run
    logs = tmp_path / "logs.jsonl"
    assert main(["--seed", "1", "synth-corpus", "--n", "30", "--output", str(logs)]) == 0
    norm = tmp_path / "norm.jsonl"
    assert main(["normalize", "--input", str(logs), "--output", str(norm)]) == 0
    assert len(norm.read_text().splitlines()) == 30
    det = tmp_path / "det.jsonl"
    assert main(["detect", "--classifier", str(d / "classifier"), "--input", str(logs), "--output", str(det)]) == 0
    recs = [json.loads(l) for l in det.read_text().splitlines()]
    assert [r["raw"] for r in recs] == [l.raw for l in iter_logs(logs)]
    tri = tmp_path / "triage.jsonl"
    assert main(["triage-export", "--detections", str(det), "--floor", "0", "--output", str(tri)]) == 0
    assert main(["triage-import", "--input", str(tri)]) == 0
    assert main(["triage-import", "--input", str(tri), "--require-category"]) == 2


def test_closed_pipe_is_clean(tmp_path):
    logs = tmp_path / "logs.jsonl"
    main(["synth-corpus", "--n", "3000", "--output", str(logs)])
    cmd = f"'{sys.executable}' -m obfusdetect.cli normalize --input '{logs}' | head -n 1; exit ${{PIPESTATUS[0]}}"
    r = subprocess.run(["bash", "-c", cmd], capture_output=True, text=True, timeout=300)
    assert r.returncode == 0 and r.stderr == ""
    assert r.stdout.count("\n") == 1
