import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obfusdetect.classifier import Classifier
from obfusdetect.corpus import Category, ExecutionLog
from obfusdetect.detector import (TRIAGE_HEADER, DetectionResult, bench, detection_sets, evaluate, score_stream,
                                  sweep, triage_export, triage_import)
from obfusdetect.microformer import init_params, preset

from _oracles import brute_force_metrics


@pytest.fixture(scope="module")
def clf(tok_small):
    cfg = preset("miniature", tok_small.vocab_size, 32)
    return Classifier(init_params(cfg, 3), cfg, tok_small, 32)


@pytest.fixture(scope="module")
def raws(corpus_small):
    return [l.raw for l in corpus_small[:150]]


# scoring --------------------------------------------------------------------

def test_empty_stream(clf):
    assert list(score_stream(clf, [])) == []


def test_order_and_duplicates(clf, raws):
    logs = raws[:40] + raws[:5]
    res = list(score_stream(clf, logs, batch_size=7))
    assert [r.raw for r in res] == logs
    assert [r.log_ref for r in res] == [str(i) for i in range(45)]
    assert [r.probability for r in res[40:]] == [r.probability for r in res[:5]]


def test_batch_size_independent(clf, raws):
    a = [r.probability for r in score_stream(clf, raws, batch_size=1)]
    b = [r.probability for r in score_stream(clf, raws, batch_size=64)]
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_malformed_logs_continue(clf, raws):
    logs = [raws[0], {"source_id": "x", "raw": None}, 17, b"cmd /c \xff dir", ExecutionLog(raws[1], "host-1")]
    res = list(score_stream(clf, logs))
    assert len(res) == 5
    assert res[1].log_ref == "x" and res[1].error and res[1].probability == 0.0 and not res[1].decision
    assert "int" in res[2].error
    assert res[3].error == "undecodable bytes replaced" and "�" in res[3].raw
    assert res[4].log_ref == "host-1" and res[0].error is None


def test_threshold_and_tokenizer_guard(clf, raws, corpus_small):
    res = list(score_stream(clf, raws[:20], threshold=0.0))
    assert all(r.decision for r in res)
    with pytest.raises(ValueError):
        list(score_stream(clf, raws, batch_size=0))
    from obfusdetect import tokenizer as tk
    other = tk.train([l.raw for l in corpus_small[:300]], 300)
    with pytest.raises(ValueError, match="tokenizer"):
        list(score_stream(clf, raws, tokenizer=other))


# evaluation -----------------------------------------------------------------------

def _set(labels):
    return [{"raw": f"cmd {i}", "label": y, "technique": "caret_insertion" if y else None} for i, y in enumerate(labels)]


def test_perfect_and_constant_stubs():
    labels = [0] * 30 + [1] * 10
    perfect = evaluate(lambda raws: [float(r in {f"cmd {i}" for i in range(30, 40)}) for r in raws], _set(labels))
    assert perfect.classes["obfuscated"]["precision"] == 1.0 == perfect.classes["obfuscated"]["recall"]
    assert perfect.classes["benign"]["recall"] == 1.0
    zero = evaluate(lambda raws: [0.0] * len(raws), _set(labels))
    assert zero.classes["obfuscated"]["recall"] == 0.0
    assert zero.classes["benign"]["precision"] == 0.75
    assert zero.techniques["caret_insertion"]["recall"] == 0.0


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    labels = (rng.random(1000) < 0.1).astype(int)
    p = np.clip(labels * 0.4 + rng.random(1000) * 0.7, 0, 1)
    rep = evaluate(None, _set(labels), probabilities=p, threshold=0.6)
    want = brute_force_metrics(labels, (p >= 0.6).astype(int))
    for cls, (prec, rec, tp, fp, fn) in want.items():
        got = rep.classes[cls]
        assert (got["tp"], got["fp"], got["fn"]) == (tp, fp, fn)
        assert got["precision"] == pytest.approx(prec, abs=1e-12) and got["recall"] == pytest.approx(rec, abs=1e-12)
    for row in rep.sweep:
        d = p >= row.threshold
        assert row.detections == d.sum() and row.true_positives == (d & (labels == 1)).sum()


def test_threshold_validation():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        sweep([0.3], [1], [1.5])
    with pytest.raises(ValueError):
        evaluate(None, _set([1]), probabilities=[0.3], threshold=-0.1)
    with pytest.raises(ValueError):
        evaluate(None, [], probabilities=[])


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60),
       st.lists(st.floats(0, 1), min_size=2, max_size=8, unique=True))
def test_detection_sets_nested(probs, thresholds):
    ts = sorted(thresholds)
    sets = detection_sets(probs, ts)
    for lo, hi in zip(sets, sets[1:]):
        assert hi <= lo


def test_categories_counted():
    items = _set([1, 1, 0])
    items[0]["category"] = Category.OBFUSCATED_MALICIOUS
    items[2]["category"] = "obfuscated_benign"
    rep = evaluate(None, items, probabilities=[0.9, 0.1, 0.7])
    assert rep.categories == {"obfuscated_benign": {"detected": 1, "missed": 0},
                              "obfuscated_malicious": {"detected": 1, "missed": 0}}
    assert "threshold,detections" in rep.sweep_csv()


# triage ------------------------------------------------------------------------

def test_triage_empty(tmp_path):
    path = tmp_path / "t.jsonl"
    assert triage_export([], path) == 0
    assert json.loads(path.read_text()) == TRIAGE_HEADER
    assert triage_import(path) == []


def test_triage_round_trip(tmp_path):
    res = [DetectionResult("a", 0.05, False, raw="dir"), DetectionResult("b", 0.6, True, raw="c^m^d"),
           DetectionResult("c", 0.95, True, Category.OBFUSCATED_BENIGN, raw="é \"q\"")]
    path = tmp_path / "t.jsonl"
    assert triage_export(res, path) == 2
    back = triage_import(path)
    assert [(d.log_ref, d.raw, d.probability, d.category) for d in back] == [
        ("b", "c^m^d", 0.6, None), ("c", "é \"q\"", 0.95, Category.OBFUSCATED_BENIGN)]
    with pytest.raises(ValueError, match=":2: category is empty"):
        triage_import(path, require_category=True)


def test_triage_bad_category(tmp_path):
    path = tmp_path / "t.jsonl"
    rec = {"log_ref": "a", "raw": "x", "probability": 0.5, "category": "malicious"}
    path.write_text(json.dumps(TRIAGE_HEADER) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ValueError) as ei:
        triage_import(path)
    msg = str(ei.value)
    assert ":2:" in msg and "'malicious'" in msg
    assert all(c.value in msg for c in Category)


# bench ---------------------------------------------------------------------------

def test_bench_single_log(clf, raws):
    rep = bench(clf, raws[:3], n_logs=1)
    assert [m["n_logs"] for m in rep.measurements] == [1, 1]
    assert rep.agreement in (0.0, 1.0)
    assert "emulated" in rep.to_text()
    with pytest.raises(ValueError):
        bench(clf, raws, n_logs=0)


def test_bench_agreement(clf, raws):
    rep = bench(clf, raws, batch_size=32)
    assert rep.agreement > 0.95
    assert {m["mode"] for m in rep.measurements} == {"bits32", "bits16"}
