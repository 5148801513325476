import math
import warnings

import numpy as np
import pytest

from obfusdetect.classifier import Classifier, encode_texts, make_batch
from obfusdetect.corpus import Category, LabeledDetection
from obfusdetect.microformer import init_params, preset
from obfusdetect.obfugen import Technique, generate_dataset
from obfusdetect.trainer import (TAG_IDENTICAL, TAG_MARKERS, TAG_RARE, BatchRecord, FinetuneDataset, FinetuneSpec,
                                 LabeledSample, PretrainSpec, TrainingDiverged, build_finetune_dataset,
                                 choose_masks, correct_stage, escape_density, finetune, focal_loss,
                                 loss_peak_report, mask_and_corrupt, pretrain)

MOCHA = ("C:\\Windows\\system32\\cmd.exe /d /s /c mocha ^^^--recursive^^^ ^^^--colors^^^ "
         "^^^./test/config.js^^^ ^^^./test^^^ ^^^--exit^^^")


# focal loss ---------------------------------------------------------------

def test_focal_examples():
    assert focal_loss(0.5, 0.0) == pytest.approx(math.log(2), abs=1e-12)
    assert focal_loss(1.0, 3.0) == 0.0
    assert focal_loss(0.9, 2.0) == pytest.approx(0.1 ** 2 * -math.log(0.9), abs=1e-15)
    assert abs(focal_loss(0.9, 2.0) - 1.05361e-3) < 1e-8
    assert focal_loss(0.0, 2.0) == pytest.approx(-math.log(1e-12))


def test_focal_grid_properties():
    p = np.linspace(1e-3, 1 - 1e-3, 1000)
    ce = -np.log(p)
    np.testing.assert_allclose(focal_loss(p, 0.0, reduction="none"), ce, atol=1e-12, rtol=0)
    for g in (0.5, 1.0, 2.0, 5.0):
        fl = focal_loss(p, g, reduction="none")
        assert (fl <= ce).all()
        assert (np.diff(fl) < 0).all()
    assert focal_loss(p, 2.0) == pytest.approx(focal_loss(p, 2.0, reduction="none").mean())


# dataset assembly -----------------------------------------------------------

@pytest.fixture(scope="module")
def pools(corpus_small):
    art_t = {t: 1.0 for t in Technique if t not in (Technique.WHITESPACE_INSERTION, Technique.CASE_MIXING)}
    art = generate_dataset(corpus_small, art_t, 100, 1).samples
    real = generate_dataset(corpus_small, {Technique.WHITESPACE_INSERTION: 1, Technique.CASE_MIXING: 1}, 8, 2).samples
    return art, real


def test_dataset_ratio_and_split(corpus_small, pools):
    art, real = pools
    ds = build_finetune_dataset(corpus_small, art, real, FinetuneSpec(), 0)
    assert abs(ds.ratio - 10.0) <= 0.5
    n = len(ds.train) + len(ds.test)
    assert abs(len(ds.test) / n - 0.25) < 0.03
    assert not {id(s) for s in ds.train} & {id(s) for s in ds.test}
    test_tech = {s.technique for s in ds.test if s.label}
    train_tech = {s.technique for s in ds.train if s.label}
    assert test_tech <= train_tech


def test_dataset_errors(corpus_small, pools):
    with pytest.raises(ValueError, match="30"):
        FinetuneSpec(imbalance_ratio=35)
    FinetuneSpec(imbalance_ratio=35, allow_unstable_ratio=True)
    with pytest.raises(ValueError):
        build_finetune_dataset(corpus_small, [], [], FinetuneSpec(), 0)
    with pytest.warns(UserWarning):
        build_finetune_dataset(corpus_small, pools[0], [], FinetuneSpec(), 0)


def test_dataset_save_load(tmp_path, corpus_small, pools):
    ds = build_finetune_dataset(corpus_small, *pools, FinetuneSpec(), 0)
    ds.save(tmp_path / "d.jsonl")
    back = FinetuneDataset.load(tmp_path / "d.jsonl")
    assert back.train == ds.train and back.test == ds.test


# corruption -----------------------------------------------------------------

def test_choose_masks_exact(tok_small):
    ids = [[tok_small.cls_id] + list(range(40, 58)) + [tok_small.sep_id]]
    b = make_batch(ids, tok_small.pad_id)
    masked, skipped = choose_masks(b, [tok_small.cls_id, tok_small.sep_id, tok_small.pad_id], 3 / 18,
                                   np.random.default_rng(0))
    assert masked.sum() == 3 and skipped == 0
    assert not masked[0, 0] and not masked[0, -1]


def test_corruption_flags_subset(tok_small):
    cfg = preset("miniature-gen", tok_small.vocab_size, 32)
    gen = init_params(cfg, 0)
    seqs = [[tok_small.cls_id] + list(range(40, 58)) + [tok_small.sep_id]] * 4 + [[tok_small.cls_id, tok_small.sep_id]]
    b = make_batch(seqs, tok_small.pad_id)
    c = mask_and_corrupt(b, gen, cfg, tok_small, 0.15, 3)
    assert not (c.replaced & ~c.masked).any()
    assert c.skipped == 1
    d = mask_and_corrupt(b, gen, cfg, tok_small, 0.15, 3)
    np.testing.assert_array_equal(c.disc_batch.token_ids, d.disc_batch.token_ids)


# pretraining ------------------------------------------------------------------

@pytest.fixture(scope="module")
def encoded(corpus_small, tok_small):
    return encode_texts(tok_small, [l.raw for l in corpus_small[:400]], 32)


def test_pretrain_zero_steps(tok_small, encoded):
    g, d = preset("miniature-gen", tok_small.vocab_size, 32), preset("miniature-disc", tok_small.vocab_size, 32)
    res = pretrain(g, d, encoded, PretrainSpec(steps=0, max_len=32), tok_small)
    init = init_params(d, 0)
    assert all(np.array_equal(res.disc_params[k], init[k]) for k in init)


def test_pretrain_learns(tmp_path, tok_small, encoded):
    g, d = preset("miniature-gen", tok_small.vocab_size, 32), preset("miniature-disc", tok_small.vocab_size, 32)
    res = pretrain(g, d, encoded, PretrainSpec(steps=60, max_len=32, batch_size=16, learning_rate=2e-3), tok_small,
                   log_path=tmp_path / "curve.jsonl")
    mlm = [r["mlm"] for r in res.curve]
    assert np.mean(mlm[-10:]) < np.mean(mlm[:10])
    assert (tmp_path / "curve.jsonl").read_text().count("\n") == 60


def test_pretrain_diverges(tok_small, encoded):
    g, d = preset("miniature-gen", tok_small.vocab_size, 32), preset("miniature-disc", tok_small.vocab_size, 32)
    with pytest.raises(TrainingDiverged, match="diverged at step"):
        pretrain(g, d, encoded, PretrainSpec(steps=30, max_len=32, learning_rate=1e12, warmup_frac=0.0), tok_small)


# fine-tuning ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_ds(corpus_small, pools):
    return build_finetune_dataset(corpus_small[:600], *pools, FinetuneSpec(imbalance_ratio=3), 0)


def test_focal_gamma0_equals_bce(tok_small, small_ds):
    cfg = preset("miniature", tok_small.vocab_size, 32)
    p = init_params(cfg, 0)
    train = small_ds.train[:96]
    a = finetune(p, cfg, train, tok_small, FinetuneSpec(gamma=0, epochs=1, max_len=32, seed=1))
    b = finetune(p, cfg, train, tok_small, FinetuneSpec(gamma=0, epochs=1, max_len=32, seed=1, loss="bce"))
    np.testing.assert_allclose(a.losses, b.losses, atol=1e-9, rtol=0)


def test_finetune_trace_and_metrics(tok_small, small_ds):
    cfg = preset("miniature", tok_small.vocab_size, 32)
    res = finetune(init_params(cfg, 0), cfg, small_ds, tok_small, FinetuneSpec(epochs=2, max_len=32, learning_rate=1e-3))
    per_epoch = math.ceil(len(small_ds.train) / 32)
    assert len(res.loss_trace) == 2 * per_epoch
    assert [m["epoch"] for m in res.epoch_metrics] == [1, 2]
    assert set(res.epoch_metrics[0]["classes"]) == {"benign", "obfuscated"}
    assert res.loss_trace[0].sample_ids and len(res.loss_trace[0].sample_losses) == len(res.loss_trace[0].sample_ids)
    assert np.mean(res.losses[-per_epoch:]) < np.mean(res.losses[:per_epoch])


# correction ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def clf(tok_small):
    cfg = preset("miniature", tok_small.vocab_size, 32)
    return Classifier(init_params(cfg, 0), cfg, tok_small, 32)


def test_correct_noop_and_errors(clf, pools):
    with pytest.warns(UserWarning):
        res = correct_stage(clf, [], pools[0], 0)
    assert res.classifier is clf
    with pytest.raises(ValueError, match="category"):
        correct_stage(clf, [LabeledDetection("a", "cmd /c dir", 0.6)], pools[0], 0)
    neg = [LabeledDetection("a", "cmd /c dir", 0.6, Category.NON_OBFUSCATED)]
    with pytest.raises(ValueError, match="positives"):
        correct_stage(clf, neg, [], 0)


def test_correct_ratio(clf, corpus_small, pools):
    pos = [LabeledDetection(f"m{i}", s.obfuscated, 0.9, Category.OBFUSCATED_MALICIOUS) for i, s in enumerate(
        generate_dataset(corpus_small, None, 38, 4).samples)]
    neg = [LabeledDetection(f"n{i}", l.raw, 0.6, Category.NON_OBFUSCATED if i % 5 else Category.OBFUSCATED_BENIGN)
           for i, l in enumerate(corpus_small[:731])]
    spec = FinetuneSpec(epochs=1, max_len=32, learning_rate=1e-4)
    res = correct_stage(clf, pos + neg, pools[0], 0, spec)
    assert res.negatives == 731
    assert abs(res.ratio - 10.0) / 10.0 <= 0.05
    assert res.supplement == res.positives - 38
    assert res.classifier.meta.get("corrected")


# loss peaks --------------------------------------------------------------------------

def _trace(losses, ids_per_batch=2):
    return [BatchRecord(i, 0, l, 1e-4, list(range(i * ids_per_batch, (i + 1) * ids_per_batch)),
                        [l] * ids_per_batch) for i, l in enumerate(losses)]


def test_peaks_constant_trace_empty():
    data = [LabeledSample("x", 0)] * 200
    assert loss_peak_report(_trace([0.2] * 100), data) == []


def test_peaks_tags():
    data = [LabeledSample(f"cmd /c dir {i}", 0) for i in range(200)]
    data[121] = LabeledSample("cmd /c dir", 1, "caret_insertion", "cmd /c dir", "", "artificial")
    data[120] = LabeledSample(MOCHA, 0)
    losses = [0.1] * 100
    losses[60] = 3.0
    rep = loss_peak_report(_trace(losses), data)
    tags = {p.sample_id: p.tags for p in rep}
    assert TAG_IDENTICAL in tags[121] and TAG_RARE in tags[121]
    assert TAG_MARKERS in tags[120]
    assert escape_density(MOCHA) > 0.2


def test_finetune_diverges(tok_small, small_ds):
    cfg = preset("miniature", tok_small.vocab_size, 32)
    spec = FinetuneSpec(epochs=2, max_len=32, learning_rate=1e12, warmup_frac=0.0)
    with pytest.raises(TrainingDiverged) as ei:
        finetune(init_params(cfg, 0), cfg, small_ds.train[:200], tok_small, spec)
    assert ei.value.step >= 1
