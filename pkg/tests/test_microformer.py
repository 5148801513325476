import warnings

import numpy as np
import pytest

from _oracles import gradcheck, gradcheck_setup
from obfusdetect.microformer import (AdamW, Batch, CheckpointError, LossSpec, ModelConfig, Role, forward,
                                     init_params, linear_schedule, load_checkpoint, param_count, preset,
                                     save_checkpoint, value_and_grad)


def shape_arithmetic(e, h, n, i, vocab=20_000, pos=256):
    """Discriminator parameter count written out by hand."""
    emb = vocab * e + pos * e + 2 * e + (e * h + h if e != h else 0)
    layer = 4 * (h * h + h) + 2 * 2 * h + (h * i + i) + (i * h + h)
    heads = (h * h + h) + (h + 1) + (h * h + h) + (h + 1)
    return emb + n * layer + heads


@pytest.mark.parametrize("name, target", [("large", 9e6), ("medium", 6e6), ("small", 4.3e6), ("miniature", 750e3)])
def test_param_counts(name, target):
    cfg = preset(name, 20_000)
    e, h, n, i = cfg.embedding_size, cfg.hidden_size, cfg.num_hidden_layers, cfg.intermediate_size
    assert param_count(cfg) == shape_arithmetic(e, h, n, i)
    tol = 0.10 if name == "miniature" else 0.05
    assert abs(param_count(cfg) - target) / target < tol


def test_preset_table():
    assert (preset("small-gen", 100).hidden_size, preset("small-gen", 100).num_attention_heads) == (64, 1)
    assert preset("miniature-gen", 100).embedding_size == 16
    with pytest.raises(ValueError):
        ModelConfig(32, 66, 1, 64, 4, 100)
    with pytest.raises(KeyError):
        preset("huge", 100)


def _batch(cfg, seed=0, B=2, T=9):
    rng = np.random.default_rng(seed)
    return Batch(rng.integers(5, cfg.vocab_size, (B, T)), np.ones((B, T), dtype=bool))


def test_init_deterministic():
    cfg = preset("miniature", 50, 32)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.abs(v).max() <= 0.04 + 1e-7 for k, v in a.items() if k.endswith(".w"))


def test_generator_rows_sum_to_one():
    cfg = preset("miniature-gen", 50, 32)
    p = init_params(cfg, 0)
    b = _batch(cfg)
    out = forward(p, cfg, b, predict_mask=np.ones(b.shape, dtype=bool))
    np.testing.assert_allclose(out.gen_probs.sum(-1), 1.0, atol=1e-6)


def test_identical_rows_identical_outputs():
    cfg = preset("miniature", 50, 32)
    p = init_params(cfg, 0)
    ids = np.tile(np.arange(5, 14), (2, 1))
    out = forward(p, cfg, Batch(ids, np.ones_like(ids, dtype=bool)))
    np.testing.assert_array_equal(out.seq_probs[0], out.seq_probs[1])
    assert ((out.token_probs > 0) & (out.token_probs < 1)).all()


def test_sequence_head_closed_form():
    cfg = preset("miniature", 50, 32)
    p = {k: np.zeros_like(v) for k, v in init_params(cfg, 0).items()}
    for k in p:
        if k.endswith(".g"):
            p[k][:] = 1.0
    p["cls.b"][0] = 0.7
    out = forward(p, cfg, Batch([[5]], [[True]]))
    assert out.seq_probs[0] == pytest.approx(1 / (1 + np.exp(-0.7)), abs=1e-7)


def test_attention_masking_and_padding_invariance():
    cfg = preset("miniature", 50, 32)
    # float64 so the check sees masking errors, not float32 matmul reassociation
    p = init_params(cfg, 1, std=0.2, dtype=np.float64)
    ids = np.array([[3, 7, 9, 11, 4]])
    a = forward(p, cfg, Batch(ids, np.ones_like(ids, dtype=bool)), keep_cache=True)
    padded = np.array([[3, 7, 9, 11, 4, 0, 0, 0]])
    mask = padded != 0
    mask[0, 0] = True
    b = forward(p, cfg, Batch(padded, mask), keep_cache=True)
    np.testing.assert_allclose(a.hidden[0], b.hidden[0, :5], atol=1e-6)
    P = b.cache["layers"][0]["P"]
    np.testing.assert_allclose(P.sum(-1), 1.0, atol=1e-6)
    assert (P[..., 5:] == 0).all()


def test_forward_errors():
    cfg = preset("miniature", 50, 8)
    p = init_params(cfg, 0)
    with pytest.raises(ValueError):
        forward(p, cfg, Batch(np.full((1, 9), 5), np.ones((1, 9), dtype=bool)))
    with pytest.raises(ValueError):
        forward(p, cfg, Batch([[60]], [[True]]))
    bad = dict(p)
    bad["l0.q.w"] = np.full_like(p["l0.q.w"], np.inf)
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="layer 0"):
        forward(bad, cfg, Batch([[5, 6]], [[True, True]]))


@pytest.mark.parametrize("role", [Role.DISCRIMINATOR, Role.GENERATOR])
def test_gradcheck(role):
    worst = gradcheck(*gradcheck_setup(role))
    assert max(worst.values()) < 1e-4, worst


def test_key_bias_gradient_is_zero():
    # softmax is shift invariant per query, so the key bias cannot change the loss
    cfg, p, b, spec = gradcheck_setup()
    _, g, _ = value_and_grad(p, cfg, b, spec)
    assert np.abs(g["l0.k.b"]).max() < 1e-12


def test_zero_weight_zero_grad():
    cfg, p, b, _ = gradcheck_setup()
    _, g, _ = value_and_grad(p, cfg, b, LossSpec())
    assert all(not np.any(v) for v in g.values())


def test_tied_embedding_two_paths():
    cfg, p, b, spec = gradcheck_setup(Role.GENERATOR)
    _, g, _ = value_and_grad(p, cfg, b, spec, split_tied=True)
    assert np.abs(g["emb.tok@input"]).max() > 0
    assert np.abs(g["emb.tok@output"]).max() > 0
    np.testing.assert_allclose(g["emb.tok"], g["emb.tok@input"] + g["emb.tok@output"], atol=1e-12)
    # a row never used as input only receives the output-projection gradient
    unused = sorted(set(range(cfg.vocab_size)) - set(b.token_ids.ravel()))[0]
    assert not g["emb.tok@input"][unused].any() and g["emb.tok@output"][unused].any()


def test_checkpoint_roundtrip(tmp_path):
    cfg = preset("miniature", 60, 32)
    p = init_params(cfg, 2)
    save_checkpoint(tmp_path / "m.ckpt", p, cfg, "abc")
    q, cfg2 = load_checkpoint(tmp_path / "m.ckpt", tokenizer_hash="abc")
    assert cfg2 == cfg
    assert all(np.array_equal(p[k], q[k]) and p[k].dtype == q[k].dtype for k in p)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", vocab_size=61)
    with pytest.warns(UserWarning):
        load_checkpoint(tmp_path / "m.ckpt", tokenizer_hash="other")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_sixteen_bit(tmp_path):
    cfg = preset("miniature", 60, 32)
    p = init_params(cfg, 2, std=0.1)
    b = _batch(cfg, B=8, T=20)
    ref = forward(p, cfg, b).seq_probs
    assert np.abs(forward(p, cfg, b, precision="bits16").seq_probs - ref).max() < 1e-2
    save_checkpoint(tmp_path / "h.ckpt", p, cfg, precision="bits16")
    q, _ = load_checkpoint(tmp_path / "h.ckpt")
    assert np.abs(forward(q, cfg, b).seq_probs - ref).max() < 1e-2


def test_adamw_and_schedule():
    assert linear_schedule(0, 100, 1.0) == pytest.approx(1 / 6)
    assert linear_schedule(5, 100, 1.0) == pytest.approx(1.0)
    assert linear_schedule(99, 100, 1.0) < 0.02
    p = {"w": np.array([1.0, -2.0]), "emb.ln.g": np.array([1.0])}
    opt = AdamW(lr=0.1, weight_decay=0.0)
    for _ in range(200):
        opt.step(p, {"w": 2 * p["w"], "emb.ln.g": np.zeros(1)}, 0.1)
    assert np.abs(p["w"]).max() < 0.05
