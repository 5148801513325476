"""Encoder forward pass, task heads and hand-written reverse mode.

Parameters live in a flat ``dict[str, ndarray]`` whose keys and shapes are
fully determined by :class:`ModelConfig` (see :func:`param_shapes`). The
encoder is post-LN: ``x = LN(x + Attn(x))``, ``x = LN(x + FFN(x))``.

Generator configs carry the masked-token head, which projects hidden states
to the embedding width and scores them against the (tied) token embedding
matrix. Discriminator configs carry a per-token replaced/original head and a
pooled sequence head on the first position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .config import ModelConfig, Role

__all__ = [
    "Params",
    "Batch",
    "LossSpec",
    "Losses",
    "ForwardOutput",
    "param_shapes",
    "param_count",
    "init_params",
    "forward",
    "value_and_grad",
    "backward",
    "decays",
    "cast_params",
    "binary_focal",
    "binary_cross_entropy",
]

Params = dict  # name -> ndarray

PRECISIONS = ("bits64", "bits32", "bits16")


# --------------------------------------------------------------------------
# shapes and initialization


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, H, I, V, P = cfg.embedding_size, cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size, cfg.max_position
    s: dict[str, tuple[int, ...]] = {
        "emb.tok": (V, E),
        "emb.pos": (P, E),
        "emb.ln.g": (E,),
        "emb.ln.b": (E,),
    }
    if E != H:
        s["emb.proj.w"] = (E, H)
        s["emb.proj.b"] = (H,)
    for i in range(cfg.num_hidden_layers):
        for m in "qkvo":
            s[f"l{i}.{m}.w"] = (H, H)
            s[f"l{i}.{m}.b"] = (H,)
        s[f"l{i}.ln1.g"] = (H,)
        s[f"l{i}.ln1.b"] = (H,)
        s[f"l{i}.ff1.w"] = (H, I)
        s[f"l{i}.ff1.b"] = (I,)
        s[f"l{i}.ff2.w"] = (I, H)
        s[f"l{i}.ff2.b"] = (H,)
        s[f"l{i}.ln2.g"] = (H,)
        s[f"l{i}.ln2.b"] = (H,)
    if cfg.role is Role.GENERATOR:
        s["gen.dense.w"] = (H, E)
        s["gen.dense.b"] = (E,)
        s["gen.ln.g"] = (E,)
        s["gen.ln.b"] = (E,)
        s["gen.bias"] = (V,)
    else:
        s["rtd.dense.w"] = (H, H)
        s["rtd.dense.b"] = (H,)
        s["rtd.out.w"] = (H,)
        s["rtd.out.b"] = (1,)
        s["pool.w"] = (H, H)
        s["pool.b"] = (H,)
        s["cls.w"] = (H,)
        s["cls.b"] = (1,)
    return s


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(shape) for shape in param_shapes(cfg).values()))


def decays(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, not to biases or norm scales.

    A ``prefix:`` (used when several models share one optimizer) is ignored.
    """
    name = name.rsplit(":", 1)[-1]
    return not (name.endswith((".b", ".g")) or name == "gen.bias")


def _truncnorm(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int, *, std: float = 0.02, dtype=np.float32) -> Params:
    """Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b") or name == "gen.bias":
            arr = np.zeros(shape)
        else:
            arr = _truncnorm(rng, shape, std)
        params[name] = arr.astype(dtype)
    return params


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


def _check_params(params: Params, cfg: ModelConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise KeyError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, config implies {shape}")


# --------------------------------------------------------------------------
# batches and losses


@dataclass
class Batch:
    """One padded batch.

    ``token_labels`` holds original ids at positions the generator must
    predict (``-1`` elsewhere) for generator configs, and replaced flags for
    discriminator pretraining. ``seq_labels`` are the per-sequence classes.
    """

    token_ids: np.ndarray
    attention_mask: np.ndarray
    token_labels: np.ndarray | None = None
    seq_labels: np.ndarray | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        if self.token_ids.ndim != 2 or self.token_ids.shape != self.attention_mask.shape:
            raise ValueError(
                f"token_ids {self.token_ids.shape} and attention_mask {self.attention_mask.shape} must be equal 2-d shapes"
            )
        if self.token_labels is not None:
            self.token_labels = np.asarray(self.token_labels)
            if self.token_labels.shape != self.token_ids.shape:
                raise ValueError("token_labels must match token_ids in shape")
        if self.seq_labels is not None:
            self.seq_labels = np.asarray(self.seq_labels)
            if self.seq_labels.shape != (self.token_ids.shape[0],):
                raise ValueError("seq_labels must have one entry per sequence")

    @property
    def shape(self):
        return self.token_ids.shape


@dataclass(frozen=True)
class LossSpec:
    mlm_weight: float = 0.0
    rtd_weight: float = 0.0
    seq_weight: float = 0.0
    focal_gamma: float = 0.0
    seq_loss: str = "focal"  # or "bce": plain cross-entropy written out directly


@dataclass
class Losses:
    total: float = 0.0
    mlm: float = 0.0
    rtd: float = 0.0
    seq: float = 0.0
    per_sequence: np.ndarray | None = None


def binary_focal(logits: np.ndarray, labels: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise focal loss on logits and its derivative w.r.t. the logits.

    With ``gamma == 0`` this is exactly binary cross-entropy.
    """
    s = np.where(labels > 0.5, 1.0, -1.0).astype(logits.dtype)
    z = s * logits
    log_pt = -np.logaddexp(0.0, -z)
    pt = np.exp(log_pt)
    q = -np.expm1(log_pt)  # 1 - pt without cancellation
    if gamma == 0:
        return -log_pt, s * (-q)
    qg = q**gamma
    loss = -qg * log_pt
    # dpt/dz = pt (1 - pt), so d/dz [-(1-pt)^g log pt] = g (1-pt)^g pt log pt - (1-pt)^(g+1)
    dz = gamma * qg * pt * log_pt - qg * q
    return loss, s * dz


def binary_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``-[y log p + (1-y) log(1-p)]`` with ``p = sigmoid(z)``; gradient ``p - y``."""
    log_p = -np.logaddexp(0.0, -logits)
    log_1mp = -np.logaddexp(0.0, logits)
    loss = -(labels * log_p + (1.0 - labels) * log_1mp)
    return loss, np.exp(log_p) - labels


# --------------------------------------------------------------------------
# building blocks


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, -1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def _ln_back(dy, cache):
    xh, rstd, g = cache
    d = dy.shape[-1]
    dg = (dy * xh).reshape(-1, d).sum(0)
    db = dy.reshape(-1, d).sum(0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * np.mean(dxh * xh, -1, keepdims=True))
    return dx, dg, db


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_back(dy, x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * (cdf + x * pdf)


def _dense(x, w, b):
    return x @ w + b


def _dense_back(dy, x, w):
    xf = x.reshape(-1, x.shape[-1])
    df = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, xf.T @ df, df.sum(0)


# --------------------------------------------------------------------------
# forward


@dataclass
class ForwardOutput:
    hidden: np.ndarray
    gen_logits: np.ndarray | None = None  # (n_predicted, vocab)
    gen_positions: np.ndarray | None = None  # flat indices into batch*seq
    token_logits: np.ndarray | None = None  # (batch, seq)
    seq_logits: np.ndarray | None = None  # (batch,)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def gen_probs(self) -> np.ndarray:
        z = self.gen_logits - self.gen_logits.max(-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(-1, keepdims=True)

    @property
    def token_probs(self) -> np.ndarray:
        return _sigmoid(self.token_logits)

    @property
    def seq_probs(self) -> np.ndarray:
        return _sigmoid(self.seq_logits)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _fp16(x):
    return x.astype(np.float16).astype(np.float32)


def forward(
    params: Params,
    cfg: ModelConfig,
    batch: Batch,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    precision: str = "bits32",
    predict_mask: np.ndarray | None = None,
    keep_cache: bool = False,
) -> ForwardOutput:
    """Run the encoder and the heads of ``cfg.role``.

    ``precision="bits16"`` rounds parameters and every block output to
    half precision while computing in single precision. ``predict_mask``
    selects the positions the generator scores; by default those with
    ``token_labels >= 0``.
    """
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}")
    _check_params(params, cfg)
    ids, amask = batch.token_ids, batch.attention_mask
    B, T = ids.shape
    if T > cfg.max_position:
        raise ValueError(f"sequence length {T} exceeds max_position {cfg.max_position}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    if B and not amask[:, 0].all():
        raise ValueError("first position of every sequence must be unmasked")

    q16 = precision == "bits16"
    if q16:
        params = {k: _fp16(v) for k, v in params.items()}
    p = params
    dtype = p["emb.tok"].dtype
    drop = cfg.dropout if train else 0.0
    if drop and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    quant = _fp16 if q16 else (lambda a: a)

    def dropout(x):
        if not drop:
            return x, None
        m = (rng.random(x.shape) >= drop).astype(dtype) / dtype.type(1.0 - drop)
        return x * m, m

    cache: dict = {"ids": ids, "amask": amask, "layers": []}
    x0 = p["emb.tok"][ids] + p["emb.pos"][:T]
    x, cache["emb.ln"] = _ln(x0, p["emb.ln.g"], p["emb.ln.b"], cfg.layer_norm_eps)
    if "emb.proj.w" in p:
        cache["emb.proj.x"] = x
        x = _dense(x, p["emb.proj.w"], p["emb.proj.b"])
    x, cache["emb.drop"] = dropout(quant(x))

    nh, hd = cfg.num_attention_heads, cfg.head_dim
    scale = dtype.type(1.0 / math.sqrt(hd))
    keymask = amask[:, None, None, :]
    for li in range(cfg.num_hidden_layers):
        pre = f"l{li}."
        c: dict = {"x": x}

        def heads(a):
            return a.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)

        q = heads(_dense(x, p[pre + "q.w"], p[pre + "q.b"]))
        k = heads(_dense(x, p[pre + "k.w"], p[pre + "k.b"]))
        v = heads(_dense(x, p[pre + "v.w"], p[pre + "v.b"]))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(keymask, s, -np.inf)
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        P = quant(e / e.sum(-1, keepdims=True))
        ctx = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden_size)
        o = _dense(ctx, p[pre + "o.w"], p[pre + "o.b"])
        o, c["drop1"] = dropout(o)
        x1, c["ln1"] = _ln(x + o, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.layer_norm_eps)
        x1 = quant(x1)
        a1 = _dense(x1, p[pre + "ff1.w"], p[pre + "ff1.b"])
        h1 = _gelu(a1)
        f = _dense(h1, p[pre + "ff2.w"], p[pre + "ff2.b"])
        f, c["drop2"] = dropout(f)
        x2, c["ln2"] = _ln(x1 + f, p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.layer_norm_eps)
        x2 = quant(x2)
        if not np.isfinite(x2).all():
            raise FloatingPointError(f"non-finite activations in layer {li}")
        c.update(q=q, k=k, v=v, P=P, ctx=ctx, x1=x1, a1=a1, h1=h1)
        cache["layers"].append(c)
        x = x2

    out = ForwardOutput(hidden=x)
    H = cfg.hidden_size
    if cfg.role is Role.GENERATOR:
        if predict_mask is None:
            if batch.token_labels is not None:
                predict_mask = batch.token_labels >= 0
            else:
                predict_mask = np.zeros((B, T), dtype=bool)
        sel = np.flatnonzero(np.asarray(predict_mask) & amask)
        hs = x.reshape(-1, H)[sel]
        ga = _dense(hs, p["gen.dense.w"], p["gen.dense.b"])
        gh = _gelu(ga)
        g, cache["gen.ln"] = _ln(gh, p["gen.ln.g"], p["gen.ln.b"], cfg.layer_norm_eps)
        out.gen_logits = g @ p["emb.tok"].T + p["gen.bias"]
        out.gen_positions = sel
        cache.update({"gen.sel": sel, "gen.hs": hs, "gen.ga": ga, "gen.g": g})
        if not np.isfinite(out.gen_logits).all():
            raise FloatingPointError("non-finite activations in generator head")
    else:
        ra = _dense(x, p["rtd.dense.w"], p["rtd.dense.b"])
        rh = _gelu(ra)
        out.token_logits = rh @ p["rtd.out.w"] + p["rtd.out.b"][0]
        c0 = x[:, 0]
        pz = np.tanh(_dense(c0, p["pool.w"], p["pool.b"]))
        out.seq_logits = pz @ p["cls.w"] + p["cls.b"][0]
        cache.update({"rtd.a": ra, "rtd.h": rh, "pool.c": c0, "pool.z": pz})
        if not (np.isfinite(out.token_logits).all() and np.isfinite(out.seq_logits).all()):
            raise FloatingPointError("non-finite activations in discriminator heads")
    if keep_cache:
        cache["params"] = p
        out.cache = cache
    return out


# --------------------------------------------------------------------------
# losses and reverse mode


def _losses(out: ForwardOutput, cfg: ModelConfig, batch: Batch, spec: LossSpec):
    """Scalar losses plus gradients w.r.t. the head logits."""
    L = Losses()
    d_gen = d_tok = d_seq = None
    B = batch.shape[0]
    if cfg.role is Role.GENERATOR and spec.mlm_weight:
        if batch.token_labels is None:
            raise ValueError("generator loss needs token_labels")
        logits = out.gen_logits
        m = logits.shape[0]
        if m:
            tgt = batch.token_labels.reshape(-1)[out.gen_positions].astype(np.int64)
            probs = out.gen_probs
            logp = np.log(np.maximum(probs[np.arange(m), tgt], np.finfo(probs.dtype).tiny))
            L.mlm = float(-logp.mean())
            d_gen = probs
            d_gen[np.arange(m), tgt] -= 1.0
            d_gen *= spec.mlm_weight / m
    if cfg.role is Role.DISCRIMINATOR and spec.rtd_weight:
        if batch.token_labels is None:
            raise ValueError("replaced-token loss needs token_labels")
        valid = batch.attention_mask
        n = max(int(valid.sum()), 1)
        l, dz = binary_focal(out.token_logits, batch.token_labels.astype(out.token_logits.dtype), 0.0)
        L.rtd = float((l * valid).sum() / n)
        d_tok = dz * valid * (spec.rtd_weight / n)
    if cfg.role is Role.DISCRIMINATOR and spec.seq_weight:
        if batch.seq_labels is None:
            raise ValueError("sequence loss needs seq_labels")
        y = batch.seq_labels.astype(out.seq_logits.dtype)
        if spec.seq_loss == "bce":
            l, dz = binary_cross_entropy(out.seq_logits, y)
        elif spec.seq_loss == "focal":
            l, dz = binary_focal(out.seq_logits, y, spec.focal_gamma)
        else:
            raise ValueError(f"unknown sequence loss {spec.seq_loss!r}")
        L.seq = float(l.mean())
        L.per_sequence = l
        d_seq = dz * (spec.seq_weight / max(B, 1))
    L.total = spec.mlm_weight * L.mlm + spec.rtd_weight * L.rtd + spec.seq_weight * L.seq
    return L, d_gen, d_tok, d_seq


def _backprop(cfg: ModelConfig, out: ForwardOutput, d_gen, d_tok, d_seq, split_tied: bool) -> Params:
    c = out.cache
    p = c["params"]
    grads: Params = {k: np.zeros_like(v) for k, v in p.items()}
    x = out.hidden
    B, T, H = x.shape
    dx = np.zeros_like(x)
    tok_out = None

    if d_gen is not None and d_gen.size:
        g = c["gen.g"]
        grads["gen.bias"] += d_gen.sum(0)
        tok_out = d_gen.T @ g
        grads["emb.tok"] += tok_out
        dg = d_gen @ p["emb.tok"]
        dgh, grads["gen.ln.g"], grads["gen.ln.b"] = _ln_back(dg, c["gen.ln"])
        dga = _gelu_back(dgh, c["gen.ga"])
        dhs, grads["gen.dense.w"], grads["gen.dense.b"] = _dense_back(dga, c["gen.hs"], p["gen.dense.w"])
        dx.reshape(-1, H)[c["gen.sel"]] += dhs
    if d_tok is not None:
        rh = c["rtd.h"]
        grads["rtd.out.w"] += np.tensordot(d_tok, rh, axes=([0, 1], [0, 1]))
        grads["rtd.out.b"] += d_tok.sum()
        drh = d_tok[..., None] * p["rtd.out.w"]
        dra = _gelu_back(drh, c["rtd.a"])
        dxr, grads["rtd.dense.w"], grads["rtd.dense.b"] = _dense_back(dra, x, p["rtd.dense.w"])
        dx += dxr
    if d_seq is not None:
        pz = c["pool.z"]
        grads["cls.w"] += d_seq @ pz
        grads["cls.b"] += d_seq.sum()
        dpz = d_seq[:, None] * p["cls.w"]
        dpa = dpz * (1.0 - pz * pz)
        dc0, grads["pool.w"], grads["pool.b"] = _dense_back(dpa, c["pool.c"], p["pool.w"])
        dx[:, 0] += dc0

    nh, hd = cfg.num_attention_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    for li in reversed(range(cfg.num_hidden_layers)):
        pre = f"l{li}."
        L = c["layers"][li]
        d_sum2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _ln_back(dx, L["ln2"])
        df = d_sum2 if L["drop2"] is None else d_sum2 * L["drop2"]
        dh1, grads[pre + "ff2.w"], grads[pre + "ff2.b"] = _dense_back(df, L["h1"], p[pre + "ff2.w"])
        da1 = _gelu_back(dh1, L["a1"])
        dx1, grads[pre + "ff1.w"], grads[pre + "ff1.b"] = _dense_back(da1, L["x1"], p[pre + "ff1.w"])
        dx1 = dx1 + d_sum2
        d_sum1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _ln_back(dx1, L["ln1"])
        do = d_sum1 if L["drop1"] is None else d_sum1 * L["drop1"]
        dctx, grads[pre + "o.w"], grads[pre + "o.b"] = _dense_back(do, L["ctx"], p[pre + "o.w"])
        dctx = dctx.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
        P, q, k, v = L["P"], L["q"], L["k"], L["v"]
        dP = dctx @ v.transpose(0, 1, 3, 2)
        dv = P.transpose(0, 1, 3, 2) @ dctx
        dS = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
        dq = dS @ k
        dk = dS.transpose(0, 1, 3, 2) @ q
        xin = L["x"]
        dxin = d_sum1.copy()
        for m, dm in (("q", dq), ("k", dk), ("v", dv)):
            dm = dm.transpose(0, 2, 1, 3).reshape(B, T, H)
            dxm, grads[pre + m + ".w"], grads[pre + m + ".b"] = _dense_back(dm, xin, p[pre + m + ".w"])
            dxin += dxm
        dx = dxin

    if c["emb.drop"] is not None:
        dx = dx * c["emb.drop"]
    if "emb.proj.w" in p:
        dx, grads["emb.proj.w"], grads["emb.proj.b"] = _dense_back(dx, c["emb.proj.x"], p["emb.proj.w"])
    dx0, grads["emb.ln.g"], grads["emb.ln.b"] = _ln_back(dx, c["emb.ln"])
    E = dx0.shape[-1]
    tok_in = np.zeros_like(grads["emb.tok"])
    np.add.at(tok_in, c["ids"].reshape(-1), dx0.reshape(-1, E))
    grads["emb.tok"] += tok_in
    grads["emb.pos"][:T] += dx0.sum(0)

    for name, gr in grads.items():
        if not np.isfinite(gr).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    if split_tied:
        grads["emb.tok@input"] = tok_in
        grads["emb.tok@output"] = tok_out if tok_out is not None else np.zeros_like(tok_in)
    return grads


def value_and_grad(
    params: Params,
    cfg: ModelConfig,
    batch: Batch,
    spec: LossSpec,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    precision: str = "bits32",
    predict_mask: np.ndarray | None = None,
    split_tied: bool = False,
) -> tuple[Losses, Params, ForwardOutput]:
    """Forward pass, weighted loss and gradients for every parameter tensor.

    With ``split_tied`` the result also holds ``emb.tok@input`` and
    ``emb.tok@output``, the two contributions to the tied embedding gradient.
    """
    out = forward(params, cfg, batch, train=train, rng=rng, precision=precision,
                  predict_mask=predict_mask, keep_cache=True)
    losses, d_gen, d_tok, d_seq = _losses(out, cfg, batch, spec)
    grads = _backprop(cfg, out, d_gen, d_tok, d_seq, split_tied)
    out.cache = {}
    return losses, grads, out


def backward(params: Params, cfg: ModelConfig, batch: Batch, spec: LossSpec, **kw) -> Params:
    return value_and_grad(params, cfg, batch, spec, **kw)[1]
