"""A fine-tuned discriminator bundled with its tokenizer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tokenizer as tk
from .microformer import Batch, ModelConfig, Params, forward, load_checkpoint, save_checkpoint
from .normalizer import normalize

__all__ = ["Classifier", "encode_texts", "make_batch", "DEFAULT_MAX_LEN"]

DEFAULT_MAX_LEN = 128


def encode_texts(tokenizer: tk.TokenizerModel, raws: Iterable[str], max_len: int = DEFAULT_MAX_LEN) -> list[list[int]]:
    """Normalize then encode each raw command line."""
    return [list(tk.encode(tokenizer, normalize(r).text, max_len).ids) for r in raws]


def make_batch(seqs: Sequence[Sequence[int]], pad_id: int, **labels) -> Batch:
    """Right-pad ``seqs`` to the longest one."""
    T = max((len(s) for s in seqs), default=1)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return Batch(ids, mask, **labels)


@dataclass
class Classifier:
    params: Params
    config: ModelConfig
    tokenizer: tk.TokenizerModel
    max_len: int = DEFAULT_MAX_LEN
    threshold: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def tokenizer_hash(self) -> str:
        return self.tokenizer.hash

    def encode(self, raws: Iterable[str]) -> list[list[int]]:
        return encode_texts(self.tokenizer, raws, self.max_len)

    def score_ids(self, seqs: Sequence[Sequence[int]], batch_size: int = 64, precision: str = "bits32") -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        out = np.empty(len(seqs), dtype=np.float64)
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i : i + batch_size]
            res = forward(self.params, self.config, make_batch(chunk, self.tokenizer.pad_id), precision=precision)
            out[i : i + len(chunk)] = res.seq_probs
        return out

    def score(self, raws: Sequence[str], batch_size: int = 64, precision: str = "bits32") -> np.ndarray:
        """Obfuscation probability per raw command."""
        return self.score_ids(self.encode(raws), batch_size, precision)

    def copy(self) -> "Classifier":
        return Classifier(
            {k: v.copy() for k, v in self.params.items()}, self.config, self.tokenizer,
            self.max_len, self.threshold, dict(self.meta),
        )

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tk.save(self.tokenizer, d / "tokenizer.json")
        save_checkpoint(d / "model.ckpt", self.params, self.config, self.tokenizer.hash,
                        extra={"max_len": self.max_len, "threshold": self.threshold, "meta": self.meta})
        return d

    @classmethod
    def load(cls, directory: str | Path, tokenizer: tk.TokenizerModel | None = None) -> "Classifier":
        from .microformer import read_header

        d = Path(directory)
        tok = tokenizer or tk.load(d / "tokenizer.json")
        params, config = load_checkpoint(d / "model.ckpt", tokenizer_hash=tok.hash, vocab_size=tok.vocab_size)
        extra = read_header(d / "model.ckpt").get("extra", {})
        return cls(params, config, tok, extra.get("max_len", DEFAULT_MAX_LEN),
                   extra.get("threshold", 0.5), extra.get("meta", {}))

    def describe(self) -> str:
        return json.dumps({"config": self.config.to_dict(), "tokenizer": self.tokenizer_hash[:12]})
