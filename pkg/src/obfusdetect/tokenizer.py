"""Greedy longest-match subword tokenizer trained on normalized command lines.

Training follows the likelihood-scored merge procedure: every adjacent
symbol pair is scored ``freq(pair) / (freq(left) * freq(right))`` and the
best pair is merged until the vocabulary is full. Word-internal pieces carry
the ``##`` continuation prefix.

Whitespace is not thrown away. Tabs, carriage returns and friends become
printable units (``<TAB>``, ``<CR>``...) and runs of two or more spaces
become ``<SPCn>``, because whitespace insertion is itself an obfuscation
technique. Case is preserved for the same reason.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .normalizer import META_TOKENS

__all__ = [
    "ASCII_ALPHABET",
    "CONTINUATION",
    "SPECIAL_TOKENS",
    "TokenizerModel",
    "TokenSequence",
    "pretokenize",
    "word_units",
    "train",
    "character_baseline",
    "encode",
    "decode",
    "compression_report",
    "load",
    "save",
]

FORMAT_VERSION = 1
PRETOKENIZE_VERSION = 1
CONTINUATION = "##"
PAD, UNK, MASK, CLS, SEP = "[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS: tuple[str, ...] = (PAD, UNK, MASK, CLS, SEP) + META_TOKENS

_WS_UNITS = {"\t": "<TAB>", "\r": "<CR>", "\n": "<LF>", "\x0b": "<VT>", "\x0c": "<FF>"}
# Atomic whitespace units that always get their own vocabulary entry.
_MAX_SPC = 16
WHITESPACE_TOKENS: tuple[str, ...] = tuple(_WS_UNITS.values()) + tuple(
    f"<SPC{n}>" for n in range(2, _MAX_SPC + 1)
)
_WS_CHARS = frozenset(" ") | frozenset(_WS_UNITS)
_SPLIT_RE = re.compile(
    "(" + "|".join(re.escape(t) for t in META_TOKENS) + r"| {2,}|[\t\r\n\x0b\x0c])| "
)


def word_units(text: str) -> list[tuple[str, int, int]]:
    """Pre-tokenize ``text`` into ``(unit, start, length)`` triples."""
    units: list[tuple[str, int, int]] = []
    pos = 0
    for m in _SPLIT_RE.finditer(text):
        if m.start() > pos:
            units.append((text[pos : m.start()], pos, m.start() - pos))
        sep = m.group(1)
        if sep is not None:
            if sep[0] == " ":
                # runs past the largest unit become several units, none of them a lone space
                pos, left = m.start(), len(sep)
                while left:
                    n = min(_MAX_SPC, left)
                    n -= left - n == 1
                    units.append((f"<SPC{n}>", pos, n))
                    pos, left = pos + n, left - n
            elif sep in _WS_UNITS:
                units.append((_WS_UNITS[sep], m.start(), 1))
            else:
                units.append((sep, m.start(), len(sep)))
        pos = m.end()
    if pos < len(text):
        units.append((text[pos:], pos, len(text) - pos))
    return units


def pretokenize(text: str) -> list[str]:
    """Split a normalized command into word units.

    >>> pretokenize("a  b")
    ['a', '<SPC2>', 'b']
    """
    return [u for u, _, _ in word_units(text)]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class TokenizerModel:
    """Trained vocabulary. Token ids are list positions in ``tokens``."""

    tokens: tuple[str, ...]
    continuation_prefix: str = CONTINUATION
    version: int = FORMAT_VERSION
    pretokenize_version: int = PRETOKENIZE_VERSION
    vocab: dict[str, int] = field(init=False, repr=False)
    _max_piece: int = field(init=False, repr=False)

    def __post_init__(self):
        vocab = {t: i for i, t in enumerate(self.tokens)}
        if len(vocab) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")
        if any(not t for t in self.tokens):
            raise ValueError("empty token string in vocabulary")
        missing = [t for t in SPECIAL_TOKENS if t not in vocab]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "_max_piece", max(len(t) for t in self.tokens))

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def special_tokens(self) -> dict[str, int]:
        return {t: self.vocab[t] for t in SPECIAL_TOKENS}

    @property
    def pad_id(self) -> int:
        return self.vocab[PAD]

    @property
    def unk_id(self) -> int:
        return self.vocab[UNK]

    @property
    def mask_id(self) -> int:
        return self.vocab[MASK]

    @property
    def cls_id(self) -> int:
        return self.vocab[CLS]

    @property
    def sep_id(self) -> int:
        return self.vocab[SEP]

    def to_json(self) -> str:
        payload = {
            "format": "obfusdetect-tokenizer",
            "version": self.version,
            "pretokenize_version": self.pretokenize_version,
            "continuation_prefix": self.continuation_prefix,
            "special_tokens": self.special_tokens,
            "vocab": list(self.tokens),
        }
        return json.dumps(payload, ensure_ascii=False, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, data: str) -> "TokenizerModel":
        payload = json.loads(data)
        if payload.get("format") != "obfusdetect-tokenizer":
            raise ValueError("not a tokenizer file")
        if payload["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported tokenizer version {payload['version']}")
        model = cls(
            tokens=tuple(payload["vocab"]),
            continuation_prefix=payload["continuation_prefix"],
            version=payload["version"],
            pretokenize_version=payload["pretokenize_version"],
        )
        if model.special_tokens != payload["special_tokens"]:
            raise ValueError("special-token table does not match vocabulary")
        return model

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def split_word(self, word: str) -> tuple[int, ...]:
        return _split_word(self, word)


def save(model: TokenizerModel, path: str | Path) -> None:
    Path(path).write_text(model.to_json(), encoding="utf-8")


def load(path: str | Path) -> TokenizerModel:
    return TokenizerModel.from_json(Path(path).read_text(encoding="utf-8"))


_ATOMIC = frozenset(SPECIAL_TOKENS) | frozenset(WHITESPACE_TOKENS)
_WS_SET = frozenset(WHITESPACE_TOKENS)


@lru_cache(maxsize=1 << 18)
def _split_word(model: TokenizerModel, word: str) -> tuple[int, ...]:
    vocab = model.vocab
    # whitespace units are recognised by encode() from the source characters;
    # a literal "<TAB>" in the text is an ordinary word
    if word in _ATOMIC and word not in _WS_SET and word in vocab:
        return (vocab[word],)
    ids: list[int] = []
    start = 0
    n = len(word)
    prefix = model.continuation_prefix
    while start < n:
        end = min(n, start + model._max_piece)
        piece_id = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = prefix + piece
            piece_id = None if piece in _WS_SET else vocab.get(piece)
            if piece_id is not None:
                break
            end -= 1
        if piece_id is None:
            return (model.unk_id,)
        ids.append(piece_id)
        start = end
    return tuple(ids)


def _word_offsets(model: TokenizerModel, word: str, ids: Sequence[int], start: int, length: int):
    if len(ids) == 1:
        return [(start, length)]
    out = []
    pos = start
    plen = len(model.continuation_prefix)
    for k, i in enumerate(ids):
        tok = model.tokens[i]
        n = len(tok) - (plen if k > 0 else 0)
        out.append((pos, n))
        pos += n
    return out


def encode(model: TokenizerModel, text: str, max_len: int = 256) -> TokenSequence:
    """Encode a normalized command as ``[CLS] pieces... [SEP]``.

    Sequences longer than ``max_len`` lose their tail; the final ``[SEP]``
    is kept.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [model.cls_id]
    offsets = [(0, 0)]
    for word, start, length in word_units(text):
        wids = (model.vocab[word],) if text[start] in _WS_CHARS else _split_word(model, word)
        ids.extend(wids)
        offsets.extend(_word_offsets(model, word, wids, start, length))
    end = len(text)
    if len(ids) + 1 > max_len:
        ids = ids[: max_len - 1]
        offsets = offsets[: max_len - 1]
        end = offsets[-1][0] + offsets[-1][1] if len(offsets) > 1 else 0
    ids.append(model.sep_id)
    offsets.append((end, 0))
    return TokenSequence(tuple(ids), tuple(offsets))


def decode(model: TokenizerModel, seq: TokenSequence) -> str:
    """Rebuild the normalized text from an untruncated encoding.

    Gaps between recorded offsets were single spaces; whitespace units map
    back to their characters.
    """
    inverse_ws = {v: k for k, v in _WS_UNITS.items()}
    plen = len(model.continuation_prefix)
    out: list[str] = []
    pos = 0
    for i, (start, length) in zip(seq.ids, seq.offsets):
        if not 0 <= i < model.vocab_size:
            raise ValueError(f"token id {i} out of range")
        if length == 0:
            if i == model.sep_id and start > pos:
                out.append(" " * (start - pos))  # trailing single spaces
                pos = start
            continue
        tok = model.tokens[i]
        if tok in inverse_ws:
            piece = inverse_ws[tok]
        elif tok.startswith("<SPC") and tok.endswith(">"):
            piece = " " * int(tok[4:-1])
        elif tok.startswith(model.continuation_prefix) and len(tok) > plen:
            piece = tok[plen:]
        else:
            piece = tok
        if start > pos:
            out.append(" " * (start - pos))
        out.append(piece)
        pos = start + length
    return "".join(out)


# Printable ASCII is always in the alphabet, so characters that are rare in
# benign training text (carets, backticks) never collapse a word to [UNK].
ASCII_ALPHABET = "".join(chr(c) for c in range(33, 127))


def _alphabet(word_counts: Counter, base: str = "") -> list[str]:
    chars: set[str] = set(base)
    for w in word_counts:
        if w not in _ATOMIC:
            chars.update(w)
    return sorted(chars)


def _initial_vocab(chars: Sequence[str]) -> list[str]:
    return list(SPECIAL_TOKENS) + list(WHITESPACE_TOKENS) + list(chars) + [
        CONTINUATION + c for c in chars
    ]


def character_baseline(corpus: Iterable[str], base_alphabet: str = ASCII_ALPHABET) -> TokenizerModel:
    """Alphabet-only vocabulary: every piece is one character."""
    counts = Counter(u for line in corpus for u in pretokenize(line))
    return TokenizerModel(tuple(_initial_vocab(_alphabet(counts, base_alphabet))))


def train(
    corpus: Iterable[str],
    vocab_size: int,
    min_frequency: int = 2,
    base_alphabet: str = ASCII_ALPHABET,
) -> TokenizerModel:
    """Learn a subword vocabulary of at most ``vocab_size`` entries.

    Ties on score go to the higher-frequency pair, then to the pair seen
    first, so the result depends only on corpus order and the parameters.
    """
    word_counts: Counter = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        word_counts.update(pretokenize(line))
    if n_lines == 0:
        raise ValueError("cannot train a tokenizer on an empty corpus")

    chars = _alphabet(word_counts, base_alphabet)
    vocab = _initial_vocab(chars)
    if vocab_size <= len(vocab):
        raise ValueError(
            f"vocab_size {vocab_size} cannot hold {len(SPECIAL_TOKENS) + len(WHITESPACE_TOKENS)} "
            f"reserved tokens plus an alphabet of {2 * len(chars)} pieces"
        )
    known = set(vocab)

    sym_id: dict[str, int] = {}
    sym_str: list[str] = []

    def sid(s: str) -> int:
        i = sym_id.get(s)
        if i is None:
            i = sym_id[s] = len(sym_str)
            sym_str.append(s)
        return i

    words: list[list[int]] = []
    freqs: list[int] = []
    for w, c in word_counts.items():
        if w in _ATOMIC or len(w) < 2:
            continue
        words.append([sid(w[0])] + [sid(CONTINUATION + ch) for ch in w[1:]])
        freqs.append(c)

    cap = 1024
    pair_freq = np.zeros(cap)
    pair_left = np.zeros(cap, dtype=np.int64)
    pair_right = np.zeros(cap, dtype=np.int64)
    pair_index: dict[tuple[int, int], int] = {}
    pair_words: list[set[int]] = []
    sym_freq = np.zeros(max(1024, len(sym_str) * 2))

    def grow_sym(n: int):
        nonlocal sym_freq
        if n > sym_freq.size:
            sym_freq = np.concatenate([sym_freq, np.zeros(max(n, sym_freq.size))])

    def pidx(a: int, b: int) -> int:
        nonlocal cap, pair_freq, pair_left, pair_right
        key = (a, b)
        i = pair_index.get(key)
        if i is None:
            i = len(pair_index)
            if i >= cap:
                cap *= 2
                pair_freq = np.resize(pair_freq, cap)
                pair_freq[i:] = 0
                pair_left = np.resize(pair_left, cap)
                pair_right = np.resize(pair_right, cap)
            pair_index[key] = i
            pair_left[i] = a
            pair_right[i] = b
            pair_words.append(set())
        return i

    grow_sym(len(sym_str))
    for wi, (syms, c) in enumerate(zip(words, freqs)):
        for s in syms:
            sym_freq[s] += c
        for a, b in zip(syms, syms[1:]):
            i = pidx(a, b)
            pair_freq[i] += c
            pair_words[i].add(wi)

    while len(vocab) < vocab_size:
        n = len(pair_index)
        if n == 0:
            break
        pf = pair_freq[:n]
        eligible = pf >= min_frequency
        if not eligible.any():
            break
        denom = sym_freq[pair_left[:n]] * sym_freq[pair_right[:n]]
        score = np.where(eligible, pf / np.where(denom > 0, denom, 1.0), -1.0)
        best = score.max()
        if best <= 0:
            break
        tied = np.flatnonzero(score == best)
        if tied.size > 1:
            tied = tied[pf[tied] == pf[tied].max()]
        bi = int(tied[0])
        a, b = int(pair_left[bi]), int(pair_right[bi])
        merged = sym_str[a] + sym_str[b][len(CONTINUATION):]
        m = sid(merged)
        grow_sym(len(sym_str))
        if merged not in known:
            vocab.append(merged)
            known.add(merged)

        for wi in sorted(pair_words[bi]):
            syms = words[wi]
            c = freqs[wi]
            for x, y in zip(syms, syms[1:]):
                j = pair_index[(x, y)]
                pair_freq[j] -= c
                pair_words[j].discard(wi)
            new: list[int] = []
            k = 0
            while k < len(syms):
                if k + 1 < len(syms) and syms[k] == a and syms[k + 1] == b:
                    sym_freq[a] -= c
                    sym_freq[b] -= c
                    sym_freq[m] += c
                    new.append(m)
                    k += 2
                else:
                    new.append(syms[k])
                    k += 1
            words[wi] = new
            for x, y in zip(new, new[1:]):
                j = pidx(x, y)
                pair_freq[j] += c
                pair_words[j].add(wi)
        pair_freq[bi] = 0

    return TokenizerModel(tuple(vocab))


@dataclass
class CompressionRow:
    name: str
    vocab_size: int
    total_tokens: int
    total_chars: int

    @property
    def tokens_per_char(self) -> float:
        return self.total_tokens / self.total_chars if self.total_chars else 0.0


def compression_report(
    models: Sequence[TokenizerModel] | dict[str, TokenizerModel], corpus: Iterable[str]
) -> list[CompressionRow]:
    """Total token count (including ``[CLS]``/``[SEP]``) each model produces on ``corpus``."""
    if not isinstance(models, dict):
        models = {f"vocab{m.vocab_size}": m for m in models}
    lines = list(corpus)
    chars = sum(len(x) for x in lines)
    rows = []
    for name, model in models.items():
        total = sum(len(encode(model, x, max_len=1 << 30)) for x in lines)
        rows.append(CompressionRow(name, model.vocab_size, total, chars))
    return rows
