"""Rewrite value-like patterns in raw command lines into generic meta-tokens.

GUIDs, IP addresses, dates, numbers and URLs carry no information about
whether a command is obfuscated, so each match is replaced by one of the
reserved literals ``[GUID]``, ``[IP]``, ``[DATE]``, ``[NUM]``, ``[URL]``.
The replaced text is kept alongside the result so the raw string can be
rebuilt exactly.

Pattern rules are deliberately strict: an obfuscated value (``hTtP://``,
``1^92.168.0.1``) does not match and therefore stays in the text, where it
remains visible to the model.
"""

from __future__ import annotations

import enum
import ipaddress
import re
from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "PatternKind",
    "Replacement",
    "NormalizedCommand",
    "META_TOKENS",
    "decode_raw",
    "detect_patterns",
    "normalize",
    "denormalize",
]


class PatternKind(str, enum.Enum):
    GUID = "GUID"
    IP = "IP"
    DATE = "DATE"
    NUM = "NUM"
    URL = "URL"

    @property
    def token(self) -> str:
        return f"[{self.value}]"


META_TOKENS: tuple[str, ...] = tuple(k.token for k in PatternKind)
_TOKEN_TO_KIND = {k.token: k for k in PatternKind}

# Lower rank wins when candidate spans overlap.
_PRECEDENCE = {
    PatternKind.URL: 0,
    PatternKind.GUID: 1,
    PatternKind.IP: 2,
    PatternKind.DATE: 3,
    PatternKind.NUM: 4,
}

_B = r"(?<![0-9A-Za-z])"  # left boundary: no ASCII alphanumeric before
_E = r"(?![0-9A-Za-z])"  # right boundary

_META_RE = re.compile("|".join(re.escape(t) for t in META_TOKENS))
_URL_RE = re.compile(_B + r"(?:https|http|ftp)://[^\s\"']+")
_GUID_RE = re.compile(
    _B + r"[0-9A-Fa-f]{8}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{12}" + _E
)
_OCTET = r"(?:25[0-5]|2[0-4][0-9]|1[0-9][0-9]|0?[0-9][0-9]|00[0-9]|[0-9])"
_IPV4_RE = re.compile(r"(?<![0-9A-Za-z.])" + r"\.".join([_OCTET] * 4) + r"(?![0-9A-Za-z]|\.[0-9])")
_IPV6_CAND_RE = re.compile(
    r"(?<![0-9A-Za-z:])(?:[0-9A-Fa-f]{0,4}:){2,7}[0-9A-Fa-f]{0,4}(?![0-9A-Za-z:])"
)
_MM = r"(?:0[1-9]|1[0-2])"
_DD = r"(?:0[1-9]|[12][0-9]|3[01])"
_YYYY = r"(?:19|20)[0-9]{2}"
_DATE_RE = re.compile(
    _B
    + "(?:"
    + "|".join(
        [
            rf"{_YYYY}-{_MM}-{_DD}",
            rf"{_YYYY}/{_MM}/{_DD}",
            rf"{_DD}\.{_MM}\.{_YYYY}",
            rf"{_MM}/{_DD}/{_YYYY}",
            rf"{_YYYY}{_MM}{_DD}",
        ]
    )
    + ")"
    + _E
)
# Digit runs touching a letter ("System32", "x86") are part of a word, not a number.
_NUM_RE = re.compile(r"(?<![0-9A-Za-z])[0-9]+(?![0-9A-Za-z])")


class Replacement(NamedTuple):
    kind: PatternKind
    start: int
    length: int
    original: str


@dataclass(frozen=True)
class NormalizedCommand:
    text: str
    replacements: tuple[Replacement, ...] = ()


def decode_raw(raw: str | bytes) -> str:
    """Return ``raw`` as text; undecodable bytes become U+FFFD."""
    if isinstance(raw, (bytes, bytearray)):
        return bytes(raw).decode("utf-8", errors="replace")
    return raw


def _ipv6_spans(text: str):
    for m in _IPV6_CAND_RE.finditer(text):
        cand = m.group(0)
        if not any(c not in ":" for c in cand):
            continue
        try:
            ipaddress.IPv6Address(cand)
        except ValueError:
            continue
        yield m.start(), m.end()


def _candidates(text: str) -> list[tuple[int, int, PatternKind]]:
    found: list[tuple[int, int, PatternKind]] = []
    for rx, kind in (
        (_URL_RE, PatternKind.URL),
        (_GUID_RE, PatternKind.GUID),
        (_IPV4_RE, PatternKind.IP),
        (_DATE_RE, PatternKind.DATE),
    ):
        found.extend((m.start(), m.end(), kind) for m in rx.finditer(text))
    found.extend((s, e, PatternKind.IP) for s, e in _ipv6_spans(text))
    return found


def _detect_once(text: str) -> list[tuple[int, int, PatternKind]]:
    # Meta literals are claimed first; nothing else can match inside them.
    taken: list[tuple[int, int, PatternKind]] = [
        (m.start(), m.end(), _TOKEN_TO_KIND[m.group(0)]) for m in _META_RE.finditer(text)
    ]
    occupied = bytearray(len(text))
    for s, e, _ in taken:
        occupied[s:e] = b"\x01" * (e - s)

    cands = _candidates(text)
    cands.sort(key=lambda c: (_PRECEDENCE[c[2]], -(c[1] - c[0]), c[0]))
    for s, e, kind in cands:
        if any(occupied[s:e]):
            continue
        occupied[s:e] = b"\x01" * (e - s)
        taken.append((s, e, kind))

    for m in _NUM_RE.finditer(text):
        s, e = m.span()
        if not any(occupied[s:e]):
            taken.append((s, e, PatternKind.NUM))
    return taken


def detect_patterns(raw: str | bytes) -> list[tuple[PatternKind, tuple[int, int]]]:
    """Find value patterns in ``raw``.

    Returns ``(kind, (start, length))`` pairs sorted by start offset. Spans
    never overlap: URL beats GUID beats IP beats DATE beats NUM, then the
    longer candidate, then the leftmost. Literal meta-tokens already present
    in the input are reported as spans of their own kind.

    A replacement can change a neighbour's boundary context ("8::A" is not an
    address, "[NUM]::A" is), so detection is repeated on the substituted text
    until nothing new turns up. That makes normalizing normalized text a no-op.
    """
    text = decode_raw(raw)
    if not text:
        return []
    spans = _detect_once(text)
    while True:
        spans.sort(key=lambda c: c[0])
        # literal segments of the substituted text as (sub_start, raw_start, length)
        segments, parts, pos, sub = [], [], 0, 0
        for s, e, kind in spans:
            segments.append((sub, pos, s - pos))
            parts += [text[pos:s], kind.token]
            sub += s - pos + len(kind.token)
            pos = e
        segments.append((sub, pos, len(text) - pos))
        parts.append(text[pos:])
        found = []
        for s, e, kind in _detect_once("".join(parts)):
            for sub_start, raw_start, length in segments:
                if sub_start <= s and e <= sub_start + length:
                    found.append((raw_start + s - sub_start, raw_start + e - sub_start, kind))
                    break
        if not found:
            return [(kind, (s, e - s)) for s, e, kind in spans]
        spans += found


def normalize(raw: str | bytes) -> NormalizedCommand:
    """Replace every detected pattern with its meta-token.

    >>> normalize("echo 42").text
    'echo [NUM]'
    """
    text = decode_raw(raw)
    parts: list[str] = []
    reps: list[Replacement] = []
    pos = 0
    for kind, (start, length) in detect_patterns(text):
        parts.append(text[pos:start])
        parts.append(kind.token)
        reps.append(Replacement(kind, start, length, text[start : start + length]))
        pos = start + length
    parts.append(text[pos:])
    return NormalizedCommand("".join(parts), tuple(reps))


def denormalize(nc: NormalizedCommand) -> str:
    """Rebuild the raw command from a :class:`NormalizedCommand`."""
    pieces = _META_RE.split(nc.text)
    tokens = _META_RE.findall(nc.text)
    if len(tokens) != len(nc.replacements):
        raise ValueError(
            f"text holds {len(tokens)} meta-tokens but {len(nc.replacements)} replacements were recorded"
        )
    out = [pieces[0]]
    for tok, rep, tail in zip(tokens, nc.replacements, pieces[1:]):
        if _TOKEN_TO_KIND[tok] is not rep.kind:
            raise ValueError(f"meta-token {tok} does not match recorded kind {rep.kind.value}")
        if len(rep.original) != rep.length:
            raise ValueError(f"replacement at {rep.start} has inconsistent length")
        out.append(rep.original)
        out.append(tail)
    return "".join(out)
