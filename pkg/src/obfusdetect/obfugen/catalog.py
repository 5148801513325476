"""Technique registry, command splitting and the apply/oracle entry points."""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass
from typing import Callable

__all__ = [
    "Shell",
    "Technique",
    "TechniqueInfo",
    "ObfuscatedSample",
    "Inapplicable",
    "OracleError",
    "TECHNIQUES",
    "split_binary_and_args",
    "shell_of",
    "apply",
    "deobfuscate_oracle",
    "obfuscate_log",
    "derive_seed",
]


class Shell(str, enum.Enum):
    POWERSHELL = "powershell_like"
    CMD = "cmd_like"
    ANY = "any"


class Technique(str, enum.Enum):
    TOKEN_OBFUSCATION = "token_obfuscation"
    COMMAND_COMPRESSING = "command_compressing"
    ENCODING_ASCII = "encoding_ascii"
    ENCODING_HEX = "encoding_hex"
    ENCODING_OCTAL = "encoding_octal"
    ENCODING_BINARY = "encoding_binary"
    ENCODING_SECURESTRING_SURROGATE = "encoding_securestring_surrogate"
    ENCODING_BXOR = "encoding_bxor"
    ENCODING_SPECIAL_CHARS = "encoding_special_chars"
    ENCODING_WHITESPACE = "encoding_whitespace"
    STRING_CONCATENATE = "string_concatenate"
    STRING_CONCATENATE_REORDER = "string_concatenate_reorder"
    ENV_VARIABLE_LIGHT = "env_variable_light"
    ENV_VARIABLE_MEDIUM = "env_variable_medium"
    PAYLOAD_CONCAT_LIGHT = "payload_concat_light"
    PAYLOAD_CONCAT_MEDIUM = "payload_concat_medium"
    PAYLOAD_REVERSE_LIGHT = "payload_reverse_light"
    PAYLOAD_REVERSE_MEDIUM = "payload_reverse_medium"
    PAYLOAD_FORCODE = "payload_forcode"
    CARET_INSERTION = "caret_insertion"
    WHITESPACE_INSERTION = "whitespace_insertion"
    CASE_MIXING = "case_mixing"


class Inapplicable(ValueError):
    """The technique has nothing to work on in this command."""

    def __init__(self, technique, command: str, reason: str):
        super().__init__(f"{Technique(technique).value}: {reason}")
        self.technique = Technique(technique)
        self.command = command
        self.reason = reason


class OracleError(ValueError):
    """Text does not have the structure the technique produces."""


# transform(text, rng, intensity, start) -> new text; chars before ``start`` are off limits
Transform = Callable[[str, random.Random, float, int], str]
Oracle = Callable[[str], str]


@dataclass(frozen=True)
class TechniqueInfo:
    technique: Technique
    shell: Shell
    transform: Transform
    oracle: Oracle | None
    # True when the oracle recovers the original only up to letter case
    casefold: bool = False

    @property
    def reversible(self) -> bool:
        return self.oracle is not None


TECHNIQUES: dict[Technique, TechniqueInfo] = {}


def register(technique: Technique, shell: Shell, *, casefold: bool = False):
    def wrap(pair):
        transform, oracle = pair
        TECHNIQUES[technique] = TechniqueInfo(technique, shell, transform, oracle, casefold)
        return pair

    return wrap


@dataclass(frozen=True)
class ObfuscatedSample:
    original: str
    obfuscated: str
    technique: Technique
    seed: int
    intensity: float
    source_id: str = ""


def split_binary_and_args(raw: str) -> tuple[str, str]:
    """Split a command line into the executable and its argument string.

    A leading double-quoted path is kept whole, quotes included.

    >>> split_binary_and_args('"C:\\\\Program Files\\\\x.exe" /q')
    ('"C:\\\\Program Files\\\\x.exe"', '/q')
    """
    text = raw.strip()
    if not text:
        raise ValueError("empty command line")
    if text[0] == '"':
        end = text.find('"', 1)
        if end < 0:
            raise ValueError("unterminated quote in executable path")
        return text[: end + 1], text[end + 1 :].lstrip()
    for i, ch in enumerate(text):
        if ch.isspace():
            return text[:i], text[i:].lstrip()
    return text, ""


def shell_of(binary: str) -> Shell | None:
    name = binary.strip('"').replace("/", "\\").rsplit("\\", 1)[-1].lower()
    if name.startswith(("powershell", "pwsh")):
        return Shell.POWERSHELL
    if name in ("cmd", "cmd.exe"):
        return Shell.CMD
    return None


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def _info(technique) -> TechniqueInfo:
    from . import transforms  # noqa: F401  (populates the registry)

    return TECHNIQUES[Technique(technique)]


def apply(
    technique: Technique | str,
    command: str,
    seed: int,
    intensity: float,
    *,
    start: int = 0,
) -> ObfuscatedSample:
    """Obfuscate ``command`` with one technique.

    Characters before ``start`` (normally the executable) are never changed.
    Raises :class:`Inapplicable` instead of returning an unmodified command.
    """
    info = _info(technique)
    if not 0.0 <= intensity <= 1.0:
        raise ValueError("intensity must lie in [0, 1]")
    if intensity == 0.0:
        raise Inapplicable(info.technique, command, "zero intensity")
    rng = random.Random(derive_seed(info.technique.value, seed, intensity))
    out = info.transform(command, rng, intensity, start)
    if out == command:
        raise Inapplicable(info.technique, command, "transform left the command unchanged")
    return ObfuscatedSample(command, out, info.technique, seed, intensity)


def deobfuscate_oracle(technique: Technique | str, obfuscated: str) -> str:
    info = _info(technique)
    if info.oracle is None:
        raise OracleError(f"{info.technique.value} has no oracle")
    return info.oracle(obfuscated)


def obfuscate_log(raw: str, technique: Technique | str, seed: int, intensity: float) -> ObfuscatedSample:
    """Split ``raw``, then obfuscate only the part after the executable."""
    binary, args = split_binary_and_args(raw)
    canonical = f"{binary} {args}" if args else binary
    return apply(technique, canonical, seed, intensity, start=len(binary) + 1 if args else len(binary))
