"""Native re-implementations of the obfuscation techniques.

Each technique is a ``(transform, oracle)`` pair. Transforms take the full
command text plus ``start``, the first index they may touch. Oracles take
the full obfuscated text and return the full original text.

PowerShell encodings wrap the script in a decode-and-invoke stub; cmd
payload techniques rebuild the command under ``cmd /V:ON``. Stub shapes
mimic the public obfuscation frameworks; exact byte-for-byte parity with
those tools is not a goal.
"""

from __future__ import annotations

import base64
import random
import re
import zlib

from .catalog import Inapplicable, OracleError, Shell, Technique, register

T = Technique

# --------------------------------------------------------------------------
# shared helpers


def _rcase(s: str, rng: random.Random, p: float) -> str:
    return "".join(
        (c.upper() if rng.random() < 0.5 else c.lower()) if c.isalpha() and rng.random() < p else c
        for c in s
    )


def _dq_mask(text: str) -> list[bool]:
    """True for characters inside a double-quoted span (quotes included)."""
    inside = False
    mask = []
    for c in text:
        if c == '"':
            mask.append(True)
            inside = not inside
        else:
            mask.append(inside)
    return mask


def _ps_quote_mask(text: str) -> list[bool]:
    mask = []
    quote = None
    for c in text:
        if quote is None:
            if c in "'\"":
                quote = c
                mask.append(True)
            else:
                mask.append(False)
        else:
            mask.append(True)
            if c == quote:
                quote = None
    return mask


_PS_FLAG_VALUE = {"-executionpolicy", "-ep", "-exec", "-windowstyle", "-w", "-version", "-v"}
_PS_FLAG_BARE = {
    "-noprofile", "-nop", "-nologo", "-noninteractive", "-noni", "-noexit", "-sta", "-mta",
}
_PS_COMMAND = {"-command", "-c", "-com", "-comm"}
_PS_REJECT = {"-file", "-f", "-encodedcommand", "-enc", "-ec", "-e"}


def _ps_script_span(text: str, start: int, technique: Technique) -> tuple[int, int]:
    """Locate the PowerShell script inside ``text[start:]``.

    Host switches such as ``-NoProfile`` are skipped; a script wrapped in one
    pair of double quotes is returned without them.
    """
    pos = start
    n = len(text)
    while pos < n:
        while pos < n and text[pos] == " ":
            pos += 1
        m = re.match(r"\S+", text[pos:])
        if not m:
            break
        tok = m.group(0).lower()
        if tok in _PS_FLAG_BARE:
            pos += m.end()
        elif tok in _PS_FLAG_VALUE:
            pos += m.end()
            while pos < n and text[pos] == " ":
                pos += 1
            v = re.match(r"\S+", text[pos:])
            pos += v.end() if v else 0
        elif tok in _PS_COMMAND:
            pos += m.end()
            while pos < n and text[pos] == " ":
                pos += 1
            break
        elif tok in _PS_REJECT:
            raise Inapplicable(technique, text, "no inline script (file or pre-encoded command)")
        else:
            break
    end = n
    if pos < n - 1 and text[pos] == '"' and text.endswith('"') and text.count('"', pos) == 2:
        pos, end = pos + 1, n - 1
    if pos >= end:
        raise Inapplicable(technique, text, "no script to obfuscate")
    return pos, end


_CMD_SW = re.compile(r"((?:/[A-Za-z](?::\w+)?\s+)*?/[CcKk])\s+(?=\S)")


def _cmd_payload(text: str, start: int, technique: Technique) -> tuple[int, str]:
    """Return ``(payload_start, switches)`` for ``cmd /c <payload>`` style args."""
    m = _CMD_SW.match(text, start)
    if not m:
        raise Inapplicable(technique, text, "no /c or /k payload")
    return m.end(), m.group(1)


# --------------------------------------------------------------------------
# PowerShell: stub-based encodings


class _Stub:
    """A decode-and-invoke wrapper with ``{P}`` payload and optional ``{K}`` key slots."""

    def __init__(self, template: str, key_rx: str = r"[^']*?"):
        self.template = template
        parts = re.split(r"(\{P\}|\{K\})", template)
        rx = []
        for part in parts:
            if part == "{P}":
                rx.append(r"(?P<p>[^']*)")
            elif part == "{K}":
                rx.append(f"(?P<k>{key_rx})")
            else:
                rx.append(re.escape(part))
        self.regex = re.compile("".join(rx), re.IGNORECASE | re.DOTALL)

    def render(self, payload: str, rng: random.Random, intensity: float, key: str = "") -> str:
        parts = re.split(r"(\{P\}|\{K\})", self.template)
        out = []
        for part in parts:
            if part == "{P}":
                out.append(payload)
            elif part == "{K}":
                out.append(key)
            else:
                out.append(_rcase(part, rng, 0.6 * intensity))
        return "".join(out)


def _stub_technique(technique: Technique, stubs: list[_Stub], encode, decode):
    def transform(text, rng, intensity, start):
        a, b = _ps_script_span(text, start, technique)
        payload, key = encode(text[a:b], rng, intensity)
        stub = rng.choice(stubs)
        return text[:a] + stub.render(payload, rng, intensity, key) + text[b:]

    def oracle(text):
        for stub in stubs:
            m = stub.regex.search(text)
            if m:
                key = m.groupdict().get("k") or ""
                try:
                    script = decode(m.group("p"), key)
                except (ValueError, KeyError, IndexError, zlib.error) as exc:
                    raise OracleError(f"{technique.value}: payload does not decode ({exc})") from None
                return text[: m.start()] + script + text[m.end() :]
        raise OracleError(f"{technique.value}: no recognizable stub")

    register(technique, Shell.POWERSHELL)((transform, oracle))


_CODE_STUBS = {
    10: [
        _Stub("[String]::Join('', ('{P}'.Split(',') | ForEach-Object { [char][int]$_ })) | IEX"),
        _Stub("IEX (-Join ('{P}'.Split(',') | % { [char][int]$_ }))"),
        _Stub("IEx( $( set-iTem 'vaRiABLE:OfS' '')+ [STrInG]( '{P}'.SpLit(',') | forEACH{([int] $_-As[cHAR]) }) + $(sET-ItEm 'VaRIaBLe:oFS' ' '))"),
    ],
    16: [
        _Stub("IEX (-Join ('{P}'.Split(',') | ForEach-Object { [char]([Convert]::ToInt16($_, 16)) }))"),
        _Stub("-Join ('{P}' -split ',' | % { [char][Convert]::ToInt32($_, 16) }) | Invoke-Expression"),
    ],
    8: [
        _Stub("IEX (-Join ('{P}'.Split(',') | ForEach-Object { [char]([Convert]::ToInt16($_, 8)) }))"),
        _Stub("-Join ('{P}' -split ',' | % { [char][Convert]::ToInt32($_, 8) }) | Invoke-Expression"),
    ],
    2: [
        _Stub("IEX (-Join ('{P}'.Split(',') | ForEach-Object { [char]([Convert]::ToInt16($_, 2)) }))"),
        _Stub("-Join ('{P}' -split ',' | % { [char][Convert]::ToInt32($_, 2) }) | Invoke-Expression"),
    ],
}
_FORMATS = {10: "d", 16: "x", 8: "o", 2: "b"}


def _codes_codec(base: int):
    fmt = _FORMATS[base]

    def encode(script, rng, intensity):
        return ",".join(format(ord(c), fmt) for c in script), ""

    def decode(payload, key):
        return "".join(chr(int(x, base)) for x in payload.split(","))

    return encode, decode


for _tech, _base in (
    (T.ENCODING_ASCII, 10),
    (T.ENCODING_HEX, 16),
    (T.ENCODING_OCTAL, 8),
    (T.ENCODING_BINARY, 2),
):
    _stub_technique(_tech, _CODE_STUBS[_base], *_codes_codec(_base))


def _bxor_encode(script, rng, intensity):
    key = rng.randint(1, 255)
    return ",".join(str(ord(c) ^ key) for c in script), f"0x{key:02x}"


def _bxor_decode(payload, key):
    k = int(key, 16)
    return "".join(chr(int(x) ^ k) for x in payload.split(","))


_stub_technique(
    T.ENCODING_BXOR,
    [
        _Stub("-Join ('{P}'.Split(',') | ForEach-Object { [char]($_ -bxor {K}) }) | IEX", r"0x[0-9a-f]{2}"),
        _Stub("IEX ([String]::Join('', ('{P}' -split ',' | % { [char]([int]$_ -BXOR {K}) })))", r"0x[0-9a-f]{2}"),
    ],
    _bxor_encode,
    _bxor_decode,
)


def _secure_encode(script, rng, intensity):
    key = [rng.randint(1, 255) for _ in range(16)]
    raw = script.encode("utf-16-le")
    blob = bytes(b ^ key[i % 16] for i, b in enumerate(raw))
    return base64.b64encode(blob).decode("ascii"), ",".join(map(str, key))


def _secure_decode(payload, key):
    k = [int(x) for x in key.split(",")]
    blob = base64.b64decode(payload, validate=True)
    return bytes(b ^ k[i % 16] for i, b in enumerate(blob)).decode("utf-16-le")


# Surrogate for SecureString output: keyed byte scramble behind the same kind of stub.
_stub_technique(
    T.ENCODING_SECURESTRING_SURROGATE,
    [
        _Stub(
            "IEX ([Runtime.InteropServices.Marshal]::PtrToStringAuto([Runtime.InteropServices.Marshal]::"
            "SecureStringToBSTR(('{P}' | ConvertTo-SecureString -Key ({K})))))",
            r"[0-9,]+",
        ),
        _Stub(
            "$s = '{P}' | ConvertTo-SecureString -Key ({K}); "
            "IEX ([Runtime.InteropServices.Marshal]::PtrToStringBSTR([Runtime.InteropServices.Marshal]::SecureStringToBSTR($s)))",
            r"[0-9,]+",
        ),
    ],
    _secure_encode,
    _secure_decode,
)


def _compress_encode(script, rng, intensity):
    c = zlib.compressobj(9, zlib.DEFLATED, -15)
    data = c.compress(script.encode("utf-8")) + c.flush()
    return base64.b64encode(data).decode("ascii"), ""


def _compress_decode(payload, key):
    return zlib.decompress(base64.b64decode(payload, validate=True), -15).decode("utf-8")


_stub_technique(
    T.COMMAND_COMPRESSING,
    [
        _Stub(
            ". ( $ShellId[1]+$ShellId[13]+'x') (New-Object IO.StreamReader((New-Object IO.Compression.DeflateStream("
            "[IO.MemoryStream][Convert]::FromBase64String('{P}'), [IO.Compression.CompressionMode]::Decompress)), "
            "[Text.Encoding]::UTF8)).ReadToEnd()"
        ),
        _Stub(
            "(New-Object IO.StreamReader((New-Object IO.Compression.DeflateStream([IO.MemoryStream]"
            "[Convert]::FromBase64String('{P}'), [IO.Compression.CompressionMode]::Decompress)), "
            "[Text.Encoding]::UTF8)).ReadToEnd() | Invoke-Expression"
        ),
    ],
    _compress_encode,
    _compress_decode,
)

_SPECIAL_POOL = "!@#%&*()-_=+;:<>?~[]{}|/"


def _special_encode(script, rng, intensity):
    symbols = rng.sample(_SPECIAL_POOL, 11)
    digits, sep = symbols[:10], symbols[10]
    table = {str(d): s for d, s in enumerate(digits)}
    payload = sep.join("".join(table[ch] for ch in str(ord(c))) for c in script)
    key = ";".join(f"'{s}'={d}" for d, s in enumerate(digits)) + f";'sep'='{sep}'"
    return payload, key


def _special_decode(payload, key):
    pairs = re.findall(r"'(.)'=(\d)", key)
    sep = re.search(r"'sep'='(.)'", key, re.IGNORECASE).group(1)
    table = {s: d for s, d in pairs}
    return "".join(chr(int("".join(table[s] for s in code))) for code in payload.split(sep))


_stub_technique(
    T.ENCODING_SPECIAL_CHARS,
    [
        _Stub(
            "$m=@{{K}}; IEX (-Join ('{P}'.Split($m['sep']) | % { [char][int](-Join ($_.ToCharArray() | % { $m[[string]$_] })) }))",
            r"(?:'.'=\d;){10}'sep'='.'",
        ),
    ],
    _special_encode,
    _special_decode,
)


def _ws_encode(script, rng, intensity):
    return "\t\t".join("\t".join(" " * (int(d) + 1) for d in str(ord(c))) for c in script), ""


def _ws_decode(payload, key):
    out = []
    for code in payload.split("\t\t"):
        digits = code.split("\t")
        if not all(d and set(d) == {" "} for d in digits):
            raise ValueError("malformed whitespace payload")
        out.append(chr(int("".join(str(len(d) - 1) for d in digits))))
    return "".join(out)


_stub_technique(
    T.ENCODING_WHITESPACE,
    [
        _Stub(
            "IEX (-Join ('{P}' -split ([char]9+[char]9) | % { [char][int](-Join ($_ -split [char]9 | % { $_.Length - 1 })) }))"
        ),
    ],
    _ws_encode,
    _ws_decode,
)


# --------------------------------------------------------------------------
# PowerShell: token and string techniques

_TICK_BAD = set("0abefnrtuvABEFNRTUV")
_WORD_RX = re.compile(r"(?<![\w$`\-.:\\/\[])[A-Za-z][A-Za-z0-9]*(?:-[A-Za-z0-9]+)*")


def _token_transform(text, rng, intensity, start):
    if "`" in text:
        raise Inapplicable(T.TOKEN_OBFUSCATION, text, "already contains backticks")
    a, b = _ps_script_span(text, start, T.TOKEN_OBFUSCATION)
    qmask = _ps_quote_mask(text[a:b])
    depth = 0
    brackets = []
    for c in text[a:b]:
        if c == "[":
            depth += 1
        brackets.append(depth > 0)
        if c == "]" and depth:
            depth -= 1
    spots = []
    for m in _WORD_RX.finditer(text, a, b):
        i0 = m.start() - a
        if qmask[i0] or brackets[i0]:
            continue
        for j in range(m.start() + 1, m.end()):
            if text[j].isalpha() and text[j] not in _TICK_BAD:
                spots.append(j)
    if not spots:
        raise Inapplicable(T.TOKEN_OBFUSCATION, text, "no bareword tokens")
    p = 0.2 + 0.5 * intensity
    chosen = {j for j in spots if rng.random() < p} or {rng.choice(spots)}
    return "".join(("`" + c) if i in chosen else c for i, c in enumerate(text))


register(T.TOKEN_OBFUSCATION, Shell.POWERSHELL)((_token_transform, lambda s: s.replace("`", "")))


def _string_literals(text: str, a: int, b: int) -> list[tuple[int, int, str]]:
    """``(open_index, close_index, quote)`` for splittable literals in ``text[a:b]``."""
    out = []
    i = a
    while i < b:
        c = text[i]
        if c in "'\"":
            j = text.find(c, i + 1, b)
            if j < 0:
                break
            body = text[i + 1 : j]
            ok = len(body) >= 2 and "{" not in body and "}" not in body
            if c == '"':
                ok = ok and "$" not in body and "`" not in body
            if j + 1 < b and text[j + 1] == c:
                ok = False  # doubled-quote escape
            if ok:
                out.append((i, j, c))
            i = j + 1
        else:
            i += 1
    return out


def _cut(body: str, rng: random.Random, k: int) -> list[str]:
    k = max(2, min(k, len(body)))
    cuts = sorted(rng.sample(range(1, len(body)), k - 1))
    return [body[x:y] for x, y in zip([0] + cuts, cuts + [len(body)])]


_CONCAT_RX = re.compile(r"\((?:'[^']*'\+)+'[^']*'\)|\((?:\"[^\"]*\"\+)+\"[^\"]*\"\)")
_REORDER_RX = re.compile(
    r"\(\"(?P<f>(?:\{\d+\})+)\" -f (?P<a>(?:'[^']*'|\"[^\"]*\")(?:,(?:'[^']*'|\"[^\"]*\"))*)\)"
)


def _string_transform(technique: Technique, render):
    def transform(text, rng, intensity, start):
        if _CONCAT_RX.search(text) or _REORDER_RX.search(text):
            raise Inapplicable(technique, text, "already contains concatenated strings")
        a, b = _ps_script_span(text, start, technique)
        lits = _string_literals(text, a, b)
        if not lits:
            raise Inapplicable(technique, text, "no string literal")
        chosen = [x for x in lits if rng.random() < intensity] or [rng.choice(lits)]
        out = []
        pos = 0
        for i, j, q in chosen:
            body = text[i + 1 : j]
            k = 2 + int(rng.random() * (1 + 3 * intensity))
            out.append(text[pos:i])
            out.append(render(_cut(body, rng, k), q, rng))
            pos = j + 1
        out.append(text[pos:])
        return "".join(out)

    return transform


def _render_concat(pieces, q, rng):
    return "(" + "+".join(q + p + q for p in pieces) + ")"


def _render_reorder(pieces, q, rng):
    order = list(range(len(pieces)))
    while order == sorted(order):
        rng.shuffle(order)
    # order[slot] = which original piece sits at argument slot
    slot_of = {orig: slot for slot, orig in enumerate(order)}
    fmt = "".join("{%d}" % slot_of[i] for i in range(len(pieces)))
    args = ",".join(q + pieces[orig] + q for orig in order)
    return f'("{fmt}" -f {args})'


def _concat_oracle(text):
    def join(m):
        s = m.group(0)
        q = s[1]
        return q + "".join(re.findall(re.escape(q) + "([^" + q + "]*)" + re.escape(q), s)) + q

    return _CONCAT_RX.sub(join, text)


def _reorder_oracle(text):
    def join(m):
        args = re.findall(r"'([^']*)'|\"([^\"]*)\"", m.group("a"))
        q = "'" if m.group("a")[0] == "'" else '"'
        vals = [x or y for x, y in args]
        idx = [int(x) for x in re.findall(r"\{(\d+)\}", m.group("f"))]
        return q + "".join(vals[i] for i in idx) + q

    return _REORDER_RX.sub(join, text)


register(T.STRING_CONCATENATE, Shell.POWERSHELL)(
    (_string_transform(T.STRING_CONCATENATE, _render_concat), _concat_oracle)
)
register(T.STRING_CONCATENATE_REORDER, Shell.POWERSHELL)(
    (_string_transform(T.STRING_CONCATENATE_REORDER, _render_reorder), _reorder_oracle)
)


# --------------------------------------------------------------------------
# cmd: environment-variable substrings

ENV_TABLE = {
    "comspec": r"C:\WINDOWS\system32\cmd.exe",
    "public": r"C:\Users\Public",
    "programfiles": r"C:\Program Files",
    "programdata": r"C:\ProgramData",
    "systemroot": r"C:\WINDOWS",
    "commonprogramfiles": r"C:\Program Files\Common Files",
    "pathext": ".COM;.EXE;.BAT;.CMD;.VBS;.VBE;.JS;.JSE;.WSF;.WSH;.MSC",
    "os": "Windows_NT",
    "processor_architecture": "AMD64",
    "allusersprofile": r"C:\ProgramData",
}
_ENV_NAMES = {
    "comspec": "ComSpec", "public": "PUBLIC", "programfiles": "ProgramFiles", "programdata": "ProgramData",
    "systemroot": "SystemRoot", "commonprogramfiles": "CommonProgramFiles", "pathext": "PATHEXT",
    "os": "OS", "processor_architecture": "PROCESSOR_ARCHITECTURE", "allusersprofile": "ALLUSERSPROFILE",
}
_ENV_SOURCES: dict[str, list[tuple[str, int]]] = {}
for _name, _value in ENV_TABLE.items():
    for _i, _c in enumerate(_value):
        _ENV_SOURCES.setdefault(_c, []).append((_name, _i))
_ENV_RX = re.compile(r"%(?P<n>[A-Za-z_]+):~(?P<i>-?\d+),1%")


def _env_transform(technique: Technique, tier: float, medium: bool):
    def transform(text, rng, intensity, start):
        if ":~" in text:
            raise Inapplicable(technique, text, "already uses substring expansion")
        p0, _ = _cmd_payload(text, start, technique)
        # never touch characters inside an existing %VAR% reference
        in_var = [False] * len(text)
        for m in re.finditer(r"%[^%\s]+%", text):
            for k in range(m.start(), m.end()):
                in_var[k] = True
        spots = [i for i in range(p0, len(text)) if text[i] in _ENV_SOURCES and text[i].isalnum() and not in_var[i]]
        if not spots:
            raise Inapplicable(technique, text, "no characters available from environment variables")
        chosen = {i for i in spots if rng.random() < tier * intensity} or {rng.choice(spots)}
        out = []
        for i, c in enumerate(text):
            if i not in chosen:
                out.append(c)
                continue
            name, idx = rng.choice(_ENV_SOURCES[c])
            shown = _ENV_NAMES[name]
            if medium:
                shown = _rcase(shown, rng, 0.8)
                if rng.random() < 0.5:
                    idx -= len(ENV_TABLE[name])
            out.append(f"%{shown}:~{idx},1%")
        return "".join(out)

    return transform


def _env_oracle(text):
    def sub(m):
        name = m.group("n").lower()
        if name not in ENV_TABLE:
            raise OracleError(f"unknown environment variable {m.group('n')}")
        return ENV_TABLE[name][int(m.group("i"))]

    return _ENV_RX.sub(sub, text)


register(T.ENV_VARIABLE_LIGHT, Shell.CMD)((_env_transform(T.ENV_VARIABLE_LIGHT, 0.35, False), _env_oracle))
register(T.ENV_VARIABLE_MEDIUM, Shell.CMD)((_env_transform(T.ENV_VARIABLE_MEDIUM, 0.75, True), _env_oracle))


# --------------------------------------------------------------------------
# cmd: delayed-expansion payload rebuilds

_WRAP_RX = re.compile(r'/V:ON (?P<sw>(?:/[A-Za-z](?::\w+)? )*?/[CcKk]) "(?P<body>.*)"$', re.DOTALL)
_NAME_POOL = "-#$@;'_~+"
_FILLER_POOL = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,;:-_#@~+=/\\"


def _payload_technique(technique: Technique, build, parse):
    def transform(text, rng, intensity, start):
        p0, switches = _cmd_payload(text, start, technique)
        payload = text[p0:]
        if "&&" in payload or "!" in payload:
            raise Inapplicable(technique, text, "payload uses && or ! already")
        return text[:start] + f'/V:ON {switches} "{build(payload, rng, intensity)}"'

    def oracle(text):
        m = _WRAP_RX.search(text)
        if not m:
            raise OracleError(f"{technique.value}: no /V:ON wrapper")
        try:
            payload = parse(m.group("body"))
        except (ValueError, KeyError, IndexError, AttributeError) as exc:
            raise OracleError(f"{technique.value}: malformed body ({exc})") from None
        return text[: m.start()] + m.group("sw") + " " + payload

    register(technique, Shell.CMD)((transform, oracle))


def _var_names(rng: random.Random, k: int, fancy: bool) -> list[str]:
    names: list[str] = []
    while len(names) < k:
        if fancy:
            n = "".join(rng.choice(_NAME_POOL) for _ in range(rng.randint(2, 6)))
        else:
            n = "".join(rng.choice("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ") for _ in range(rng.randint(1, 3)))
        if n not in names:
            names.append(n)
    return names


def _concat_build(medium: bool):
    def build(payload, rng, intensity):
        lo, hi = (4, 9) if medium else (2, 4)
        k = min(len(payload), lo + int(intensity * (hi - lo)))
        if k < 2:
            raise Inapplicable(T.PAYLOAD_CONCAT_LIGHT, payload, "payload too short")
        for _ in range(20):
            pieces = _cut(payload, rng, k)
            if not any(p.startswith(("set ", "call ")) for p in pieces[1:]):
                break
        names = _var_names(rng, len(pieces), medium)
        sets = [f"set {n}={p}" for n, p in zip(names, pieces)]
        if medium:
            rng.shuffle(sets)
        return "&&".join(sets) + "&&call " + "".join(f"!{n}!" for n in names)

    return build


def _concat_parse(body):
    parts = re.split(r"&&(?=set |call )", body)
    values = {}
    for part in parts[:-1]:
        if not part.startswith("set "):
            raise ValueError("expected set statement")
        name, _, value = part[4:].partition("=")
        values[name] = value
    call = parts[-1]
    if not call.startswith("call "):
        raise ValueError("missing call")
    names = call[5:].split("!")[1::2]
    return "".join(values[n] for n in names)


_payload_technique(T.PAYLOAD_CONCAT_LIGHT, _concat_build(False), _concat_parse)
_payload_technique(T.PAYLOAD_CONCAT_MEDIUM, _concat_build(True), _concat_parse)


def _reverse_build(medium: bool):
    def build(payload, rng, intensity):
        step = 1 + rng.randint(1, 1 + int(2 * intensity)) if medium else 1
        rev = payload[::-1]
        value = "".join(c + "".join(rng.choice(_FILLER_POOL) for _ in range(step - 1)) for c in rev)
        v, f = _var_names(rng, 2, False)
        loop = rng.choice("ABCDEFGHIJKLMNOPQRSTUVWXYZ")
        hi = (len(rev) - 1) * step
        return (
            f"set {v}={value}&&for /L %{loop} in ({hi},-{step},0) do set {f}=!{f}!!{v}:~%{loop},1!"
            f"&&if %{loop} equ 0 call %{f}:~-{len(payload)}%"
        )

    return build


_REV_RX = re.compile(
    r"^set (?P<v>[^=]+)=(?P<val>.*)&&for /L %(?P<L>\w) in \((?P<hi>\d+),-(?P<step>\d+),0\) do ", re.DOTALL
)


def _reverse_parse(body):
    m = _REV_RX.match(body)
    step = int(m.group("step"))
    return m.group("val")[::step][::-1]


_payload_technique(T.PAYLOAD_REVERSE_LIGHT, _reverse_build(False), _reverse_parse)
_payload_technique(T.PAYLOAD_REVERSE_MEDIUM, _reverse_build(True), _reverse_parse)


def _forcode_build(payload, rng, intensity):
    chars = sorted(set(payload))
    extra = [c for c in _FILLER_POOL if c not in chars]
    chars += rng.sample(extra, min(len(extra), int(8 * intensity)))
    rng.shuffle(chars)
    charset = "".join(chars)
    where = {c: i for i, c in enumerate(chars)}
    sentinel = len(chars) + rng.randint(0, 1000)
    idx = " ".join(str(where[c]) for c in payload) + f" {sentinel}"
    v, f = _var_names(rng, 2, False)
    loop = rng.choice("ABCDEFGHIJKLMNOPQRSTUVWXYZ")
    return (
        f"set {v}={charset}&&for %{loop} in ({idx}) do set {f}=!{f}!!{v}:~%{loop},1!"
        f"&&if %{loop} equ {sentinel} call %{f}:~-{len(payload)}%"
    )


_FOR_RX = re.compile(r"^set (?P<v>[^=]+)=(?P<cs>.*?)&&for %(?P<L>\w) in \((?P<idx>[\d ]+)\) do ", re.DOTALL)


def _forcode_parse(body):
    m = _FOR_RX.match(body)
    cs = m.group("cs")
    idx = [int(x) for x in m.group("idx").split()][:-1]
    return "".join(cs[i] for i in idx)


_payload_technique(T.PAYLOAD_FORCODE, _forcode_build, _forcode_parse)


# --------------------------------------------------------------------------
# techniques seen in the wild: carets, whitespace, case


def _caret_transform(text, rng, intensity, start):
    if "^" in text:
        raise Inapplicable(T.CARET_INSERTION, text, "already contains carets")
    q = _dq_mask(text)
    spots = [i for i in range(start, len(text)) if text[i].isalnum() and not q[i]]
    if not spots:
        raise Inapplicable(T.CARET_INSERTION, text, "no eligible characters")
    chosen = {i for i in spots if rng.random() < intensity} or {rng.choice(spots)}
    return "".join(("^" + c) if i in chosen else c for i, c in enumerate(text))


def _caret_oracle(text):
    q = _dq_mask(text)
    return "".join(
        c for i, c in enumerate(text) if not (c == "^" and not q[i] and i + 1 < len(text) and text[i + 1].isalnum())
    )


register(T.CARET_INSERTION, Shell.ANY)((_caret_transform, _caret_oracle))


def _ws_insert_transform(text, rng, intensity, start):
    if re.search(r"[\t\r\n\x0b\x0c]| {2}", text) or text != text.strip():
        raise Inapplicable(T.WHITESPACE_INSERTION, text, "whitespace is already irregular")
    q = _dq_mask(text)
    gaps = [i for i in range(max(start - 1, 0), len(text)) if text[i] == " " and not q[i]]
    if not gaps:
        raise Inapplicable(T.WHITESPACE_INSERTION, text, "no argument gap")
    chosen = {i for i in gaps if rng.random() < intensity * 0.6} or {gaps[0] if rng.random() < 0.7 else rng.choice(gaps)}
    longest = max(1, round(14 * intensity))
    out = []
    for i, c in enumerate(text):
        out.append(c)
        if i in chosen:
            n = rng.randint(1, longest)
            run = rng.choices(["\r", "\t", " "], weights=[0.5, 0.35, 0.15], k=n)
            if run == [" "] * n:
                run[0] = "\r"
            out.extend(run)
    return "".join(out)


def _ws_insert_oracle(text):
    return re.sub(r"[ \t\r]+", " ", text).strip()


register(T.WHITESPACE_INSERTION, Shell.ANY)((_ws_insert_transform, _ws_insert_oracle))


def _case_transform(text, rng, intensity, start):
    spots = [i for i in range(start, len(text)) if text[i].isalpha() and text[i].lower() != text[i].upper()]
    if not spots:
        raise Inapplicable(T.CASE_MIXING, text, "no letters")
    chars = list(text)
    p = 0.25 + 0.75 * intensity
    for i in spots:
        if rng.random() < p:
            chars[i] = chars[i].upper() if rng.random() < 0.5 else chars[i].lower()
    if chars == list(text):
        i = rng.choice(spots)
        chars[i] = chars[i].swapcase()
    return "".join(chars)


register(T.CASE_MIXING, Shell.ANY, casefold=True)((_case_transform, lambda s: s.lower()))
