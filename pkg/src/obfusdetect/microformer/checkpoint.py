"""Versioned binary checkpoint format.

Layout: 8-byte magic, u32 format version, u32 header length, UTF-8 JSON
header, then raw little-endian tensor blobs in the header's order. The
header carries the model config, the tokenizer hash and a precision tag.
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import Params, param_shapes

__all__ = ["MAGIC", "CHECKPOINT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint", "read_header"]

MAGIC = b"OBFMF\x00\x01\x00"
CHECKPOINT_VERSION = 1
_DTYPES = {"bits32": "<f4", "bits16": "<f2", "bits64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    params: Params,
    config: ModelConfig,
    tokenizer_hash: str = "",
    *,
    precision: str = "bits32",
    extra: dict | None = None,
) -> Path:
    """Write ``params``; ``precision="bits16"`` stores half floats (lossy)."""
    if precision not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
    dt = np.dtype(_DTYPES[precision])
    names = list(param_shapes(config))
    blobs = []
    table = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype=dt)
        data = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": config.to_dict(),
        "tokenizer_hash": tokenizer_hash,
        "precision": precision,
        "dtype": _DTYPES[precision],
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _header(fh, path)[0]


def _header(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    return json.loads(fh.read(hlen).decode("utf-8")), len(MAGIC) + 8 + hlen


def load_checkpoint(
    path: str | Path,
    *,
    tokenizer_hash: str | None = None,
    vocab_size: int | None = None,
    dtype=np.float32,
) -> tuple[Params, ModelConfig]:
    """Read a checkpoint back as ``dtype`` arrays.

    A ``vocab_size`` different from the stored config is an error; a
    tokenizer hash mismatch only raises a :class:`UserWarning`.
    """
    with open(path, "rb") as fh:
        header, start = _header(fh, path)
        body = fh.read()
    config = ModelConfig.from_dict(header["config"])
    if vocab_size is not None and vocab_size != config.vocab_size:
        raise CheckpointError(f"{path}: checkpoint vocab_size {config.vocab_size} != expected {vocab_size}")
    if tokenizer_hash is not None and header.get("tokenizer_hash") != tokenizer_hash:
        warnings.warn(
            f"{path}: checkpoint was trained with tokenizer {header.get('tokenizer_hash')!r}, "
            f"current tokenizer is {tokenizer_hash!r}",
            UserWarning,
            stacklevel=2,
        )
    dt = np.dtype(header["dtype"])
    shapes = param_shapes(config)
    params: Params = {}
    for t in header["tensors"]:
        name = t["name"]
        if name not in shapes or tuple(t["shape"]) != shapes[name]:
            raise CheckpointError(f"{path}: tensor {name} does not fit the stored config")
        raw = body[t["offset"] : t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        params[name] = np.frombuffer(raw, dtype=dt).reshape(t["shape"]).astype(dtype)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return params, config
