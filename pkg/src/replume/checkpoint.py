"""Binary checkpoint format.

Layout::

    b"RPLM"                      4 bytes magic
    version                      u16 little-endian
    header_len                   u32 little-endian
    header                       UTF-8 JSON: config, tensor manifest, vocab, meta
    tensor blocks                little-endian float32, manifest order

Each manifest entry records name, shape, byte offset (relative to the start
of the block section) and byte length.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import EncoderConfig, ModelCheckpoint, Params, param_shapes
from .tensor import Tensor
from .tokenizer import Vocabulary

MAGIC = b"RPLM"
VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")


def save_checkpoint(params: Params, config: EncoderConfig, path: str | Path, vocab: Vocabulary | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    shapes = param_shapes(config)
    manifest, blocks, offset = [], [], 0
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        if arr.shape != shape:
            raise CheckpointShapeError(f"{name}: shape {arr.shape}, config expects {shape}")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = {
        "config": config.to_dict(),
        "tensors": manifest,
        "vocab": list(vocab.id_to_token) if vocab is not None else None,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blocks:
            fh.write(raw)
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREAMBLE.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the preamble")
    magic, version, head_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    start = _PREAMBLE.size + head_len
    if len(blob) < start:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(blob[_PREAMBLE.size:start].decode("utf-8"))
        config = EncoderConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc

    expected = param_shapes(config)
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(expected):
        raise CheckpointShapeError(f"{path}: tensor names do not match the header config")
    params: Params = {}
    for name, shape in expected.items():
        e = entries[name]
        if tuple(e["shape"]) != shape or e["nbytes"] != 4 * int(np.prod(shape)):
            raise CheckpointShapeError(f"{path}: {name} stored as {e['shape']}, config expects {list(shape)}")
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(blob):
            raise CheckpointTruncatedError(f"{path}: tensor {name} runs past end of file")
        data = np.frombuffer(blob[lo:hi], dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    vocab = Vocabulary(header["vocab"]) if header.get("vocab") else None
    return ModelCheckpoint(config=config, params=params, vocab=vocab, meta=header.get("meta", {}))
