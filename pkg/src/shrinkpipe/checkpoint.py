"""Checkpoint directories: config.json, tokenizer.json and weights.bin.

weights.bin layout (all little-endian)::

    b"MCKP" | u32 version | u32 tensor count
    per tensor: u32 name length | name utf-8 | u32 rank | u32 dims[rank] | u64 byte offset
    raw float32 payloads at the recorded offsets
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import EncoderModel, ModelConfig, param_shapes
from .tokenizer import Tokenizer

MAGIC = b"MCKP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or malformed header."""


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


def write_weights(path, tensors: dict[str, np.ndarray]) -> None:
    items = [(name, np.ascontiguousarray(arr, dtype="<f4")) for name, arr in tensors.items()]
    header = bytearray(MAGIC + struct.pack("<II", FORMAT_VERSION, len(items)))
    entry_sizes = []
    for name, arr in items:
        raw = name.encode("utf-8")
        entry_sizes.append(4 + len(raw) + 4 + 4 * arr.ndim + 8)
    offset = len(header) + sum(entry_sizes)
    payload_offsets = []
    for _, arr in items:
        payload_offsets.append(offset)
        offset += arr.nbytes
    for (name, arr), off in zip(items, payload_offsets):
        raw = name.encode("utf-8")
        header += struct.pack("<I", len(raw)) + raw
        header += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", off)
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in items:
            fh.write(arr.tobytes())


def read_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"{path}: unexpected end of file at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a weights file")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: weights version {version}, expected {FORMAT_VERSION}")
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: tensor name is not utf-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (offset,) = struct.unpack("<Q", take(8))
        table.append((name, dims, offset))
    tensors = {}
    for name, dims, offset in table:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(buf):
            raise TruncatedCheckpointError(f"{path}: payload for {name!r} runs past end of file")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(dims).astype(np.float32)
    return tensors


def save_checkpoint(model: EncoderModel, tokenizer: Tokenizer | None, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config.to_dict()
    cfg["format_version"] = FORMAT_VERSION
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    if tokenizer is not None:
        if tokenizer.vocab_size != model.config.vocab_size:
            raise CheckpointError(
                f"tokenizer has {tokenizer.vocab_size} tokens, model vocab is {model.config.vocab_size}")
        tokenizer.save(out / "tokenizer.json")
    write_weights(out / "weights.bin", model.params)
    return out


def load_config(path) -> ModelConfig:
    p = Path(path)
    cfg_path = p / "config.json" if p.is_dir() else p
    try:
        raw = json.loads(cfg_path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing {cfg_path}") from exc
    if raw.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{cfg_path}: format_version {raw.get('format_version')!r}")
    return ModelConfig.from_dict(raw)


def load_checkpoint(path) -> tuple[EncoderModel, Tokenizer | None]:
    p = Path(path)
    config = load_config(p)
    tensors = read_weights(p / "weights.bin")
    expected = param_shapes(config)
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise UnknownTensorError(f"{p}: unknown tensor names {unknown}")
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointFormatError(f"{p}: missing tensors {missing}")
    tok_path = p / "tokenizer.json"
    tokenizer = Tokenizer.load(tok_path) if tok_path.exists() else None
    return EncoderModel(config, tensors), tokenizer
