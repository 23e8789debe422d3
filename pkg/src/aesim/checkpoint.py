"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"AESIMCKP"
    version      u32
    config       u64 length + UTF-8 JSON (model config, seed, dropout RNG state)
    vocab        u64 length + UTF-8 JSON list of tokens (empty list if none)
    parameters   tensor block
    optimizer    u8 flag; if 1: u64 length + JSON (lr, betas, eps, t), tensor block
    checksum     u32 CRC-32 of every preceding byte

A tensor block is a u32 count followed by records of
``u16 name length, name, u8 dtype code, u8 ndim, ndim x u64 dims, payload``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from .data import Vocab
from .errors import CheckpointError
from .model import EsimConfig, EsimModel
from .train import AdamState

MAGIC = b"AESIMCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def _write_blob(out: BinaryIO, payload: bytes) -> None:
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def _write_tensors(out: BinaryIO, tensors: dict[str, np.ndarray]) -> list[TensorEntry]:
    out.write(struct.pack("<I", len(tensors)))
    entries = []
    for name, arr in tensors.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"cannot store {name!r} with dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        entries.append(TensorEntry(name, _DTYPES[code].name, tuple(arr.shape)))
    return entries


def save_checkpoint(model: EsimModel, state: Optional[AdamState], path, seed: int = 0) -> list[TensorEntry]:
    """Write ``model`` (and optionally optimiser state) to ``path``.

    Returns the manifest of parameter tensors that was written.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    header = {
        "config": model.config.to_dict(),
        "seed": seed,
        "rng_state": model.rng.bit_generator.state,
    }
    _write_blob(buf, json.dumps(header).encode("utf-8"))
    tokens = model.vocab.itos if model.vocab is not None else []
    _write_blob(buf, json.dumps(tokens, ensure_ascii=False).encode("utf-8"))
    manifest = _write_tensors(buf, {name: t.data for name, t in model.named_parameters()})
    if state is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        meta = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "t": state.t}
        _write_blob(buf, json.dumps(meta).encode("utf-8"))
        moments = {f"m/{k}": v for k, v in state.m.items()}
        moments.update({f"v/{k}": v for k, v in state.v.items()})
        _write_tensors(buf, moments)
    body = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)
    return manifest


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<Q")
        return self.take(n)

    def json(self):
        try:
            return json.loads(self.blob().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt JSON block: {exc}") from exc

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode("utf-8")
            code, ndim = self.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name!r}")
            shape = self.unpack(f"<{ndim}Q")
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            out[name] = np.frombuffer(self.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        return out


def _open(path) -> _Reader:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint is truncated")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or modified file)")
    reader = _Reader(body)
    reader.pos = len(MAGIC) + 4
    return reader


def load_checkpoint(path) -> tuple[EsimModel, Optional[AdamState]]:
    reader = _open(path)
    header = reader.json()
    tokens = reader.json()
    params = reader.tensors()
    try:
        config = EsimConfig(**header["config"])
        vocab = Vocab(tokens[2:]) if tokens else None
        model = EsimModel(config, vocab_size=params["embedding"].shape[0], vocab=vocab, seed=header.get("seed", 0))
        model.load_state_dict(params)
        model.rng.bit_generator.state = header["rng_state"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint contents are inconsistent: {exc}") from exc
    state = None
    (flag,) = reader.unpack("<B")
    if flag:
        meta = reader.json()
        moments = reader.tensors()
        state = AdamState(**meta)
        for key, arr in moments.items():
            kind, name = key.split("/", 1)
            (state.m if kind == "m" else state.v)[name] = arr.copy()
    if reader.pos != len(reader.data):
        raise CheckpointError("trailing bytes after optimizer state")
    return model, state


def read_manifest(path) -> list[TensorEntry]:
    """Names, dtypes and shapes of the stored model parameters."""
    reader = _open(path)
    reader.blob()
    reader.blob()
    return [TensorEntry(name, arr.dtype.name, arr.shape) for name, arr in reader.tensors().items()]
