"""Binary checkpoint format.

Layout (little-endian)::

    b"DAGN" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 dim | prod(dims) x f32 )
    u32 crc32 of everything before it

Run metadata travels as one extra entry, ``__meta__``, holding the UTF-8 bytes
of a JSON object as a rank-1 float tensor (byte values are exact in f32).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Module

MAGIC = b"DAGN"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    """Raised for malformed files; ``reason`` is one of magic, version, crc, format, names."""

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def restore(self, module: Module, prefix: str) -> Module:
        entries = self.subset(prefix)
        if not entries:
            raise CheckpointError("names", f"no entries for {prefix!r}")
        module.load_state_dict(entries)
        return module


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = list(tensors.items())
    if meta:
        raw = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        items.append((META_KEY, raw.astype(np.float32)))
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(items))
    for name, value in items:
        arr = np.array(value, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError("format", f"entry {name!r} cannot be encoded")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError("magic", "not a DAGN checkpoint")
    if len(blob) < 16:
        raise CheckpointError("crc", "file too short")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("crc", "checksum mismatch")
    (count,) = struct.unpack_from("<I", body, 8)
    pos = 12
    ckpt = Checkpoint()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError("format", f"entry {name!r} runs past end of file")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name in ckpt.tensors or (name == META_KEY and ckpt.meta):
                raise CheckpointError("names", f"duplicate entry {name!r}")
            if name == META_KEY:
                ckpt.meta = json.loads(arr.astype(np.uint8).tobytes().decode())
            else:
                ckpt.tensors[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError("format", str(exc)) from exc
    if pos != len(body):
        raise CheckpointError("format", "trailing bytes after last entry")
    return ckpt


def collect(nets: dict[str, Module]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, net in nets.items():
        for name, value in net.state_dict().items():
            out[f"{prefix}.{name}"] = value
    return out


def save_checkpoint(path, nets: dict[str, Module] | None = None, meta: dict | None = None,
                    tensors: dict[str, np.ndarray] | None = None) -> Path:
    entries = collect(nets or {})
    entries.update(tensors or {})
    path = Path(path)
    path.write_bytes(encode(entries, meta))
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
