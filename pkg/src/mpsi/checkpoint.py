"""Binary parameter container with a checksum, plus a text manifest for debugging.

Layout (all integers little-endian)::

    b"MPSI-CKPT-1\\n"
    u32 entry count
    per entry: u32 name length, utf-8 name, u32 ndim, u64 * ndim extents,
               float64 values (little-endian, row-major)
    32-byte SHA-256 over every byte between the magic line and the digest
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MPSI-CKPT-1\n"
_DIGEST = 32


class CheckpointError(IOError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    payload = b"".join(chunks)
    return MAGIC + payload + hashlib.sha256(payload).digest()


def decode(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{source}: bad magic header (expected {MAGIC!r})")
    payload, digest = blob[len(MAGIC) : -_DIGEST], blob[-_DIGEST:]
    if len(blob) < len(MAGIC) + 4 + _DIGEST or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch")
    out: dict[str, np.ndarray] = {}
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError(f"{source}: truncated payload")
        chunk = payload[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise CheckpointError(f"{source}: duplicate entry {name!r}")
        out[name] = values
    if pos != len(payload):
        raise CheckpointError(f"{source}: trailing bytes after last entry")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return decode(blob, str(path))


def write_manifest(path, tensors: dict[str, np.ndarray]) -> None:
    """One line per tensor: ``name<TAB>shape<TAB>space-separated repr values``."""
    lines = []
    for name, value in tensors.items():
        value = np.asarray(value, dtype=np.float64)
        shape = "x".join(str(d) for d in value.shape) or "scalar"
        vals = " ".join(repr(float(v)) for v in value.reshape(-1))
        lines.append(f"{name}\t{shape}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, shape, vals = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        data = np.array([float(v) for v in vals.split()], dtype=np.float64)
        out[name] = data.reshape(dims)
    return out
