"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    magic  b"SSKWCKPT"
    u32    format version
    u64    header length, then that many bytes of canonical JSON, then u32 CRC32
    u32    tensor count
           per tensor: u16 name length + UTF-8 name, u8 ndim, u32*ndim dims,
           u64 data byte length
           followed by every tensor's raw <f4 row-major bytes in table order
    u32    CRC32 over the tensor table + data

Tensors are serialized float32 row-major in sorted name order; the JSON header
is dumped with sorted keys. Saving the same state twice therefore produces
byte-identical files. The header carries the config snapshot, counters, seed
and feature-normalization stats, so a checkpoint is loadable without the
originating config file.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SSKWCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or structurally incompatible."""


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically (tmp file + rename) so an interrupted save never clobbers."""
    path = Path(path)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    table = bytearray()
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_b = name.encode("utf-8")
        table += struct.pack("<H", len(name_b)) + name_b
        table += struct.pack("<B", arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", arr.nbytes)
        blobs.append(arr.tobytes())

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_blob)))
        fh.write(header_blob)
        fh.write(struct.pack("<I", zlib.crc32(header_blob)))
        fh.write(struct.pack("<I", len(tensors)))
        section = bytes(table) + b"".join(blobs)
        fh.write(section)
        fh.write(struct.pack("<I", zlib.crc32(section)))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    def need(n: int, what: str, off: int) -> None:
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint while reading {what}")

    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = 8
    need(4, "version", off)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    need(8, "header length", off)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    need(hlen + 4, "header", off)
    header_blob = data[off : off + hlen]
    off += hlen
    (hcrc,) = struct.unpack_from("<I", data, off)
    off += 4
    if zlib.crc32(header_blob) != hcrc:
        raise CheckpointError(f"{path}: header checksum mismatch")
    header = json.loads(header_blob.decode("utf-8"))

    need(4, "tensor count", off)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    section_start = off
    entries = []
    for _ in range(count):
        need(2, "tensor name length", off)
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        need(nlen + 1, "tensor name", off)
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        need(4 * ndim + 8, "tensor dims", off)
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        entries.append((name, shape, nbytes))

    tensors = {}
    for name, shape, nbytes in entries:
        need(nbytes, f"tensor {name!r}", off)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(data[off : off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
    need(4, "section checksum", off)
    (tcrc,) = struct.unpack_from("<I", data, off)
    if zlib.crc32(data[section_start:off]) != tcrc:
        raise CheckpointError(f"{path}: tensor section checksum mismatch")
    return Checkpoint(header=header, tensors=tensors)


def with_prefix(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in tensors.items()}


def strip_prefix(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def check_shapes(tensors: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]], context: str) -> None:
    """Raise CheckpointError listing every tensor whose shape disagrees."""
    problems = []
    for name, shape in expected.items():
        if name not in tensors:
            problems.append(f"{name}: missing")
        elif tuple(tensors[name].shape) != tuple(shape):
            problems.append(f"{name}: got {tuple(tensors[name].shape)}, expected {tuple(shape)}")
    if problems:
        raise CheckpointError(f"{context}: shape mismatch for {len(problems)} tensor(s): " + "; ".join(problems))
