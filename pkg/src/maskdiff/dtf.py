"""DTF1 tensor files and the text-indexed checkpoint container.

DTF1 layout: magic ``DTF1``, one byte rank, `rank` little-endian uint32
dims, then row-major little-endian float32 values. Round-trips are
bit-exact.

A checkpoint is a text header (format tag, ``config k v`` lines, one
``tensor <name> <offset> <dims>`` line per tensor, ``end``) followed by the
concatenated DTF1 blobs; offsets are relative to the end of the header.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTF1"
_CKPT_TAG = "MASKDIFF-CKPT-1"


def dtf_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > 255:
        raise ValueError("rank exceeds DTF1 limit of 255")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        out.write(struct.pack("<I", d))
    out.write(arr.astype("<f4").tobytes(order="C"))
    return out.getvalue()


def dtf_from_bytes(raw: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one DTF1 record; returns (array, offset past the record)."""
    if raw[offset : offset + 4] != MAGIC:
        raise ValueError("bad DTF1 magic")
    rank = raw[offset + 4]
    pos = offset + 5
    dims = []
    for _ in range(rank):
        dims.append(struct.unpack_from("<I", raw, pos)[0])
        pos += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
    pos += count * 4
    arr = data.reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("DTF1 payload contains NaN/Inf")
    return arr, pos


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dtf_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    arr, _ = dtf_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict[str, object]) -> None:
    blobs: list[bytes] = []
    index: list[tuple[str, int, tuple[int, ...]]] = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} may not contain whitespace")
        blob = dtf_bytes(arr)
        index.append((name, offset, np.asarray(arr).shape))
        blobs.append(blob)
        offset += len(blob)
    lines = [_CKPT_TAG]
    for key in sorted(config):
        lines.append(f"config {key} {config[key]}")
    for name, ofs, dims in index:
        lines.append(f"tensor {name} {ofs} {','.join(str(d) for d in dims)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + b"".join(blobs))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    if raw[:nl].decode("utf-8") != _CKPT_TAG:
        raise ValueError(f"{path}: not a maskdiff checkpoint")
    pos = nl + 1
    config: dict[str, str] = {}
    index: list[tuple[str, int, tuple[int, ...]]] = []
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split(" ", 1)
            config[key] = value
        elif kind == "tensor":
            name, ofs, dims = rest.split(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            index.append((name, int(ofs), shape))
        else:
            raise ValueError(f"{path}: unknown checkpoint header line {line!r}")
    tensors: dict[str, np.ndarray] = {}
    for name, ofs, shape in index:
        arr, _ = dtf_from_bytes(raw, pos + ofs)
        if arr.shape != shape:
            raise ValueError(f"{path}: tensor {name!r} dims {arr.shape} disagree with index {shape}")
        tensors[name] = arr
    return tensors, config
