"""Single-file checkpoint format.

Layout (little-endian)::

    8 bytes   magic b"THORNCKP"
    u32       format version
    u32       metadata length, then that many bytes of UTF-8 JSON
    u32       number of parameter blocks
    per block: u32 name length, name bytes, u32 rank, rank x u32 dims,
               prod(dims) x float64
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"THORNCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(state, metadata)``; tensors come back as float64."""
    data = Path(path).read_bytes()
    try:
        return _parse(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc


def _parse(data: bytes, path) -> tuple[dict[str, torch.Tensor], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    metadata = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if pos + 8 * size > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        state[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return state, metadata


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept ``runs/a/best``, ``runs/a/best.ckpt`` or a run directory."""
    path = Path(path)
    if path.is_file():
        return path
    if path.with_suffix(".ckpt").is_file():
        return path.with_suffix(".ckpt")
    if path.is_dir() and (path / "best.ckpt").is_file():
        return path / "best.ckpt"
    raise CheckpointError(f"checkpoint not found: {path}")
