"""Binary containers for captured matrices and model checkpoints.

Matrix container: little-endian header
    magic "DTRK1" | t: u32 | l: u32 | kind: u8 | rows: u64 | cols: u64
followed by a row-major float32 payload. Checkpoints reuse the same header
(kind=CHECKPOINT, rows=block count, cols=0) followed by named parameter
blocks: u16 name length, utf-8 name, u8 ndim, ndim x u64 dims, float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DTRK1"
_HEADER = struct.Struct("<5sIIBQQ")

KIND_CODES = {"query": 0, "key": 1, "feature": 2, "attention": 3, "cost": 4}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
CHECKPOINT_KIND = 255


class CacheFormatError(ValueError):
    """Raised for malformed container files."""


def write_matrix(path, data: np.ndarray, t: int, layer: int, kind: str) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"container stores 2-d matrices, got shape {data.shape}")
    if kind not in KIND_CODES:
        raise ValueError(f"unknown kind {kind!r}; expected one of {sorted(KIND_CODES)}")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, t, layer, KIND_CODES[kind], rows, cols))
        fh.write(data.tobytes())


def read_matrix(path) -> tuple[np.ndarray, int, int, str]:
    """Returns (data, t, layer, kind)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, t, layer, kind_code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if kind_code not in KIND_NAMES:
        raise CacheFormatError(f"{path}: unknown kind code {kind_code}")
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise CacheFormatError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return data.copy(), t, layer, KIND_NAMES[kind_code]


def save_checkpoint(path, model: torch.nn.Module) -> None:
    state = model.state_dict()
    names = sorted(state)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 0, 0, CHECKPOINT_KIND, len(names), 0))
        for name in names:
            tensor = state[name].detach().cpu().numpy().astype("<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor).tobytes())


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, _, _, kind_code, blocks, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if kind_code != CHECKPOINT_KIND:
        raise CacheFormatError(f"{path}: not a checkpoint (kind {kind_code})")
    state: dict[str, torch.Tensor] = {}
    offset = _HEADER.size
    try:
        for _ in range(blocks):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
            offset += 8 * ndim
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += count * 4
            state[name] = torch.from_numpy(data.copy().reshape(shape))
    except struct.error as exc:
        raise CacheFormatError(f"{path}: truncated block data") from exc
    if offset != len(raw):
        raise CacheFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return state
