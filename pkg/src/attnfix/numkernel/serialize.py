"""``ATPT`` binary tensor files and named-tensor checkpoint directories.

Layout: magic ``ATPT``, u32 version, u32 rank, rank x u64 dims, then the
row-major data as little-endian f64. All integers little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"ATPT"
VERSION = 1


def dumps(arr) -> bytes:
    arr = np.array(getattr(arr, "data", arr), dtype="<f8", order="C")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ContractError("not an ATPT tensor (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported ATPT version {version}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 8 * count
    if len(buf) != expected:
        raise ContractError(f"ATPT payload size {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load_tensor(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_checkpoint(directory, tensors: dict, config: dict | None = None) -> None:
    """Write each named array as ``<name>.atpt`` plus an optional ``config.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        save_tensor(d / f"{name}.atpt", arr)
    if config is not None:
        (d / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict | None]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(str(d))
    tensors = {p.stem: load_tensor(p) for p in sorted(d.glob("*.atpt"))}
    cfg_path = d / "config.json"
    config = json.loads(cfg_path.read_text()) if cfg_path.exists() else None
    return tensors, config
