"""Binary checkpoint format.

Layout: magic "TTXT", u32 version, u64 JSON-blob length, the UTF-8 config
blob, then named tensors until EOF, each as u64 name length, name bytes,
u64 ndim, u64 dims, and little-endian float64 data. Tensors are written in
sorted name order so identical state serializes identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTXT"
VERSION = 1


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        config = json.loads(fh.read(blob_len).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            (name_len,) = struct.unpack("<Q", head)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<Q", fh.read(8))
            dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
            tensors[name] = data.astype(np.float64)
    return config, tensors
