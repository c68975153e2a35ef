"""Binary checkpoint format.

Layout (all little-endian): magic ``PRWK``, u32 format version, then until
EOF a sequence of records ``u32 name_len, name (utf-8), u32 rank,
rank x u64 extents, float64 values (row-major)``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PRWK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; keeps rank 0
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record") from exc
    return out


def save_module(path: str | Path, module) -> None:
    save_arrays(path, module.state_dict())


def load_module(path: str | Path, module, strict: bool = True, prefix: str = "") -> list[str]:
    """Copy stored arrays into ``module``'s parameters by name; returns the names loaded.

    A stored array whose shape disagrees with the parameter of the same name
    is rejected. With ``strict`` every parameter must be present. ``prefix``
    selects stored names starting with it (stripped before matching).
    """
    stored = load_arrays(path)
    if prefix:
        stored = {k[len(prefix) :]: v for k, v in stored.items() if k.startswith(prefix)}
    params = dict(module.named_parameters())
    loaded = []
    for name, p in params.items():
        if name not in stored:
            if strict:
                raise CheckpointError(f"missing parameter {name!r}")
            continue
        arr = stored[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: stored {arr.shape}, model {p.shape}")
        p.data = arr.astype(p.data.dtype)
        loaded.append(name)
    return loaded
