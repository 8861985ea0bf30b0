"""Checkpoint container shared repo-wide.

Layout (documented in docs/formats.md): an ASCII header terminated by a
``payload`` line, followed by raw little-endian IEEE-754 32-bit floats.

    TUVF-CKPT 1
    tensor <name> <d0>x<d1>x... <byte-offset>
    ...
    payload <total-bytes>
    <raw float32 data>

Offsets are relative to the payload start. Entry order is preserved on
load, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

MAGIC = "TUVF-CKPT 1"


def save_checkpoint(entries: dict[str, "Tensor | np.ndarray"], path) -> None:
    header = [MAGIC]
    blobs: list[bytes] = []
    offset = 0
    for name, value in entries.items():
        if " " in name or "\n" in name:
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                         dtype="<f4")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        dims = "x".join(str(d) for d in arr.shape)
        header.append(f"tensor {name} {dims} {offset}")
        raw = np.ascontiguousarray(arr).tobytes()
        blobs.append(raw)
        offset += len(raw)
    header.append(f"payload {offset}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").rstrip("\n")
        if first != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        specs: list[tuple[str, tuple[int, ...], int]] = []
        while True:
            line = fh.readline().decode("ascii").rstrip("\n")
            if line.startswith("payload "):
                total = int(line.split()[1])
                break
            kind, name, dims, off = line.split()
            if kind != "tensor":
                raise ValueError(f"{path}: bad manifest line {line!r}")
            shape = tuple(int(d) for d in dims.split("x"))
            specs.append((name, shape, int(off)))
        payload = fh.read(total)
    if len(payload) != total:
        raise ValueError(f"{path}: truncated payload")
    out: dict[str, np.ndarray] = {}
    for name, shape, off in specs:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        out[name] = arr.reshape(shape).copy()
    return out


def checkpoint_checksum(entries: dict[str, "Tensor | np.ndarray"]) -> str:
    """Stable content hash over names, shapes, and float32 payload bytes."""
    import hashlib

    h = hashlib.sha256()
    for name, value in entries.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                         dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
