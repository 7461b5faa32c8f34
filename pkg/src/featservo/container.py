"""Single-file tensor container.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then raw little-endian float32 payloads in the order listed under the
header's ``"tensors"`` key. The header is written with sorted keys so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSRVPK01"
_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` (cast to float32) with ``header`` to ``path``."""
    if "tensors" in header:
        raise ContainerError("'tensors' is a reserved header key")
    specs = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ContainerError(f"tensor {name!r} has non-finite values")
        specs.append({"name": name, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    full = dict(header, tensors=specs)
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def read_container(path):
    """Return ``(header, tensors)``; tensors come back as float32 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    offset = 16 + n
    tensors = {}
    for spec in header.pop("tensors"):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * _DTYPE.itemsize
        if end > len(data):
            raise ContainerError(f"{path}: truncated payload for {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise ContainerError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors
