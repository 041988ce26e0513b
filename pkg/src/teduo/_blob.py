"""Self-describing binary container for named arrays.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a UTF-8 JSON header (sorted keys) listing each array's dtype and shape plus
free-form metadata, then the raw little-endian array bytes in header order.
No timestamps, so identical contents give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEDUOBLB"
VERSION = 1


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    names = sorted(arrays)
    fixed = {n: np.ascontiguousarray(arrays[n]) for n in names}
    for n, a in fixed.items():
        if a.dtype.kind not in "biuf":
            raise TypeError(f"array {n!r} has unsupported dtype {a.dtype}")
        fixed[n] = a.astype(a.dtype.newbyteorder("<"), copy=False)
    header = {"arrays": [{"name": n, "dtype": fixed[n].dtype.str, "shape": list(fixed[n].shape)}
                         for n in names],
              "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    parts += [fixed[n].tobytes() for n in names]
    return b"".join(parts)


def loads(data: bytes) -> tuple[dict, dict]:
    if data[:8] != MAGIC:
        raise ValueError("not a blob file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported blob version {version}")
    header = json.loads(data[20:20 + hlen])
    offset = 20 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
        offset += count * dt.itemsize
    return arrays, header["meta"]


def save(path, arrays: dict, meta: dict | None = None, sidecar: dict | None = None) -> None:
    """Write ``path`` and, when given, a ``path + '.json'`` sidecar."""
    path = Path(path)
    path.write_bytes(dumps(arrays, meta))
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n",
                                             encoding="utf-8")


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())
