"""Binary blobs with a JSON header.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON
header, then the raw little-endian arrays back to back.  The header lists
each array with its dtype, shape and byte offset relative to the data start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"RLABBLOB"
FORMAT_VERSION = 1


def write_blob(path: str | Path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def read_blob(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a blob file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data[start : start + n], dtype=dt).reshape(e["shape"]).copy()
    return header["meta"], arrays
