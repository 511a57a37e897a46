"""Binary container shared by checkpoints and datasets.

Layout::

    b"HSFC" | u32 format version | u64 header length | header JSON (utf-8)
    | float64 little-endian payloads, concatenated in header order

The header holds free-form metadata plus one ``{"name", "shape"}`` record per
matrix.  Keys are sorted and payloads row-major, so writing the same content
twice gives identical bytes and a read/write round trip is byte-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ContractError

MAGIC = b"HSFC"
VERSION = 1


def write_container(path: str | Path, meta: dict[str, Any], arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise ContractError("duplicate matrix names in container")
    records = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays]
    header = json.dumps({"meta": meta, "arrays": records}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; ``arrays`` preserves the stored order."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a container file")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen])
    offset = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise ContractError(f"{path}: payload of {rec['name']!r} is truncated")
        arrays[rec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise ContractError(f"{path}: trailing or missing payload bytes")
    return header["meta"], arrays
