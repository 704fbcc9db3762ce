"""In-memory datasets and the ``.eds`` container.

Layout: ``b"EDS1"``, u32 version, u32 record count, u32 header length, a
UTF-8 JSON header (kind, record dtype, meta, sha256 of the record block),
then the records as one packed structured-array block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EDS1"
VERSION = 1
_PREFIX = struct.Struct("<4sIII")


class DatasetFormatError(ValueError):
    pass


def _dtype_to_json(dt: np.dtype) -> list:
    out = []
    for name in dt.names:
        sub = dt.fields[name][0]
        if sub.subdtype is None:
            out.append([name, sub.str, []])
        else:
            base, shape = sub.subdtype
            out.append([name, base.str, list(shape)])
    return out


def _dtype_from_json(spec: list) -> np.dtype:
    return np.dtype([(name, base, tuple(shape)) if shape else (name, base) for name, base, shape in spec])


@dataclass
class Dataset:
    kind: str
    records: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.records).tobytes()).hexdigest()

    def subset(self, idx) -> "Dataset":
        return Dataset(self.kind, self.records[idx], dict(self.meta))

    def to_bytes(self) -> bytes:
        header = {
            "kind": self.kind,
            "dtype": _dtype_to_json(self.records.dtype),
            "meta": self.meta,
            "content_hash": self.content_hash,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        body = np.ascontiguousarray(self.records).tobytes()
        return _PREFIX.pack(MAGIC, VERSION, len(self.records), len(hbytes)) + hbytes + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if len(data) < _PREFIX.size:
            raise DatasetFormatError("file too short for .eds prefix")
        magic, version, count, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DatasetFormatError(f"unsupported .eds version {version}")
        start = _PREFIX.size + hlen
        if len(data) < start:
            raise DatasetFormatError("truncated header")
        try:
            header = json.loads(data[_PREFIX.size : start])
            dtype = _dtype_from_json(header["dtype"])
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"unreadable header: {exc}") from None
        body = data[start:]
        if len(body) != count * dtype.itemsize:
            raise DatasetFormatError(f"expected {count * dtype.itemsize} record bytes, found {len(body)}")
        if hashlib.sha256(body).hexdigest() != header.get("content_hash"):
            raise DatasetFormatError("record block hash mismatch")
        records = np.frombuffer(body, dtype=dtype).copy()
        return cls(header["kind"], records, header.get("meta", {}))


def save_dataset(ds: Dataset, path: str | Path) -> str:
    """Atomically write ``ds``; returns its content hash."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ds.to_bytes())
    tmp.replace(path)
    return ds.content_hash


def load_dataset(path: str | Path) -> Dataset:
    return Dataset.from_bytes(Path(path).read_bytes())
