"""``.eck`` checkpoints: ``b"ECK1"``, u32 version, u32 header length, JSON
header (model config, head, provenance, tensor index, payload sha256), then
the named tensors as little-endian float32, concatenated in index order."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .transformer import HeadSpec, ModelConfig, Transformer

MAGIC = b"ECK1"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    model: Transformer
    provenance: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    def to_bytes(self) -> bytes:
        index = []
        chunks = []
        offset = 0
        for name, t in self.model.state_dict().items():
            arr = t.detach().cpu().numpy().astype("<f4")
            buf = arr.tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
            chunks.append(buf)
            offset += len(buf)
        payload = b"".join(chunks)
        spec = self.model.head_spec
        header = {
            "config": self.model.cfg.as_dict(),
            "head": asdict(spec),
            "provenance": self.provenance,
            "tensors": index,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < _PREFIX.size:
            raise CheckpointFormatError("file too short for .eck prefix")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported .eck version {version}")
        start = _PREFIX.size + hlen
        try:
            header = json.loads(data[_PREFIX.size : start])
            cfg = ModelConfig(**header["config"])
            head = HeadSpec(**header["head"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointFormatError(f"unreadable header: {exc}") from None
        payload = data[start:]
        if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
            raise CheckpointFormatError("tensor payload hash mismatch")
        model = Transformer(cfg, head)
        expected = model.state_dict()
        state = {}
        for entry in header["tensors"]:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(arr.copy())
        if set(state) != set(expected):
            raise CheckpointFormatError("tensor names do not match the model layout")
        model.load_state_dict(state)
        return cls(model, header.get("provenance", {}))


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> str:
    """Atomically write ``ckpt``; returns the sha256 of the file bytes."""
    data = ckpt.to_bytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())
