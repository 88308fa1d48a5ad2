"""Checkpoint container and its binary file format.

Layout: magic `SSVC`, u32 format version, u32 header length, JSON header
(config echo, metadata, tensor table with shapes/offsets/partition), then
raw little-endian f32 tensor data. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import ParamSet
from .utils import content_hash

MAGIC = b"SSVC"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> f32 ndarray
    partition: dict = field(default_factory=dict)  # name -> pre/post/none

    def to_bytes(self) -> bytes:
        table = []
        payload = bytearray()
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            table.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "partition": self.partition.get(name, "none"),
            })
            payload.extend(arr.tobytes())
        header = json.dumps(
            {"config": self.config, "meta": self.meta, "tensors": table},
            sort_keys=True).encode("utf-8")
        return MAGIC + struct.pack("<II", VERSION, len(header)) + header + bytes(payload)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError(f"bad checkpoint magic: {blob[:4]!r}")
        version, header_len = struct.unpack("<II", blob[4:12])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        data = blob[12 + header_len:]
        tensors, partition = {}, {}
        for row in header["tensors"]:
            shape = tuple(row["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = row["offset"]
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
            tensors[row["name"]] = arr.reshape(shape).copy()
            partition[row["name"]] = row.get("partition", "none")
        return cls(config=header["config"], meta=header["meta"],
                   tensors=tensors, partition=partition)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def content_id(self) -> str:
        return content_hash(self.to_bytes())

    def param_set(self, prefix: str = "") -> ParamSet:
        """Extract the ParamSet stored under `prefix` (e.g. "teacher/")."""
        if not prefix:
            prefix = self.meta.get("embed_prefix", "")
        tensors, partition = {}, {}
        for name, arr in self.tensors.items():
            if name.startswith(prefix):
                short = name[len(prefix):]
                tensors[short] = arr
                partition[short] = self.partition.get(name, "none")
        if not tensors:
            raise CheckpointError(f"checkpoint holds no tensors under prefix {prefix!r}")
        return ParamSet(tensors=tensors, partition=partition)


def store_param_set(ckpt: Checkpoint, p: ParamSet, prefix: str = ""):
    for name, arr in p.tensors.items():
        ckpt.tensors[prefix + name] = np.asarray(arr, dtype=np.float32)
        ckpt.partition[prefix + name] = p.partition.get(name, "none")
