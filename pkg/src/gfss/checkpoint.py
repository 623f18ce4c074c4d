"""Single-file checkpoint format.

Layout::

    b"GFSSCKPT" | uint32 format version | uint64 header length | JSON header | tensor blobs

The header records the phase, epoch, config snapshot, taxonomy, lineage ids,
RNG state and, per tensor, its name, dtype, shape and byte offset into the
blob section. Tensors are stored as raw little-endian arrays.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gfss.errors import CheckpointError, LineageError

MAGIC = b"GFSSCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict
    phase: str
    epoch: int
    taxonomy: dict
    lineage_id: str = ""
    parent_lineage: str | None = None
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    # per-step loss rows of the run that produced this checkpoint; not serialized
    log: list = field(default_factory=list, repr=False)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "phase": self.phase,
            "epoch": self.epoch,
            "config": self.config,
            "taxonomy": self.taxonomy,
            "lineage_id": self.lineage_id,
            "parent_lineage": self.parent_lineage,
            "rng_state": self.rng_state,
            "meta": self.meta,
        }

    def compute_lineage(self) -> str:
        h = hashlib.sha256()
        head = self.header()
        head.pop("lineage_id")
        h.update(json.dumps(head, sort_keys=True).encode())
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(_to_numpy(self.tensors[name]).tobytes())
        return h.hexdigest()[:16]

    def seal(self) -> "Checkpoint":
        self.lineage_id = self.compute_lineage()
        return self

    def require_phase(self, phase: str):
        if self.phase != phase:
            raise LineageError(f"expected a {phase} checkpoint, got a {self.phase} checkpoint ({self.lineage_id})")


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = _to_numpy(ckpt.tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = ckpt.header()
    header["tensors"] = entries
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    blob = memoryview(data)[start + head_len :]
    tensors = {}
    for entry in header.pop("tensors"):
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        arr = np.frombuffer(blob[lo : lo + n], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(entry["dtype"]))
    header.pop("format_version")
    return Checkpoint(tensors=tensors, **header)
