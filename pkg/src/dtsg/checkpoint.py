"""Single-file checkpoint archive.

Layout: 8-byte magic, u64 header length, JSON header, raw little-endian
tensor payloads.  The header manifest records name, component tag, shape,
dtype, and byte offset for every tensor; optimizer slots are stored the
same way under reserved ``opt:`` names.  Exporting strips everything not
tagged ``backbone``; reloading restores bitwise-identical forward results.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DTSGCKPT"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    tags: dict[str, str]
    epoch: int = 0
    config_hash: str = ""
    rng_state: dict | None = None
    opt_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    opt_meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def tag_set(self) -> set[str]:
        return set(self.tags.values())

    def parameter_count(self) -> int:
        return sum(int(np.prod(a.shape)) for a in self.tensors.values())

    def filter_tags(self, keep: set[str]) -> "Checkpoint":
        tensors = {n: a for n, a in self.tensors.items()
                   if self.tags[n] in keep}
        tags = {n: self.tags[n] for n in tensors}
        return Checkpoint(tensors=tensors, tags=tags, epoch=self.epoch,
                          config_hash=self.config_hash,
                          rng_state=self.rng_state, extra=dict(self.extra))


def export_backbone(ckpt: Checkpoint) -> Checkpoint:
    """Strip every tensor the inference path does not own; optimizer state
    and rng state go with them."""
    out = ckpt.filter_tags({"backbone"})
    out.rng_state = None
    out.extra = dict(ckpt.extra)
    out.extra["exported"] = True
    return out


def _dtype_str(a: np.ndarray) -> str:
    return np.dtype(a.dtype).newbyteorder("<").str


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    entries = []
    payload = bytearray()
    offset = 0

    def append(name: str, tag: str, arr: np.ndarray):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "tag": tag, "shape": list(arr.shape),
                        "dtype": _dtype_str(arr), "offset": offset,
                        "nbytes": len(raw)})
        payload.extend(raw)
        offset += len(raw)

    for name in sorted(ckpt.tensors):
        append(name, ckpt.tags[name], ckpt.tensors[name])
    for name in sorted(ckpt.opt_tensors):
        append("opt:" + name, "optimizer", ckpt.opt_tensors[name])

    header = {
        "format": 1,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "opt_meta": ckpt.opt_meta,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    opt_tensors: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        raw = payload[ent["offset"]: ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]))
        arr = np.array(arr.reshape(ent["shape"]), copy=True)
        if ent["name"].startswith("opt:"):
            opt_tensors[ent["name"][4:]] = arr
        else:
            tensors[ent["name"]] = arr
            tags[ent["name"]] = ent["tag"]
    return Checkpoint(tensors=tensors, tags=tags, epoch=header["epoch"],
                      config_hash=header["config_hash"],
                      rng_state=header["rng_state"],
                      opt_tensors=opt_tensors,
                      opt_meta=header.get("opt_meta", {}),
                      extra=header.get("extra", {}))
