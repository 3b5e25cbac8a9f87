"""Checkpoint container: named little-endian tensors plus a JSON metadata record.

Layout::

    offset 0   8 bytes   magic b"SNNRGCK1"
    offset 8   8 bytes   uint64 LE, length H of the JSON index
    offset 16  H bytes   UTF-8 JSON: {"metadata": {...}, "tensors": [
                             {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    offset 16+H          tensor payloads, C order, little-endian; "offset" is
                         relative to the start of this payload region

Tensors are written in sorted name order so identical networks produce
identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..unet import Network, NetworkSpec, build

MAGIC = b"SNNRGCK1"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"))
        blob = le.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>=|"), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({"metadata": metadata, "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    head = json.loads(raw[16:16 + hlen].decode())
    base = 16 + hlen
    out = {}
    for t in head["tensors"]:
        dt = np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiu" else np.dtype(t["dtype"])
        start = base + t["offset"]
        if start + t["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: tensor {t['name']} truncated")
        arr = np.frombuffer(raw, dtype=dt, count=t["nbytes"] // dt.itemsize, offset=start)
        out[t["name"]] = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
    return out, head["metadata"]


def save_network(path, net: Network, phase: str, seed: int, extra: dict | None = None) -> None:
    meta = {
        "phase": phase,
        "seed": seed,
        "flavor": net.flavor,
        "spec": net.spec.to_dict(),
        "spec_hash": net.spec.architecture_hash(),
        "dtype": net.dtype.name,
        "bn_frozen": all(bn.frozen for bn in net.bns.values()),
    }
    meta.update(extra or {})
    save_tensors(path, net.state_dict(), meta)


def load_network(path, spec: NetworkSpec | None = None) -> tuple[Network, dict]:
    tensors, meta = load_tensors(path)
    stored = NetworkSpec(**meta["spec"])
    if spec is not None and spec.architecture_hash() != meta["spec_hash"]:
        raise CheckpointError(f"{path}: spec hash {meta['spec_hash']} does not match {spec.architecture_hash()}")
    if stored.architecture_hash() != meta["spec_hash"]:
        raise CheckpointError(f"{path}: stored spec does not match its hash")
    net = build(spec or stored, meta["flavor"], dtype=meta.get("dtype"))
    net.load_state_dict(tensors)
    for bn in net.bns.values():
        bn.frozen = bool(meta.get("bn_frozen", False))
    return net, meta
