"""HZGW parameter checkpoints.

Layout (little-endian): magic ``HZGW``, u32 format version, u32 header length,
a JSON header holding the layer table, array directory and metadata, then
every array as contiguous float64 in directory order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import layer_from_config
from .network import Network

MAGIC = b"HZGW"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_network(net: Network, path: str | Path) -> None:
    directory = []
    blobs = []
    for k, (p, s) in enumerate(zip(net.params, net.state)):
        for group, arrays in (("param", p), ("state", s)):
            for name, a in arrays.items():
                directory.append({"layer": k, "group": group, "name": name, "shape": list(a.shape)})
                blobs.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    header = json.dumps(
        {"layers": [l.config() for l in net.layers], "arrays": directory, "meta": net.meta},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_network(path: str | Path) -> Network:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _PREFIX.size
    header = json.loads(raw[off : off + hlen])
    off += hlen
    layers = [layer_from_config(c) for c in header["layers"]]
    params = [{} for _ in layers]
    state = [{} for _ in layers]
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated array {entry['name']!r} of layer {entry['layer']}")
        a = np.frombuffer(raw, "<f8", count, off).reshape(entry["shape"]).copy()
        off += 8 * count
        (params if entry["group"] == "param" else state)[entry["layer"]][entry["name"]] = a
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Network(layers, params, state, header.get("meta", {}))
