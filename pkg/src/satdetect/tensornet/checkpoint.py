"""Versioned binary checkpoints.

Layout: 8-byte magic, 4-byte little-endian header length, JSON header
(network structure, array manifest, training metadata), then the raw
little-endian bytes of every parameter array in manifest order. Loading
rebuilds a network whose outputs match the saved one bit for bit at the
same precision.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..geo import ValidationError
from .layers import layer_from_spec
from .network import Network

MAGIC = b"TNETCKPT"
FORMAT_VERSION = 1


def save_checkpoint(net: Network, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    params = net.parameters()
    manifest = []
    blobs = []
    for name, arr in params:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(le.tobytes(order="C"))
    header = {
        "format_version": FORMAT_VERSION,
        "network": net.spec(),
        "arrays": manifest,
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path.name}: not a checkpoint (bad magic)")
    (head_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ValidationError(f"{path.name}: corrupt header: {err}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"{path.name}: unsupported format version {header.get('format_version')}"
        )
    netspec = header["network"]
    layers = [
        layer_from_spec(item["kind"], item.get("spec", {}))
        for item in netspec["layers"]
    ]
    net = Network(
        layers,
        input_shape=tuple(netspec["input_shape"]),
        dtype=np.dtype(netspec["dtype"]),
        seed=netspec["seed"],
    )
    offset = start + head_len
    for item in header["arrays"]:
        dt = np.dtype(item["dtype"])
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise ValidationError(f"{path.name}: truncated array data for {item['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(item["shape"])
        net.set_parameter(item["name"], arr.copy())
        offset += nbytes
    if offset != len(raw):
        raise ValidationError(f"{path.name}: {len(raw) - offset} trailing bytes")
    net.version = 0
    return net, header["meta"]
