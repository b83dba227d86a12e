"""Model file format.

Layout: 4-byte magic, little-endian uint32 version, uint32 header length,
a JSON header (symbol vocabulary, model dimensions, storage dtype, tensor
names and shapes in order), then the raw tensor bytes back to back.
Tensors are always stored little-endian; the header's dtype string is an
explicit numpy typestr, so a file quantized to half precision has the
reduction visible right in the header.

Quantization here is storage-side: weights are rounded to float16 on
disk and widened back to float32 at load.  For a model this size the
rounding moves almost no predictions, which the regression tests check.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from typing import Optional

import numpy as np

from pocketnlu.parser.network import ModelConfig, ParserNetwork

MAGIC = b"PNLU"
VERSION = 1

_STORE = {"float16": "<f2", "float32": "<f4", "float64": "<f8"}
_COMPUTE = {"<f2": np.float32, "<f4": np.float32, "<f8": np.float64}


def save_model(path: str, net: ParserNetwork, dtype: Optional[str] = None) -> int:
    """Write the network to ``path``; returns bytes written.

    ``dtype`` names the storage precision ("float16"/"float32"/"float64"),
    defaulting to the network's own.
    """
    store = _STORE.get(dtype or net.dtype.name)
    if store is None:
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    tensors = []
    blobs = []
    for name, arr in net.state_dict().items():
        a = np.ascontiguousarray(arr.astype(store))
        tensors.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({
        "symbols": net.symbols,
        "config": asdict(net.config),
        "dtype": store,
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        written = f.write(MAGIC)
        written += f.write(struct.pack("<II", VERSION, len(header)))
        written += f.write(header)
        for blob in blobs:
            written += f.write(blob)
    return written


def load_model(path: str) -> ParserNetwork:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a model file (bad magic)")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"model format version {version} is not supported")
    header = json.loads(data[12:12 + header_len].decode("utf-8"))
    store = np.dtype(header["dtype"])
    net = ParserNetwork(header["symbols"], ModelConfig(**header["config"]),
                        dtype=_COMPUTE[header["dtype"]])
    offset = 12 + header_len
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=store, count=count, offset=offset)
        state[entry["name"]] = arr.reshape(shape)
        offset += count * store.itemsize
    if offset != len(data):
        raise ValueError(f"{path} has {len(data) - offset} trailing bytes")
    net.load_state_dict(state)
    return net


def quantize(src: str, dst: str) -> tuple[int, int]:
    """Rewrite a model file with float16 weights.

    Returns (source bytes, quantized bytes).  Idempotent: quantizing an
    already-half-precision file reproduces it.
    """
    import os

    net = load_model(src)
    save_model(dst, net, dtype="float16")
    return os.path.getsize(src), os.path.getsize(dst)
