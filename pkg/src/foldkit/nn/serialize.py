"""FNETv1 model files: a one-line JSON manifest, a newline, then a float32 blob.

The manifest lists blocks in order with their kind, hyperparameters, and for
each tensor its name, shape, byte offset and byte length within the blob.
Tensors are little-endian IEEE-754 float32 in manifest order. Round-trips of
a loaded file are byte-identical.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from ..errors import ModelFormatError
from .blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten, Network,
                     ReLU, ResidualBlock)

MAGIC = "FNETv1"


def _encode_block(block, blob_parts, offset):
    def add_tensor(name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        rec = {"name": name, "shape": list(arr.shape), "offset": offset, "length": len(data)}
        blob_parts.append(data)
        offset += len(data)
        return rec

    d = {"kind": block.kind}
    if isinstance(block, Dense):
        d["tensors"] = [add_tensor("weight", block.weight), add_tensor("bias", block.bias)]
    elif isinstance(block, Conv2D):
        d["stride"] = int(block.stride)
        d["padding"] = int(block.padding)
        d["tensors"] = [add_tensor("weight", block.weight), add_tensor("bias", block.bias)]
    elif isinstance(block, BatchNorm):
        d["epsilon"] = float(block.epsilon)
        d["tensors"] = [add_tensor(n, getattr(block, n))
                        for n in ("gamma", "beta", "running_mean", "running_var")]
    elif isinstance(block, AvgPool):
        d["size"] = int(block.size)
        d["stride"] = int(block.stride)
    elif isinstance(block, ResidualBlock):
        main, shortcut = [], []
        for b in block.main:
            sub, offset = _encode_block(b, blob_parts, offset)
            main.append(sub)
        for b in block.shortcut:
            sub, offset = _encode_block(b, blob_parts, offset)
            shortcut.append(sub)
        d["main"] = main
        d["shortcut"] = shortcut
    elif isinstance(block, (ReLU, Flatten)):
        pass
    else:
        raise ModelFormatError(f"cannot serialize block type {type(block)!r}")
    return d, offset


def network_to_bytes(net: Network) -> bytes:
    blob_parts = []
    offset = 0
    blocks = []
    for b in net.blocks:
        d, offset = _encode_block(b, blob_parts, offset)
        blocks.append(d)
    manifest = {
        "magic": MAGIC,
        "format_version": 1,
        "input_shape": list(net.input_shape),
        "class_count": int(net.class_count),
        "blocks": blocks,
    }
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return header + b"\n" + b"".join(blob_parts)


def _read_tensor(blob, rec, what):
    off, length = rec["offset"], rec["length"]
    if off + length > len(blob):
        raise ModelFormatError(
            f"truncated blob reading {what}/{rec['name']}: expected {off + length} bytes, got {len(blob)}")
    expect = int(np.prod(rec["shape"], dtype=np.int64)) * 4
    if length != expect:
        raise ModelFormatError(
            f"tensor {what}/{rec['name']}: shape {rec['shape']} implies {expect} bytes, manifest says {length}")
    arr = np.frombuffer(blob[off:off + length], dtype="<f4").reshape(rec["shape"])
    return arr.astype(np.float64)


def _decode_block(d, blob):
    kind = d.get("kind")
    if kind == "Dense":
        w, b = (_read_tensor(blob, r, kind) for r in d["tensors"])
        return Dense(weight=w, bias=b)
    if kind == "Conv2D":
        w, b = (_read_tensor(blob, r, kind) for r in d["tensors"])
        return Conv2D(weight=w, bias=b, stride=int(d["stride"]), padding=int(d["padding"]))
    if kind == "BatchNorm":
        g, be, rm, rv = (_read_tensor(blob, r, kind) for r in d["tensors"])
        return BatchNorm(gamma=g, beta=be, running_mean=rm, running_var=rv,
                         epsilon=float(d["epsilon"]))
    if kind == "ReLU":
        return ReLU()
    if kind == "AvgPool":
        return AvgPool(size=int(d["size"]), stride=int(d["stride"]))
    if kind == "Flatten":
        return Flatten()
    if kind == "ResidualBlock":
        return ResidualBlock(main=[_decode_block(m, blob) for m in d.get("main", [])],
                             shortcut=[_decode_block(s, blob) for s in d.get("shortcut", [])])
    raise ModelFormatError(f"unknown block kind {kind!r}")


def network_from_bytes(data: bytes) -> Network:
    nl = data.find(b"\n")
    if nl < 0:
        raise ModelFormatError("no manifest line found")
    try:
        manifest = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("magic") != MAGIC:
        raise ModelFormatError(f"bad magic: expected {MAGIC!r}, got {manifest.get('magic')!r}")
    if manifest.get("format_version") != 1:
        raise ModelFormatError(f"unsupported format version {manifest.get('format_version')!r}")
    blob = data[nl + 1:]
    blocks = [_decode_block(d, blob) for d in manifest["blocks"]]
    return Network(blocks=blocks, input_shape=tuple(manifest["input_shape"]),
                   class_count=int(manifest["class_count"]))


def save_network(net: Network, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = network_to_bytes(net)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".fnet-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())
