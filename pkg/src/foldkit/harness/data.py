"""Synthetic classification data and the FDSTv1 on-disk dataset format."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from ..errors import ModelFormatError, ValidationError

DATASET_MAGIC = b"FDSTv1"


@dataclass
class Dataset:
    features: np.ndarray  # (count, *dims) float64
    labels: np.ndarray    # (count,) int64
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features and labels disagree on example count")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise ValidationError("labels out of range for class_count")

    @property
    def count(self):
        return self.features.shape[0]


@dataclass
class DataSplits:
    train: Dataset
    test: Dataset
    calib: Dataset
    centers: np.ndarray


def _draw(rng, centers, count, class_count):
    # balanced labels, shuffled
    labels = rng.permutation(np.arange(count) % class_count)
    noise = rng.standard_normal((count, centers.shape[1]))
    return Dataset(centers[labels] + noise, labels, class_count)


def make_synthetic_dataset(class_count=8, dim=16, train_count=4096,
                           test_count=1024, calib_count=512,
                           separation=4.0, seed=0) -> DataSplits:
    """Gaussian blobs around random directions on the sphere, scaled by
    `separation`, with unit isotropic noise. All three splits share the
    same class centers."""
    if class_count < 2 or dim < 1:
        raise ValidationError("need class_count >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((class_count, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    train = _draw(rng, centers, train_count, class_count)
    test = _draw(rng, centers, test_count, class_count)
    calib = _draw(rng, centers, calib_count, class_count)
    return DataSplits(train=train, test=test, calib=calib, centers=centers)


def dataset_to_bytes(ds: Dataset) -> bytes:
    if ds.class_count > 0xFFFF:
        raise ValidationError("FDSTv1 stores labels as uint16")
    dims = ds.features.shape[1:]
    head = [DATASET_MAGIC,
            struct.pack("<I", ds.count),
            struct.pack("<I", len(dims)),
            struct.pack(f"<{len(dims)}I", *dims) if dims else b"",
            struct.pack("<I", ds.class_count)]
    feats = np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(ds.labels, dtype="<u2").tobytes()
    return b"".join(head) + feats + labels


def dataset_from_bytes(blob: bytes) -> Dataset:
    if blob[:6] != DATASET_MAGIC:
        raise ModelFormatError("not an FDSTv1 dataset")
    off = 6

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ModelFormatError("truncated FDSTv1 header")
        out = struct.unpack_from(fmt, blob, off)
        off += size
        return out

    (count,) = take("<I")
    (ndim,) = take("<I")
    dims = take(f"<{ndim}I") if ndim else ()
    (class_count,) = take("<I")
    per = int(np.prod(dims)) if dims else 1
    feat_bytes = count * per * 4
    need = off + feat_bytes + count * 2
    if len(blob) < need:
        raise ModelFormatError(f"truncated FDSTv1 payload: expected {need} bytes, "
                               f"got {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f4", count=count * per, offset=off)
    feats = feats.reshape((count,) + tuple(dims)).astype(np.float64)
    labels = np.frombuffer(blob, dtype="<u2", count=count,
                           offset=off + feat_bytes).astype(np.int64)
    return Dataset(feats, labels, class_count)


def _atomic_write(path, blob):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, path):
    _atomic_write(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def write_logits(path, logits):
    """Raw logits dump: two LE uint32 (batch, classes), then float32
    row-major values."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValidationError("logits must be 2-d (batch, classes)")
    blob = struct.pack("<II", *logits.shape)
    blob += np.ascontiguousarray(logits, dtype="<f4").tobytes()
    _atomic_write(path, blob)


def read_logits(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ModelFormatError("truncated logits header")
    batch, classes = struct.unpack_from("<II", blob, 0)
    need = 8 + batch * classes * 4
    if len(blob) < need:
        raise ModelFormatError(f"truncated logits payload: expected {need} bytes, "
                               f"got {len(blob)}")
    vals = np.frombuffer(blob, dtype="<f4", count=batch * classes, offset=8)
    return vals.reshape(batch, classes).astype(np.float64)


def save_json(path, payload):
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True).encode()
                  + b"\n")
