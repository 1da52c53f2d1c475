"""Versioned binary model container.

Layout (all integers little-endian)::

    8 bytes   magic b"FLOWGRD\\0"
    u16       format version (1)
    u32       header length N
    N bytes   UTF-8 JSON header: kind, feature_names, hyperparams, meta, and
              an "arrays" list of {name, dtype, shape} in blob order
    ...       array blobs, C order, dtype "<f8" or "<i8", back to back
    u32       CRC-32 of every preceding byte

The standardizer travels as the arrays ``standardizer/mean`` and
``standardizer/std``; model parameters follow in name order.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from ..dataset import Standardizer
from .base import ModelKind, TrainedModel

MAGIC = b"FLOWGRD\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _array_entry(name: str, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub":
        out = np.ascontiguousarray(arr, dtype="<i8")
    else:
        out = np.ascontiguousarray(arr, dtype="<f8")
    return {"name": name, "dtype": out.dtype.str, "shape": list(out.shape)}, out.tobytes()


def dumps(model: TrainedModel) -> bytes:
    arrays = [("standardizer/mean", model.standardizer.mean), ("standardizer/std", model.standardizer.std)]
    arrays += sorted(model.params.items())
    entries, blobs = zip(*(_array_entry(n, a) for n, a in arrays))
    header = {
        "kind": model.kind.value,
        "feature_names": list(model.feature_names),
        "hyperparams": model.hyperparams,
        "meta": model.meta,
        "arrays": list(entries),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> TrainedModel:
    if len(data) < len(MAGIC) + 10 or data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError("model file checksum mismatch")
    version, hlen = struct.unpack_from("<HI", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = len(MAGIC) + 6
    header = json.loads(data[off : off + hlen])
    off += hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += count * dt.itemsize
    if off != len(data) - 4:
        raise ModelFormatError("model file has trailing or missing bytes")
    scaler = Standardizer(arrays.pop("standardizer/mean"), arrays.pop("standardizer/std"))
    return TrainedModel(
        ModelKind(header["kind"]),
        tuple(header["feature_names"]),
        scaler,
        arrays,
        header["hyperparams"],
        header["meta"],
    )


def save_model(model: TrainedModel, path: str | os.PathLike) -> int:
    blob = dumps(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_model(path: str | os.PathLike) -> TrainedModel:
    with open(path, "rb") as fh:
        return loads(fh.read())
