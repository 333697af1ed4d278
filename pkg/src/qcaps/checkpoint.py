"""Self-contained binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"QCN1"
    u32     format version (currently 1)
    u32     json header length, then that many UTF-8 bytes
    u32     array count
    per array:
        u16  name length, then the UTF-8 name
        u8   dtype code (0 = float32, 1 = float64, 2 = int64)
        u8   ndim
        u32  extent per dimension
        raw  little-endian payload

The JSON header carries the training position (global step, epoch, step
within the epoch), the effective config echo, per-channel normalization
constants, and the code version. Arrays store model parameters
("param.<name>"), persistent state ("state.<name>"), and optimizer
moments ("adam.m.<name>" / "adam.v.<name>"). Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"QCN1"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class BadCheckpoint(ValueError):
    pass


class CheckpointMismatch(ValueError):
    """Stored parameter names or shapes disagree with the model."""


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict

    @property
    def global_step(self):
        return self.meta["global_step"]


def save_checkpoint(path, meta, arrays):
    blobs = [MAGIC, struct.pack("<I", VERSION)]
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs.append(struct.pack("<I", len(header)))
    blobs.append(header)
    blobs.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype not in _CODES:
            raise BadCheckpoint(f"{name}: unsupported dtype {arr.dtype}")
        nm = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(nm)))
        blobs.append(nm)
        blobs.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BadCheckpoint(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<I", data[8:12])
    offset = 12
    meta = json.loads(data[offset : offset + hlen].decode("utf-8"))
    offset += hlen
    (count,) = struct.unpack("<I", data[offset : offset + 4])
    offset += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", data[offset : offset + 2])
        offset += 2
        name = data[offset : offset + nlen].decode("utf-8")
        offset += nlen
        code, ndim = struct.unpack("<BB", data[offset : offset + 2])
        offset += 2
        shape = struct.unpack(f"<{ndim}I", data[offset : offset + 4 * ndim])
        offset += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(data[offset : offset + nbytes], dtype=dtype).reshape(shape)
        offset += nbytes
        arrays[name] = arr.copy()
    return Checkpoint(meta=meta, arrays=arrays)


def model_arrays(model, optimizer=None):
    """Flatten a model (and optionally optimizer moments) for storage."""
    arrays = {}
    for name, p in model.registry.params.items():
        arrays[f"param.{name}"] = p.value
    for name, buf in model.registry.state.items():
        arrays[f"state.{name}"] = buf
    if optimizer is not None:
        for name, m in optimizer.m.items():
            arrays[f"adam.m.{name}"] = m
        for name, v in optimizer.v.items():
            arrays[f"adam.v.{name}"] = v
    return arrays


def restore_model(model, checkpoint, optimizer=None):
    """Load stored arrays into the model in place, validating the census."""
    stored_params = {
        k[len("param."):] for k in checkpoint.arrays if k.startswith("param.")
    }
    expected = set(model.registry.params)
    if stored_params != expected:
        missing = expected - stored_params
        extra = stored_params - expected
        raise CheckpointMismatch(
            f"parameter names disagree (missing {sorted(missing)[:4]}, "
            f"unexpected {sorted(extra)[:4]})"
        )
    for name, p in model.registry.params.items():
        arr = checkpoint.arrays[f"param.{name}"]
        if arr.shape != p.value.shape:
            raise CheckpointMismatch(
                f"{name}: stored shape {arr.shape} vs model {p.value.shape}"
            )
        p.value[...] = arr.astype(p.value.dtype)
    for name, buf in model.registry.state.items():
        key = f"state.{name}"
        if key not in checkpoint.arrays:
            raise CheckpointMismatch(f"missing state array {key}")
        buf[...] = checkpoint.arrays[key].astype(buf.dtype)
    if optimizer is not None:
        for name, p in model.registry.params.items():
            mk, vk = f"adam.m.{name}", f"adam.v.{name}"
            if mk in checkpoint.arrays:
                optimizer.m[name] = checkpoint.arrays[mk].astype(p.value.dtype).copy()
                optimizer.v[name] = checkpoint.arrays[vk].astype(p.value.dtype).copy()
        optimizer.t = int(checkpoint.meta.get("adam_t", checkpoint.meta["global_step"]))
