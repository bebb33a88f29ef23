"""Binary checkpoint files.

Layout (little-endian)::

    b"DSTK"  version:u16  meta_len:u32  meta:utf-8 JSON (sorted keys)
    count:u32
    count x tensor: name_len:u16 name:utf-8 ndim:u8 shape:u32[ndim] data:f64[prod(shape)]

Tensors are written in a fixed order (model parameters in declaration order,
then any optimizer moments) so identical state gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dsta.model import ModelDims, ModelParams

MAGIC = b"DSTK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    params: ModelParams
    metrics: dict = field(default_factory=dict)
    # everything needed to resume: optimizer moments, scheduler, step count
    state: dict = field(default_factory=dict)
    extra_tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def ap(self) -> float:
        return self.metrics["AP"]

    @property
    def mtta(self) -> float:
        return self.metrics["mTTA"]


def dumps(ckpt: Checkpoint) -> bytes:
    meta = {
        "dims": ckpt.params.dims.to_dict(),
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "state": ckpt.state,
    }
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = list(ckpt.params.arrays().items()) + list(ckpt.extra_tensors.items())
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Checkpoint:
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, meta_len = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            n_name, ndim = struct.unpack_from("<HB", buf, pos)
            pos += 3
            name = buf[pos : pos + n_name].decode("utf-8")
            pos += n_name
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"tensor {name!r} is truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    dims = ModelDims(**meta["dims"])
    names = dims.param_shapes()
    params = ModelParams.from_arrays(dims, {k: arrays.pop(k) for k in names if k in arrays})
    return Checkpoint(
        epoch=meta["epoch"],
        params=params,
        metrics=meta.get("metrics", {}),
        state=meta.get("state", {}),
        extra_tensors=arrays,
    )


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
