"""Model checkpoint file format.

Layout, all little-endian: magic ``MILC`` (4 bytes), version u16 = 1,
header length u32, JSON header of exactly that many bytes, then every
parameter tensor as float32 in milnet.TENSOR_FIELDS order. The JSON header
carries the architecture, the hyperparameters, the epoch, and the
validation metrics current when the checkpoint was written. The JSON is
serialized with sorted keys and no whitespace so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .milnet import TENSOR_FIELDS, ArchConfig, MilParams
from .optim import Hyperparams

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = b"MILC"
VERSION = 1
PREFIX = struct.Struct("<4sHI")


def save_checkpoint(path, params: MilParams, arch: ArchConfig, hyperparams: Hyperparams,
                    epoch: int, metrics: dict) -> None:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    metrics = {str(k): float(v) for k, v in metrics.items()}
    header = {
        "arch": arch.to_dict(),
        "hyperparams": hyperparams.to_dict(),
        "epoch": int(epoch),
        "metrics": metrics,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PREFIX.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for name in TENSOR_FIELDS:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, arch, hyperparams, epoch, metrics).

    Tensors come back as float64 upcast from the stored float32.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < PREFIX.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, header_len = PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if len(blob) < PREFIX.size + header_len:
        raise ValueError(f"{path}: truncated JSON header")
    try:
        header = json.loads(blob[PREFIX.size : PREFIX.size + header_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt JSON header: {exc}") from exc
    for key in ("arch", "hyperparams", "epoch", "metrics"):
        if key not in header:
            raise ValueError(f"{path}: header missing key {key!r}")
    arch = ArchConfig.from_dict(header["arch"])
    hyperparams = Hyperparams.from_dict(header["hyperparams"])
    shapes = {name: arr.shape for name, arr in MilParams.zeros(arch).tensors().items()}
    offset = PREFIX.size + header_len
    tensors = {}
    for name in TENSOR_FIELDS:
        count = int(np.prod(shapes[name]))
        end = offset + count * 4
        if end > len(blob):
            raise ValueError(f"{path}: truncated tensor data at {name!r}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shapes[name]).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after tensors")
    params = MilParams(**tensors)
    return params, arch, hyperparams, int(header["epoch"]), dict(header["metrics"])
