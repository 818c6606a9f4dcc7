"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"IAUNETCK"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length L
    offset 20  L bytes   UTF-8 JSON header
    offset 20+L          data section: raw C-order little-endian tensor bytes

Header keys: ``format_version``, ``model_config`` (ModelConfig fields),
``dtype``, ``meta`` (free-form JSON, e.g. trainer step) and ``tensors``: a
list of ``{"name", "dtype", "shape", "offset", "nbytes", "crc32"}`` with
offsets relative to the data section. Model tensors use their parameter or
buffer path (``encoder.stage2.conv1.conv.weight``); optimizer state is stored
under ``optim.v.<path>`` / ``optim.m.<path>``.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import IAUNet, ModelConfig

MAGIC = b"IAUNETCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def write_container(path, arrays, model_config, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    dtype = None
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        if dtype is None and a.dtype.kind == "f":
            dtype = a.dtype.name
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "model_config": model_config,
                         "dtype": dtype, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_container(path):
    """Return ``(header, arrays)``; verifies magic, version, sizes and checksums."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an IAU-Net checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    data = memoryview(blob)[_PREFIX.size + hlen:]
    arrays = {}
    for e in header["tensors"]:
        start, n = e["offset"], e["nbytes"]
        raw = bytes(data[start:start + n])
        if len(raw) != n or zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: tensor {e['name']!r} is truncated or corrupt")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def save_checkpoint(model, path, extra=None, meta=None):
    arrays = dict(model.state_dict())
    if extra:
        arrays.update(extra)
    write_container(path, arrays, model.config.to_dict(), meta)


def load_into(model, arrays, source="checkpoint"):
    """Copy matching tensors into ``model``; the first missing/mismatched name is an error."""
    for name, current in model.state_dict().items():
        if name not in arrays:
            raise CheckpointError(f"{source}: missing tensor {name!r}")
        if arrays[name].shape != current.shape:
            raise CheckpointError(
                f"{source}: tensor {name!r} has shape {arrays[name].shape}, "
                f"model expects {current.shape}")
    model.load_arrays(arrays)
    return model


def load_checkpoint(path, model=None):
    """Rebuild (or fill ``model``) from a checkpoint; returns ``(model, header, arrays)``."""
    header, arrays = read_container(path)
    if model is None:
        model = IAUNet(ModelConfig(**header["model_config"]), dtype=np.dtype(header["dtype"]))
    load_into(model, arrays, source=str(path))
    return model, header, arrays
