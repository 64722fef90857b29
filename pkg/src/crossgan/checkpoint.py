"""Self-describing, byte-reproducible checkpoint container.

Layout::

    b"CGCK" | u32 version | u64 header length | JSON header | tensor blobs

The JSON header (sorted keys, UTF-8) holds all metadata plus a table of
tensor names, dtypes, shapes and byte offsets into the blob section. Nested
structures such as optimizer state dicts are flattened into that table.
Nothing time- or host-dependent is written, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict

import numpy as np
import torch

from .errors import ConfigurationError

MAGIC = b"CGCK"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8",
    torch.int32: "<i4", torch.uint8: "|u1", torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def _flatten(obj, prefix: str, tensors: Dict[str, torch.Tensor]):
    if isinstance(obj, torch.Tensor):
        tensors[prefix] = obj.detach().cpu().contiguous()
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: _flatten(v, f"{prefix}/{k}", tensors) for k, v in obj.items()}
        return {"__items__": [[k, _flatten(v, f"{prefix}/{k}", tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_flatten(v, f"{prefix}/{i}", tensors) for i, v in enumerate(obj)]
    return obj


def _unflatten(obj, tensors: Dict[str, torch.Tensor]):
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            return tensors[obj["__tensor__"]]
        if set(obj) == {"__items__"}:
            return {k: _unflatten(v, tensors) for k, v in obj["__items__"]}
        return {k: _unflatten(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unflatten(v, tensors) for v in obj]
    return obj


def encode(payload: Dict[str, Any]) -> bytes:
    tensors: Dict[str, torch.Tensor] = {}
    tree = _flatten(payload, "", tensors)
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tree": tree, "tensors": table}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)


def decode(data: bytes) -> Dict[str, Any]:
    if data[:4] != MAGIC:
        raise ConfigurationError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=entry["dtype"], count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH[entry["dtype"]])
    return _unflatten(header["tree"], tensors)


def atomic_write(path, data: bytes):
    """Write via a sibling temp file; the temp file is removed if anything fails."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def save(path, payload: Dict[str, Any]):
    atomic_write(path, encode(payload))


def load(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
