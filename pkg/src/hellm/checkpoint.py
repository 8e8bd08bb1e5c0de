"""Bit-exact binary checkpoints for named parameter collections.

Layout: 4-byte magic ``HLM1``, a 4-byte little-endian metadata length,
UTF-8 JSON metadata with sorted keys (embedded config plus a tensor
manifest of name/shape/offset), then raw little-endian 32-bit floats
with tensors concatenated in lexicographic name order. Writing the same
parameters and config twice produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MAGIC = b"HLM1"
_LEN = struct.Struct("<I")


def save_checkpoint(path, params: dict[str, Tensor], config: dict) -> None:
    """Write params and a JSON-serializable config dict to one file.

    The write goes through a temporary sibling and an atomic rename so
    a failure never leaves a partial checkpoint behind.
    """
    path = Path(path)
    names = sorted(params)
    manifest = []
    chunks = []
    offset = 0
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    meta = json.dumps(
        {"config": config, "tensors": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_LEN.pack(len(meta)))
            fh.write(meta)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"checkpoint write failed for {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint back into float32 trainable tensors plus the
    stored config dict."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise DataError(f"{path} is not a checkpoint: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise DataError(f"checkpoint {path} is truncated")
    (meta_len,) = _LEN.unpack(raw[4:8])
    meta_end = 8 + meta_len
    if len(raw) < meta_end:
        raise DataError(f"checkpoint {path} is truncated inside metadata")
    try:
        meta = json.loads(raw[8:meta_end].decode("utf-8"))
        manifest = meta["tensors"]
        config = meta["config"]
    except (ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path} has malformed metadata: {exc}") from exc

    block = raw[meta_end:]
    params: dict[str, Tensor] = {}
    for entry in manifest:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(block):
            raise DataError(
                f"checkpoint {path} is truncated: tensor {name} needs bytes "
                f"up to {end}, data block has {len(block)}"
            )
        arr = np.frombuffer(block, dtype="<f4", count=count, offset=offset)
        data = arr.reshape(shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params, config
