"""Binary tensor serialization.

File layout, in order:

1. uint64 little-endian: byte length of the JSON header that follows
2. UTF-8 JSON header: a list of records, one per tensor, in write order:
   {"name": str, "shape": [int, ...], "dtype": "f32"|"f64", "byte_offset": int}
   where byte_offset is relative to the start of the payload region
3. payload: the raw little-endian tensor bytes, concatenated in record order

Round-trips are bit-exact: load(save(params)) reproduces every byte.
"""

import json
import struct

import numpy as np

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Raised on malformed checkpoint files."""


def save_tensors(path, named_arrays):
    """Write `named_arrays` (iterable of (name, np.ndarray)) to `path`."""
    records = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        tag = _DTYPE_TO_TAG.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
        records.append({"name": name, "shape": list(arr.shape),
                        "dtype": tag, "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(records).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path):
    """Read a tensor file; returns a dict name -> np.ndarray preserving order."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        records = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: bad header: {err}") from err
    payload = raw[8 + header_len:]
    out = {}
    for rec in records:
        name, shape, tag = rec["name"], tuple(rec["shape"]), rec["dtype"]
        dtype = _TAG_TO_DTYPE.get(tag)
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        lo = rec["byte_offset"]
        if lo + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} extends past end of payload")
        out[name] = np.frombuffer(payload[lo:lo + nbytes], dtype=dtype).reshape(shape).copy()
    return out
