"""Checkpoint directories: one little-endian binary file per tensor plus a JSON metadata file.

Tensor file layout: u32 rank, rank x u32 dims, then the values in row-major
order, little-endian, in the element width recorded in the metadata (float32
unless stated otherwise).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

META_FILE = "meta.json"
PARAM_DIR = "params"


def write_tensor(path, array):
    array = np.asarray(array).copy(order="C")
    header = np.array([array.ndim, *array.shape], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path, dtype=np.float32):
    raw = Path(path).read_bytes()
    rank = int(np.frombuffer(raw, dtype="<u4", count=1)[0])
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=rank, offset=4))
    offset = 4 * (rank + 1)
    dt = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(dims)) if dims else 1
    expected = offset + count * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape {dims}, found {len(raw)}")
    values = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    return values.reshape(dims).astype(np.dtype(dtype), copy=True)


def config_hash(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(directory, arrays, groups, step=0, config=None, extra=None):
    """Write ``arrays`` (name -> ndarray) with group membership and metadata."""
    directory = Path(directory)
    (directory / PARAM_DIR).mkdir(parents=True, exist_ok=True)
    dtypes = {}
    for name, arr in arrays.items():
        write_tensor(directory / PARAM_DIR / f"{name}.bin", arr)
        dtypes[name] = np.dtype(arr.dtype).name
    meta = {
        "step": int(step),
        "groups": {name: groups[name] for name in arrays},
        "dtypes": dtypes,
        "config_hash": config_hash(config) if config is not None else None,
        "config": config,
    }
    if extra:
        meta.update(extra)
    tmp = directory / (META_FILE + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
    os.replace(tmp, directory / META_FILE)
    return directory


def load_checkpoint(directory):
    """Return (arrays, meta) from a checkpoint directory."""
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    arrays = {}
    for name, dtype in meta["dtypes"].items():
        arrays[name] = read_tensor(directory / PARAM_DIR / f"{name}.bin", dtype=dtype)
    return arrays, meta
