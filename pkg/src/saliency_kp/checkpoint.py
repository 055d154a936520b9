"""Versioned weight container shared by all model checkpoints.

Layout: an uncompressed NumPy ``.npz`` archive holding

* ``__format__``  - int64 scalar, container version (currently 1)
* ``__kind__``    - unicode scalar naming the model kind
* ``__meta__``    - unicode scalar with a JSON object of scalar settings
* one float64 C-ordered array per named parameter, shape preserved

Arrays are stored as raw IEEE-754 doubles, so save -> load is bit-exact.
Zip entries carry a fixed timestamp, so equal weights give equal files.
Loading never unpickles objects.
"""
from __future__ import annotations

import json
import os
import zipfile

import numpy as np

from .errors import IOFailure, MalformedFile

FORMAT_VERSION = 1
_RESERVED = ("__format__", "__kind__", "__meta__")
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    payload = {name: np.ascontiguousarray(v, dtype=np.float64) for name, v in arrays.items()}
    payload["__format__"] = np.int64(FORMAT_VERSION)
    payload["__kind__"] = np.str_(kind)
    payload["__meta__"] = np.str_(json.dumps(meta or {}, sort_keys=True))
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(payload[name]), allow_pickle=False)


def load(path, kind: str | None = None):
    """Return (arrays, meta) from a checkpoint, checking version and kind."""
    if not os.path.exists(path):
        raise IOFailure(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            version = int(z["__format__"])
            found_kind = str(z["__kind__"])
            meta = json.loads(str(z["__meta__"]))
            arrays = {n: z[n].copy() for n in z.files if n not in _RESERVED}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise MalformedFile(f"unreadable checkpoint {path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise MalformedFile(f"{path}: unsupported checkpoint version {version}")
    if kind is not None and found_kind != kind:
        raise MalformedFile(f"{path}: expected a {kind!r} checkpoint, found {found_kind!r}")
    return arrays, meta
