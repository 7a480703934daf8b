"""Deterministic single-file array container.

np.savez wraps a zip archive whose entries carry timestamps, so two saves of
identical data differ at the byte level. Pipeline artifacts must be
byte-identical for identical inputs, hence this trivial format: a magic line,
a sorted-key JSON header describing the arrays plus free-form metadata, then
the raw C-order array bytes back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"FORGEBIN1\n"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "arrays": [
            {
                "name": name,
                "dtype": np.asarray(arr).dtype.str,
                "shape": list(np.asarray(arr).shape),
            }
            for name, arr in sorted(arrays.items())
        ],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name, _ in sorted(arrays.items()):
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataError(f"{path}: not a FORGEBIN1 array file")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt header: {exc}") from exc
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            nbytes = int(dtype.itemsize * np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError(f"{path}: truncated array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})
