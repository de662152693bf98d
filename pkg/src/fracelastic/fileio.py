"""On-disk formats: raw float64 arrays with JSON sidecars, CSV tables, manifests.

Every write goes to a temporary file in the target directory and is
renamed into place, so a crash never leaves a half-written output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> bytes:
    """Key-sorted compact JSON, used for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    return atomic_write_bytes(path, text.encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_array(path, arr, meta: dict | None = None) -> list[Path]:
    """Raw little-endian float64, row-major, plus ``<path>.json``.

    The sidecar records ``shape``, ``dtype``, ``rank`` (trailing
    component axes beyond the grid axes, if ``meta`` carries a grid) and
    whatever else ``meta`` holds.
    """
    a = np.ascontiguousarray(arr, dtype="<f8")
    side = {"shape": list(a.shape), "dtype": "<f8", "order": "C"}
    meta = dict(meta or {})
    grid = meta.get("grid")
    if grid is not None:
        side["rank"] = a.ndim - int(grid["dimension"])
    side.update(meta)
    return [atomic_write_bytes(path, a.tobytes()), write_json(sidecar_path(path), side)]


def read_array(path) -> tuple[np.ndarray, dict]:
    side = read_json(sidecar_path(path))
    data = np.fromfile(path, dtype=side.get("dtype", "<f8"))
    return data.reshape(side["shape"]), side


def write_csv(path, header: list[str], rows, meta: dict | None = None) -> list[Path]:
    """CSV table (``repr``-exact floats) plus a JSON sidecar naming the columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    side = {"columns": list(header), "rows": len(buf.getvalue().splitlines()) - 1}
    side.update(meta or {})
    return [atomic_write_bytes(path, buf.getvalue().encode()), write_json(sidecar_path(path), side)]


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
