"""Report and grid serialization.  Every file is written atomically."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .beltrami import ComplexGrid

GRID_MAGIC = b"SABGRID1"
GRID_DTYPE = b"c8le"
_HEADER = struct.Struct("<8s4sI3d")  # magic, dtype tag, N, center.re, center.im, half_width


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


# -- grids ------------------------------------------------------------------

def grid_to_bytes(grid: ComplexGrid) -> bytes:
    c = complex(grid.center)
    head = _HEADER.pack(GRID_MAGIC, GRID_DTYPE, grid.N, c.real, c.imag, float(grid.half_width))
    return head + np.ascontiguousarray(grid.samples, dtype="<c8").tobytes()


def grid_from_bytes(data: bytes) -> ComplexGrid:
    if len(data) < _HEADER.size:
        raise ValueError("truncated grid header")
    magic, tag, N, cr, ci, a = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise ValueError("not a grid container")
    if tag != GRID_DTYPE:
        raise ValueError(f"unsupported dtype tag {tag!r}")
    payload = data[_HEADER.size:]
    if len(payload) != N * N * 8:
        raise ValueError(f"payload has {len(payload)} bytes, expected {N * N * 8}")
    samples = np.frombuffer(payload, dtype="<c8").reshape(N, N).astype(complex)
    return ComplexGrid(complex(cr, ci), a, samples)


def write_grid(path, grid: ComplexGrid) -> Path:
    return atomic_write_bytes(path, grid_to_bytes(grid))


def read_grid(path) -> ComplexGrid:
    return grid_from_bytes(Path(path).read_bytes())


# -- csv --------------------------------------------------------------------

def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # np.float64 subclasses float but reprs differently
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def grid_csv(grid: ComplexGrid) -> str:
    z = grid.z.ravel()
    v = grid.samples.ravel()
    return csv_text(("x", "y", "re", "im"), zip(z.real, z.imag, v.real, v.imag))


# -- json -------------------------------------------------------------------

def plain(obj):
    """Convert numpy scalars/arrays and complex numbers to JSON-ready values.
    Non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (complex, np.complexfloating)):
        return [plain(obj.real), plain(obj.imag)]
    return obj


def dumps(doc) -> str:
    return json.dumps(plain(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_schema(name: str) -> dict:
    text = resources.files("solenoid_ab").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)
