"""
File formats: RSM1 binary movies/PSFs/measurements, CSV tables, JSON sidecars.

RSM1 layout: the 4 magic bytes ``RSM1``, then ``n_rows``, ``n_cols``,
``t_len`` as little-endian u32, then the payload as little-endian float32,
frame-major and row-major within a frame.  All writes go through a temporary
file in the target directory followed by a rename, so a reader never sees a
half-written file.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MeasurementSeq, Movie, Psf, ShutterSchedule

MAGIC = b"RSM1"
HEADER = struct.Struct("<4sIII")
_U32_MAX = 2 ** 32 - 1
_UMASK = os.umask(0)
os.umask(_UMASK)


class Rsm1Error(ValueError):
    """Base class for malformed RSM1 files."""


class BadMagicError(Rsm1Error):
    pass


class TruncatedPayloadError(Rsm1Error):
    pass


class DimensionError(Rsm1Error):
    """Zero or out-of-range dimensions (including u32 overflow on write)."""


class MissingSidecarError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class Rsm1Header:
    n_rows: int
    n_cols: int
    t_len: int

    @property
    def payload_bytes(self):
        return self.n_rows * self.n_cols * self.t_len * 4


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.chmod(tmp, 0o666 & ~_UMASK)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# RSM1
# ---------------------------------------------------------------------------


def encode_rsm1(data):
    """Serialise an ``(n_rows, n_cols, t_len)`` array to RSM1 bytes."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise DimensionError(f"expected a 3-D array, got shape {data.shape}")
    if min(data.shape) < 1:
        raise DimensionError(f"dimensions must be >= 1, got {data.shape}")
    if max(data.shape) > _U32_MAX:
        raise DimensionError(f"dimension exceeds u32: {data.shape}")
    payload = np.ascontiguousarray(np.moveaxis(data, 2, 0), dtype="<f4")
    return HEADER.pack(MAGIC, *data.shape) + payload.tobytes()


def decode_rsm1(buf):
    """Parse RSM1 bytes into a float32 ``(n_rows, n_cols, t_len)`` array."""
    if len(buf) < HEADER.size:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError(f"header needs {HEADER.size} bytes, file has {len(buf)}")
    magic, n_rows, n_cols, t_len = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    hdr = Rsm1Header(n_rows, n_cols, t_len)
    if min(n_rows, n_cols, t_len) < 1:
        raise DimensionError(f"dimensions must be >= 1, got {(n_rows, n_cols, t_len)}")
    if hdr.payload_bytes > np.iinfo(np.intp).max:
        raise DimensionError(f"payload size overflows: {(n_rows, n_cols, t_len)}")
    have = len(buf) - HEADER.size
    if have < hdr.payload_bytes:
        raise TruncatedPayloadError(f"payload has {have} of {hdr.payload_bytes} bytes")
    if have > hdr.payload_bytes:
        raise Rsm1Error(f"{have - hdr.payload_bytes} trailing bytes after payload")
    flat = np.frombuffer(buf, dtype="<f4", count=n_rows * n_cols * t_len, offset=HEADER.size)
    return np.moveaxis(flat.reshape(t_len, n_rows, n_cols), 0, 2).astype(np.float32)


def read_rsm1(path):
    return decode_rsm1(Path(path).read_bytes())


def write_rsm1(path, data):
    atomic_write_bytes(path, encode_rsm1(data))


def write_movie(path, movie):
    write_rsm1(path, movie.data)


def read_movie(path, dt=1e-3):
    """Read a movie.  RSM1 carries no frame period, so ``dt`` is supplied."""
    return Movie(read_rsm1(path).astype(np.float64), dt)


def write_psf(path, psf):
    write_rsm1(path, psf.kernel[:, :, None])


def read_psf(path):
    data = read_rsm1(path)
    if data.shape[2] != 1:
        raise DimensionError(f"a PSF file has t_len = 1, got {data.shape[2]}")
    return Psf(data[:, :, 0].astype(np.float64))


def sidecar_path(path):
    return Path(str(path) + ".json")


def write_measurements(path, meas):
    """Write ``meas`` as RSM1 plus a ``<path>.json`` sidecar holding the schedule."""
    side = meas.schedule.to_dict()
    if meas.t0:
        side["t0"] = meas.t0
    write_rsm1(path, meas.data)
    write_json(sidecar_path(path), side)


def read_measurements(path):
    side = sidecar_path(path)
    if not side.exists():
        raise MissingSidecarError(f"schedule sidecar {side} not found")
    d = read_json(side)
    t0 = int(d.pop("t0", 0))
    schedule = ShutterSchedule.from_dict(d)
    return MeasurementSeq(read_rsm1(path).astype(np.float64), schedule, t0)


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    """Write a CSV table; floats get 9 significant digits."""
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path):
    """Return ``(header, rows)`` with every field as a string."""
    with open(path, newline="") as f:
        r = list(csv.reader(f))
    if not r:
        raise ValueError(f"{path} has no header row")
    return r[0], r[1:]


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def write_json(path, obj):
    atomic_write_text(path, json_text(obj))


def read_json(path):
    with open(path) as f:
        return json.load(f)
