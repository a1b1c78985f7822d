"""Inspectable on-disk formats and atomic writes.

Grid files are a pair: ``<stem>.hdr`` holds ``key: <json value>`` lines and
``<stem>.bin`` holds the raw little-endian float32 payload in C order with
dims ``(channels, L, H, W)``. Checkpoints are one file: a JSON header line
followed by float64 little-endian arrays.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .condition import MISSING

GRID_FORMAT = "precipdiff-grid"
GRID_VERSION = 1
CKPT_FORMAT = "precipdiff-ckpt"
CKPT_VERSION = 1
_REQUIRED = ("format", "version", "dims", "dtype", "channels", "missing", "units", "seed")


class DataError(ValueError):
    """Malformed, missing or inconsistent data files."""


def _atomic_write(path: Path, data: bytes) -> None:
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


def atomic_write_bytes(path, data: bytes) -> None:
    _atomic_write(Path(path), data)


def atomic_write_text(path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def grid_paths(path) -> tuple[Path, Path]:
    """Header and payload paths for a stem, ``.hdr`` or ``.bin`` path."""
    p = Path(path)
    if p.suffix in (".hdr", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".hdr"), p.with_name(p.name + ".bin")


@dataclass
class GridFile:
    data: np.ndarray  # float32, (channels, L, H, W)
    channels: list[str]
    units: str = "1"
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


def write_grid(path, data, channels: Sequence[str], units: str = "1", seed: Optional[int] = None,
               extra: Optional[Mapping[str, Any]] = None) -> tuple[Path, Path]:
    """Write ``data`` (``(C, L, H, W)``, or ``(L, H, W)`` for one channel) as float32.

    Values are cast to float32; float32 input round-trips bit for bit.
    """
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DataError(f"grid data must be (C, L, H, W), got {arr.shape}")
    if len(channels) != arr.shape[0]:
        raise DataError(f"{len(channels)} channel names for {arr.shape[0]} channels")
    header = {
        "format": GRID_FORMAT,
        "version": GRID_VERSION,
        "dims": list(arr.shape),
        "dtype": "f32le",
        "channels": list(channels),
        "missing": MISSING,
        "units": units,
        "seed": seed,
    }
    for k, v in (extra or {}).items():
        if k in header:
            raise DataError(f"extra header key {k!r} collides with a reserved key")
        header[k] = v
    hdr, binp = grid_paths(path)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
    atomic_write_bytes(binp, payload)
    atomic_write_text(hdr, "".join(f"{k}: {json.dumps(v)}\n" for k, v in header.items()))
    return hdr, binp


def read_header(path) -> dict:
    hdr, _ = grid_paths(path)
    try:
        text = hdr.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read grid header {hdr}: {e}") from e
    header = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise DataError(f"{hdr}:{n}: expected 'key: value'")
        try:
            header[key.strip()] = json.loads(value)
        except json.JSONDecodeError as e:
            raise DataError(f"{hdr}:{n}: bad value for {key.strip()!r}") from e
    missing = [k for k in _REQUIRED if k not in header]
    if missing:
        raise DataError(f"{hdr}: header lacks {missing}")
    if header["format"] != GRID_FORMAT or header["version"] != GRID_VERSION:
        raise DataError(f"{hdr}: unsupported format {header['format']!r} v{header['version']}")
    if header["dtype"] != "f32le":
        raise DataError(f"{hdr}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if not (isinstance(dims, list) and len(dims) == 4 and all(isinstance(d, int) and d >= 1 for d in dims)):
        raise DataError(f"{hdr}: dims must be four positive integers, got {dims}")
    if len(header["channels"]) != dims[0]:
        raise DataError(f"{hdr}: {len(header['channels'])} channel names for {dims[0]} channels")
    return header


def read_grid(path) -> GridFile:
    header = read_header(path)
    _, binp = grid_paths(path)
    try:
        raw = binp.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read grid payload {binp}: {e}") from e
    dims = tuple(header["dims"])
    expect = int(np.prod(dims)) * 4
    if len(raw) != expect:
        raise DataError(f"{binp}: payload has {len(raw)} bytes, header dims {dims} need {expect}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    extra = {k: v for k, v in header.items() if k not in _REQUIRED}
    return GridFile(data, list(header["channels"]), header["units"], header["seed"], extra)


# checkpoints


def write_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    """Single-file archive: JSON index line, then each array as float64 little-endian.

    The byte stream is a pure function of the inputs, so identical states give
    identical files.
    """
    index, chunks, offset = [], [], 0
    for name, a in arrays.items():
        b = np.ascontiguousarray(a, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(a)), "offset": offset})
        chunks.append(b)
        offset += len(b)
    head = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "meta": meta, "arrays": index}
    line = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    atomic_write_bytes(path, line + b"".join(chunks))


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    nl = blob.find(b"\n")
    try:
        head = json.loads(blob[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: not a checkpoint") from e
    if head.get("format") != CKPT_FORMAT or head.get("version") != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format")
    body = memoryview(blob)[nl + 1 :]
    out = {}
    for ent in head["arrays"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        start, stop = ent["offset"], ent["offset"] + 8 * n
        if stop > len(body):
            raise DataError(f"{path}: truncated array {ent['name']!r}")
        out[ent["name"]] = np.frombuffer(body[start:stop], dtype="<f8").reshape(ent["shape"]).astype(np.float64)
    return out, head["meta"]
