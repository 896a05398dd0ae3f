"""Volume and checkpoint containers and their byte formats.

RVL1 volume file::

    RVL1\\n
    dtype=f32|u16\\n
    dims=D,H,W\\n
    spacing=sz,sy,sx\\n
    channels=C\\n          (optional, present only for channel-first arrays)
    \\n
    <little-endian payload, z slowest>

RCK1 checkpoint file::

    RCK1\\n
    <tensor count>\\n
    then per tensor: <name>\\n <d0,d1,...>\\n <little-endian f32 payload>
    then key=value metadata lines until EOF

All writes go to a temporary sibling file that is renamed into place.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .tensor import Tensor

VOLUME_MAGIC = b"RVL1\n"
CHECKPOINT_MAGIC = b"RCK1\n"
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


@dataclass
class Volume:
    """Dense grid ([D,H,W] or channel-first [C,D,H,W]) with (z, y, x) spacing in mm."""

    array: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.array = np.asarray(self.array)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.array.ndim not in (3, 4):
            raise ShapeError(f"volume must be 3D or channel-first 4D, got shape {self.array.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.array.shape[-3:])

    @property
    def channels(self) -> int:
        return 1 if self.array.ndim == 3 else self.array.shape[0]

    def channel_first(self) -> np.ndarray:
        return self.array if self.array.ndim == 4 else self.array[None]


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_float(x: float) -> str:
    return repr(float(x))


def volume_to_bytes(vol: Volume) -> bytes:
    arr = vol.array
    if arr.dtype.kind == "f":
        code = "f32"
    elif arr.dtype.kind in "ui" or arr.dtype == bool:
        code = "u16"
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise DataError("integer volume values must fit in u16")
    else:
        raise DataError(f"unsupported volume dtype {arr.dtype}")
    d, h, w = vol.extents
    lines = [f"dtype={code}", f"dims={d},{h},{w}", "spacing=" + ",".join(_fmt_float(s) for s in vol.spacing)]
    if arr.ndim == 4:
        lines.append(f"channels={arr.shape[0]}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return VOLUME_MAGIC + header + payload


def write_volume(path, vol: Volume) -> None:
    _atomic_write(path, volume_to_bytes(vol))


def _read_line(buf: bytes, pos: int, what: str) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"unterminated {what}", pos)
    try:
        return buf[pos:end].decode("utf-8"), end + 1
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not UTF-8", pos) from exc


def _ints(text: str, key: str, offset: int) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise FormatError(f"bad integer list for {key}: {text!r}", offset) from exc
    if any(v < 1 for v in vals):
        raise FormatError(f"{key} entries must be positive: {text!r}", offset)
    return vals


def volume_from_bytes(buf: bytes) -> Volume:
    if not buf.startswith(VOLUME_MAGIC):
        raise FormatError("bad magic, expected RVL1", 0)
    pos = len(VOLUME_MAGIC)
    header: dict[str, tuple[str, int]] = {}
    while True:
        start = pos
        line, pos = _read_line(buf, pos, "header line")
        if line == "":
            break
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise FormatError(f"malformed header line {line!r}", start)
        if key in header:
            raise FormatError(f"duplicate header key {key!r}", start)
        header[key] = (value, start)
    for key in ("dtype", "dims", "spacing"):
        if key not in header:
            raise FormatError(f"missing header key {key!r}", pos)
    unknown = set(header) - {"dtype", "dims", "spacing", "channels"}
    if unknown:
        key = sorted(unknown)[0]
        raise FormatError(f"unknown header key {key!r}", header[key][1])
    code, off = header["dtype"]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype {code!r}", off)
    dims = _ints(header["dims"][0], "dims", header["dims"][1])
    if len(dims) != 3:
        raise FormatError("dims must have three entries", header["dims"][1])
    try:
        spacing = tuple(float(v) for v in header["spacing"][0].split(","))
    except ValueError as exc:
        raise FormatError("bad spacing", header["spacing"][1]) from exc
    if len(spacing) != 3 or not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise FormatError("spacing must be three positive numbers", header["spacing"][1])
    shape = dims
    if "channels" in header:
        (channels,) = _ints(header["channels"][0], "channels", header["channels"][1])
        shape = (channels,) + dims
    dtype = _DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(buf) - pos
    if actual < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {actual}", len(buf))
    if actual > expected:
        raise FormatError(f"trailing bytes after payload: expected {expected}, found {actual}", pos + expected)
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
    native = np.float32 if code == "f32" else np.uint16
    return Volume(arr.astype(native), spacing)


def read_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


# -- checkpoints ---------------------------------------------------------------


def checkpoint_to_bytes(params: Mapping[str, Tensor | np.ndarray], metadata: Mapping[str, object]) -> bytes:
    parts = [CHECKPOINT_MAGIC, f"{len(params)}\n".encode()]
    for name, t in params.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if not name or "\n" in name:
            raise DataError(f"invalid tensor name {name!r}")
        parts.append(f"{name}\n".encode("utf-8"))
        parts.append((",".join(str(d) for d in arr.shape) + "\n").encode())
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for key, value in metadata.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text:
            raise DataError(f"metadata entry {key!r} cannot be encoded on one line")
        parts.append(f"{key}={text}\n".encode("utf-8"))
    return b"".join(parts)


def write_checkpoint(path, params, metadata: Mapping[str, object]) -> None:
    _atomic_write(path, checkpoint_to_bytes(params, metadata))


def checkpoint_from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise FormatError("bad magic, expected RCK1", 0)
    pos = len(CHECKPOINT_MAGIC)
    line, next_pos = _read_line(buf, pos, "tensor count")
    try:
        count = int(line)
    except ValueError as exc:
        raise FormatError(f"bad tensor count {line!r}", pos) from exc
    if count < 0:
        raise FormatError("negative tensor count", pos)
    pos = next_pos
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        name, pos = _read_line(buf, pos, "tensor name")
        if not name or name in tensors:
            raise FormatError(f"empty or duplicate tensor name {name!r}", start)
        dims_at = pos
        dims_line, pos = _read_line(buf, pos, "tensor dims")
        shape = () if dims_line == "" else _ints(dims_line, f"dims of {name}", dims_at)
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload for tensor {name!r}", len(buf))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=int(np.prod(shape)), offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    metadata: dict[str, str] = {}
    while pos < len(buf):
        start = pos
        line, pos = _read_line(buf, pos, "metadata line")
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise FormatError(f"malformed metadata line {line!r}", start)
        metadata[key] = value
    return tensors, metadata


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return checkpoint_from_bytes(Path(path).read_bytes())
