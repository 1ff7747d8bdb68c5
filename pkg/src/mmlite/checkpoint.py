"""Binary checkpoint format.

Little-endian layout::

    b"MMLC" | u32 version | u32 len | config text (utf-8, key=value)
    u32 n_tensors, then per tensor:
        u16 len | name | u8 dtype (0 f32, 1 f64) | u8 ndim | u32 dims[ndim] | u64 offset
    u32 n_aliases, then per alias: u16 len | alias | u16 len | target
    zero padding to a 64-byte boundary, then the data section

Tensor offsets are relative to the data section and 64-byte aligned. Nothing
time- or host-dependent is written, so equal registries give equal bytes.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Union

import numpy as np

from .config import parse_config_text
from .errors import ConfigError, FormatError
from .model import Model
from .tensor import Tensor

MAGIC = b"MMLC"
VERSION = 1
ALIGN = 64
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _pad(n: int) -> int:
    return -n % ALIGN


def _name(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FormatError(f"name too long: {s[:40]}...", 0)
    return struct.pack("<H", len(b)) + b


def checkpoint_bytes(model: Model) -> bytes:
    cfg = model.config.to_text().encode("utf-8")
    head = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    blobs, offset = [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        head += [_name(name), struct.pack("<BB", _CODES[t.dtype], arr.ndim),
                 struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", offset)]
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(blobs[-1])
    head.append(struct.pack("<I", len(model.aliases)))
    for alias, target in sorted(model.aliases.items()):
        head += [_name(alias), _name(target)]
    header = b"".join(head)
    return header + b"\0" * _pad(len(header)) + b"".join(blobs)


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what: str) -> str:
        at = self.pos
        (n,) = self.unpack("<H", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid utf-8", at) from None


def model_from_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    version, cfg_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    at = r.pos
    try:
        cfg = parse_config_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"bad config block: {exc}", at) from None

    (n_tensors,) = r.unpack("<I", "tensor count")
    table = []
    for _ in range(n_tensors):
        entry_at = r.pos
        name = r.name("tensor name")
        code, ndim = r.unpack("<BB", "tensor dtype")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        (offset,) = r.unpack("<Q", "tensor offset")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset % ALIGN:
            raise FormatError(f"tensor {name!r}: data offset {offset} not {ALIGN}-byte aligned", entry_at)
        table.append((name, dt, shape, offset, nbytes, entry_at))

    (n_alias,) = r.unpack("<I", "alias count")
    aliases = {}
    for _ in range(n_alias):
        alias = r.name("alias")
        aliases[alias] = r.name("alias target")

    data_start = r.pos + _pad(r.pos)
    end = data_start + max((off + n + _pad(n) for _, _, _, off, n, _ in table), default=0)
    if len(buf) < end:
        raise FormatError(f"truncated checkpoint: expected {end} bytes", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after data section", end)
    params: OrderedDict = OrderedDict()
    for name, dt, shape, offset, nbytes, entry_at in table:
        lo = data_start + offset
        if lo + nbytes > len(buf):
            raise FormatError(f"tensor {name!r}: data runs past end of file", entry_at)
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=lo).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r}: non-finite values", lo)
        t = Tensor(arr.astype(dt.newbyteorder("="), copy=True))
        t.name = name
        params[name] = t
    try:
        return Model(cfg, params, aliases)
    except Exception as exc:  # registry does not match the config
        raise FormatError(f"tensor table does not match config: {exc}", data_start) from None


def load_checkpoint(path: Union[str, Path]) -> Model:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}", 0) from None
    return model_from_bytes(buf)


__all__ = ["checkpoint_bytes", "load_checkpoint", "model_from_bytes", "save_checkpoint"]
