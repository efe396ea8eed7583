"""Binary checkpoint layout.

Checkpoint file::

    b"FSHD1"
    u32 spec_len, spec_len bytes of canonical NetworkSpec JSON (utf-8)
    u32 entry_count
    per entry: u32 layer_index, u8 role (0 weight, 1 bias), tensor

Tensor record::

    u32 ndim, ndim x u32 dims, prod(dims) x f32

All integers and floats are little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import NetworkSpec, ParamSet

MAGIC = b"FSHD1"
TENSOR_MAGIC = b"FSHT1"
_ROLES = ("weight", "bias")


class FormatError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def tensor(self, what="tensor") -> np.ndarray:
        start = self.pos
        ndim = self.u32(f"{what} rank")
        if ndim > 8:
            raise FormatError(f"implausible {what} rank {ndim}", start)
        dims = struct.unpack(f"<{ndim}I", self.take(4 * ndim, f"{what} dims"))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(self.take(4 * count, f"{what} data"), dtype="<f4")
        return data.reshape(dims).astype(np.float32)


def dumps_checkpoint(spec: NetworkSpec, params: ParamSet) -> bytes:
    params.check_spec(spec)
    spec_bytes = spec.to_json().encode()
    parts = [MAGIC, struct.pack("<I", len(spec_bytes)), spec_bytes, struct.pack("<I", len(params))]
    for layer_index, role, arr in params:
        parts.append(struct.pack("<IB", layer_index, _ROLES.index(role)))
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def loads_checkpoint(buf: bytes) -> tuple[NetworkSpec, ParamSet]:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    n = r.u32("spec length")
    start = r.pos
    try:
        spec = NetworkSpec.from_dict(json.loads(r.take(n, "spec json").decode()))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid network spec: {exc}", start) from exc
    count = r.u32("entry count")
    entries = []
    for _ in range(count):
        start = r.pos
        layer_index = r.u32("layer index")
        role = r.take(1, "role")[0]
        if role >= len(_ROLES):
            raise FormatError(f"unknown role code {role}", start + 4)
        entries.append((layer_index, _ROLES[role], r.tensor()))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last entry", r.pos)
    params = ParamSet(entries)
    try:
        params.check_spec(spec)
    except ValueError as exc:
        raise FormatError(f"entries do not match spec: {exc}", len(MAGIC)) from exc
    return spec, params


def save_checkpoint(path, spec: NetworkSpec, params: ParamSet):
    Path(path).write_bytes(dumps_checkpoint(spec, params))


def load_checkpoint(path) -> tuple[NetworkSpec, ParamSet]:
    return loads_checkpoint(Path(path).read_bytes())


def save_tensor(path, arr):
    Path(path).write_bytes(TENSOR_MAGIC + encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(TENSOR_MAGIC), "magic") != TENSOR_MAGIC:
        raise FormatError("bad magic, not a tensor file", 0)
    arr = r.tensor()
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after tensor", r.pos)
    return arr
