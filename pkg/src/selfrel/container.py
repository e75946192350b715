"""Single-file named-array container.

Layout (all integers little-endian)::

    magic       4 bytes   b"SRLT" (checkpoints) or b"SRLA" (raw arrays)
    version     u32
    digest      32 bytes  SHA-256 of the producing configuration (zeros if none)
    count       u32
    directory   count x { name_len u16, name utf-8, dtype u8, ndim u8,
                          dims ndim x u64, offset u64, nbytes u64 }
    payloads    raw little-endian array bytes at the recorded absolute offsets
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

VERSION = 1
CHECKPOINT_MAGIC = b"SRLT"
ARRAY_MAGIC = b"SRLA"

_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1", 5: "<i4", 6: "|b1"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def _code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder not in "|" else arr.dtype.str
    if key not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return _CODES[key]


def dumps(arrays: dict[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC,
          digest: str | bytes | None = None) -> bytes:
    if isinstance(digest, str):
        digest = bytes.fromhex(digest)
    digest = (digest or b"").ljust(32, b"\0")[:32]
    items = [(name, np.asarray(a, order="C")) for name, a in arrays.items()]
    head = bytearray(magic + struct.pack("<I", VERSION) + digest + struct.pack("<I", len(items)))
    dir_size = sum(2 + len(n.encode()) + 2 + 8 * a.ndim + 16 for n, a in items)
    offset = len(head) + dir_size
    payloads = []
    for name, a in items:
        raw = a.astype(np.dtype(_DTYPES[_code(a)]), copy=False).tobytes()
        nb = name.encode()
        head += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _code(a), a.ndim)
        head += struct.pack(f"<{a.ndim}Q", *a.shape)
        head += struct.pack("<QQ", offset, len(raw))
        payloads.append(raw)
        offset += len(raw)
    return bytes(head) + b"".join(payloads)


def loads(buf: bytes, magic: bytes | None = None) -> tuple[dict[str, np.ndarray], bytes]:
    """Parse a container; returns ``(arrays, digest)``."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated container while reading {what}")
        out = buf[pos:pos + n]
        pos += n
        return out

    got = take(4, "magic")
    if got not in (CHECKPOINT_MAGIC, ARRAY_MAGIC) or (magic is not None and got != magic):
        raise CheckpointError(f"bad magic {got!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    digest = take(32, "digest")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = take(nlen, f"entry {i} name").decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"entry {i} has an undecodable name") from None
        code, ndim = struct.unpack("<BB", take(2, f"{name} dtype"))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} shape"))
        offset, nbytes = struct.unpack("<QQ", take(16, f"{name} offset"))
        dtype = np.dtype(_DTYPES[code])
        if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: payload size disagrees with shape {shape}")
        if offset + nbytes > len(buf):
            raise CheckpointError(f"{name}: payload truncated")
        arrays[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                                     offset=offset).reshape(shape).copy()
    return arrays, digest


def save(path: str | Path, arrays: dict[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC,
         digest: str | bytes | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, magic, digest))
    tmp.replace(path)


def load(path: str | Path, magic: bytes | None = None) -> tuple[dict[str, np.ndarray], bytes]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from None
    return loads(buf, magic)
