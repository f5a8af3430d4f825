"""Binary checkpoint container.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic ``b"TLABCKPT"``
    8       4     format version (u32), currently 1
    12      4     tensor count N (u32)
    16      --    N directory entries, then payloads back to back

Each directory entry:

    name_len (u16), name (utf-8), dtype code (u8: 0=f32, 1=f64),
    ndim (u8), dims (u32 each), payload offset (u64)

Payload offsets are relative to the end of the directory.  Entries are
written in sorted-name order so identical weights always produce identical
bytes.  Payloads are raw row-major little-endian arrays.
"""

import hashlib
import struct

import numpy as np

from .errors import InputError

MAGIC = b"TLABCKPT"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, tensors):
    """Write a name->array mapping to ``path``.

    Accepts numpy arrays or anything with a ``.data`` ndarray attribute.
    """
    items = []
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(getattr(arr, "data", arr))
        if arr.dtype not in _CODE_FOR:
            raise InputError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        items.append((name, np.ascontiguousarray(arr) if arr.ndim else arr))

    directory = bytearray()
    offset = 0
    for name, arr in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise InputError(f"checkpoint: name too long ({len(encoded)} bytes)")
        directory += struct.pack("<H", len(encoded))
        directory += encoded
        directory += struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", offset)
        offset += arr.nbytes

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        fh.write(directory)
        for _, arr in items:
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a dict of name -> ndarray (native order)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise InputError(f"checkpoint: bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise InputError(f"checkpoint: unsupported version {version}")

    cursor = 16
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, cursor)
            cursor += 2
            name = blob[cursor : cursor + name_len].decode("utf-8")
            cursor += name_len
            code, ndim = struct.unpack_from("<BB", blob, cursor)
            cursor += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, cursor)
            cursor += 4 * ndim
            (rel,) = struct.unpack_from("<Q", blob, cursor)
            cursor += 8
            if code not in _DTYPE_CODES:
                raise InputError(f"checkpoint: unknown dtype code {code} for {name!r}")
            entries.append((name, _DTYPE_CODES[code], shape, rel))
    except struct.error as exc:
        raise InputError(f"checkpoint: truncated directory in {path}") from exc

    payload_start = cursor
    out = {}
    for name, dtype, shape, rel in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = payload_start + rel
        end = start + n * dtype.itemsize
        if end > len(blob):
            raise InputError(f"checkpoint: truncated payload for {name!r}")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape)
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out


def checkpoint_hash(path):
    """SHA-256 of the file bytes; used to prove a file was left untouched."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
