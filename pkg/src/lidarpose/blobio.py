"""Versioned, checksummed binary container for named arrays.

One blob file holds an ordered set of named ndarrays with exact dtypes and
shapes, so checkpoints and scene data round-trip bitwise.  Layout (little
endian): magic "LPOB", u16 format version, u64 total file size, u32 entry
count, then per entry (u16 name length, name, u16 dtype length, dtype string,
u8 ndim, u64 dims..., raw C-order bytes), and finally a u32 CRC-32 of all
preceding bytes.

Failure modes are distinct: wrong version raises BlobVersionError, a file
shorter than its declared size raises BlobTruncatedError, and payload
corruption raises BlobChecksumError.  No partial data is ever returned.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"LPOB"
FORMAT_VERSION = 1


class BlobError(IOError):
    """Base class for blob container failures."""


class BlobVersionError(BlobError):
    pass


class BlobTruncatedError(BlobError):
    pass


class BlobChecksumError(BlobError):
    pass


def write_blob(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to path; the order of the dict is preserved."""
    body = bytearray()
    body += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        # ascontiguousarray would promote 0-d arrays to 1-d; keep their shape.
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        body += struct.pack("<H", len(name_b)) + name_b
        body += struct.pack("<H", len(dtype_b)) + dtype_b
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<Q", d)
        body += arr.tobytes()
    total = len(MAGIC) + 2 + 8 + len(body) + 4
    head = MAGIC + struct.pack("<H", FORMAT_VERSION) + struct.pack("<Q", total)
    payload = head + bytes(body)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload + struct.pack("<I", crc))


def read_blob(path) -> dict[str, np.ndarray]:
    """Read a blob written by write_blob; arrays come back bitwise identical."""
    with open(path, "rb") as f:
        data = f.read()
    head_len = len(MAGIC) + 2 + 8
    if len(data) < head_len + 4:
        raise BlobTruncatedError(f"{path}: file too short to hold a blob header")
    if data[: len(MAGIC)] != MAGIC:
        raise BlobError(f"{path}: not a blob file (bad magic)")
    version, total = struct.unpack_from("<HQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise BlobVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    if len(data) < total:
        raise BlobTruncatedError(
            f"{path}: file has {len(data)} bytes, header declares {total}"
        )
    data = data[:total]
    stored_crc = struct.unpack_from("<I", data, total - 4)[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise BlobChecksumError(f"{path}: CRC-32 mismatch, file is corrupted")

    out: dict[str, np.ndarray] = {}
    off = head_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    end = total - 4
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (dlen,) = struct.unpack_from("<H", data, off)
            off += 2
            dtype = np.dtype(data[off : off + dlen].decode("ascii"))
            off += dlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, off) if ndim else ()
            off += 8 * ndim
            nbytes = int(dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
            if off + nbytes > end:
                raise BlobTruncatedError(f"{path}: array {name!r} extends past the payload")
            arr = np.frombuffer(data[off : off + nbytes], dtype=dtype).reshape(shape).copy()
            off += nbytes
            out[name] = arr
    except struct.error as exc:
        raise BlobTruncatedError(f"{path}: payload ended mid-entry") from exc
    return out
