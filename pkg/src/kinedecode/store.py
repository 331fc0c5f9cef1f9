# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Little-endian binary container for named, shape-tagged arrays.

Layout (all integers unsigned little-endian)::

    magic     4 bytes   b"KDAR"
    version   u32
    count     u32
    entries   count times:
        name_len  u16, name (utf-8)
        dtype     u8  (0 = float64, 1 = int64)
        ndim      u8, dims u32 * ndim
        data      raw little-endian values, C order
    crc32     u32 over everything before it

No timestamps are written, so equal inputs produce byte-identical files.
"""

import logging
import struct
import zlib
from typing import Dict, Mapping

import numpy as np

_MAGIC = b"KDAR"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}

log = logging.getLogger("kinedecode.store")


class CheckpointError(Exception):
    """Raised when a container is malformed or fails its checksum."""

    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else "%s: %s" % (path, message))
        self.path = path


def pack_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize *arrays* in insertion order."""
    chunks = [_MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        try:
            code = _CODES[arr.dtype.kind]
        except KeyError:
            raise TypeError("Array %r has unsupported dtype %s" % (name, arr.dtype)) from None
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unpack_arrays(blob: bytes, path=None) -> Dict[str, np.ndarray]:
    """Inverse of :func:`pack_arrays`."""
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise CheckpointError("not a kinedecode array container", path)
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch", path)
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError("unsupported container version %d" % version, path)

    offset = 12
    arrays = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", body, offset)
            offset += 2
            shape = struct.unpack_from("<%dI" % ndim, body, offset)
            offset += 4 * ndim
            dtype = _DTYPES[code]
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(body):
                raise CheckpointError("entry %r is truncated" % name, path)
            arrays[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=offset).reshape(shape).copy()
            offset += nbytes
    except (struct.error, KeyError) as e:
        raise CheckpointError("corrupt entry table (%s)" % e, path) from None
    if offset != len(body):
        raise CheckpointError("%d trailing bytes" % (len(body) - offset), path)
    return arrays


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    blob = pack_arrays(arrays)
    with open(path, "wb") as f:
        f.write(blob)
    log.debug("Wrote %d arrays (%d bytes) to %s", len(arrays), len(blob), path)


def load_arrays(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    return unpack_arrays(blob, path=path)


def text_array(text: str) -> np.ndarray:
    """UTF-8 *text* as an int64 byte array, for metadata entries."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def array_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")
