"""Binary CAM interchange files (``<image_id>.cams``).

Layout, little-endian::

    b"CAMS" | u8 version | u16 count | count x (u16 class_id | u32 h | u32 w | h*w f32 row-major)

Class id 0xFFFF is reserved for the patch-to-patch attention matrix that the
CAM stage stores next to the maps, so that refinement needs nothing but the
``.cams`` file.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

MAGIC = b"CAMS"
VERSION = 1
ATTENTION_ID = 0xFFFF


def encode(entries: list) -> bytes:
    """``entries`` is a list of ``(class_id, 2-D array)``."""
    if len(entries) > 0xFFFF:
        raise InvalidArgument("too many entries for a u16 count")
    parts = [MAGIC, struct.pack("<BH", VERSION, len(entries))]
    for cid, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 2:
            raise InvalidArgument("each entry must be a 2-D map")
        parts.append(struct.pack("<HII", int(cid), arr.shape[0], arr.shape[1]))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> list:
    try:
        return _decode(buf)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, InvalidArgument):
            raise
        raise InvalidArgument(f"truncated CAMS data: {exc}") from None


def _decode(buf: bytes) -> list:
    if buf[:4] != MAGIC:
        raise InvalidArgument("not a CAMS file")
    version, count = struct.unpack_from("<BH", buf, 4)
    if version != VERSION:
        raise InvalidArgument(f"unsupported CAMS version {version}")
    off = 7
    out = []
    for _ in range(count):
        cid, h, w = struct.unpack_from("<HII", buf, off)
        off += 10
        n = h * w
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(h, w)
        off += 4 * n
        out.append((cid, arr.astype(np.float32)))
    if off != len(buf):
        raise InvalidArgument("trailing bytes in CAMS file")
    return out


def write(path, class_ids, maps, attention=None) -> None:
    entries = [(cid, m) for cid, m in zip(class_ids, maps)]
    if attention is not None:
        entries.append((ATTENTION_ID, attention))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(entries))
    os.replace(tmp, path)


def read(path):
    """Return ``(class_ids, maps K x h x w float32, attention or None)``."""
    entries = decode(Path(path).read_bytes())
    attention = None
    ids, maps = [], []
    for cid, arr in entries:
        if cid == ATTENTION_ID:
            attention = arr
        else:
            ids.append(cid)
            maps.append(arr)
    stack = np.stack(maps) if maps else np.zeros((0, 0, 0), np.float32)
    return ids, stack, attention
