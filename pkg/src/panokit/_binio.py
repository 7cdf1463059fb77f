"""Low-level binary file helpers shared by the format readers/writers."""

from __future__ import annotations

import os
import struct
import tempfile


class FormatError(ValueError):
    """Raised for missing, truncated or malformed data files."""


def read_exact(f, n: int, path) -> bytes:
    """Read exactly ``n`` bytes or fail naming the file and byte offset."""
    start = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"{path}: truncated file, wanted {n} bytes at byte offset {start}, got {len(data)}"
        )
    return data


def expect_magic(f, magic: bytes, path):
    got = read_exact(f, len(magic), path)
    if got != magic:
        raise FormatError(f"{path}: bad magic at byte offset 0, expected {magic!r}, got {got!r}")


def read_u32(f, path) -> int:
    return struct.unpack("<I", read_exact(f, 4, path))[0]


def read_i32(f, path) -> int:
    return struct.unpack("<i", read_exact(f, 4, path))[0]


def atomic_write_bytes(path, data: bytes):
    """Write a file atomically (temp file in the same directory + rename)."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
