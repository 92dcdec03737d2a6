"""Write-ahead log segments.

Record layout (little-endian):
    [len u32][crc u32][seqno u64][kind u8][klen u32][vlen u32][key][value]
where len counts the bytes after the crc field and crc covers those bytes.
A record whose crc does not match terminates replay of that segment: the
tail is treated as torn.
"""

from __future__ import annotations

import os
import struct
import zlib

from . import crashpoints
from .errors import CorruptionError
from .model import RecordKind

_PREFIX = struct.Struct("<II")
_BODY_HEAD = struct.Struct("<QBII")


def encode_record(seqno: int, kind: int, user_key: bytes, value: bytes) -> bytes:
    body = _BODY_HEAD.pack(seqno, kind, len(user_key), len(value)) + user_key + value
    return _PREFIX.pack(len(body), zlib.crc32(body)) + body


class WalWriter:
    """Appends records to one segment file.

    Appends are buffered in user space unless fsync_each_write is set;
    a crash may lose the buffered tail, which is exactly the documented
    unsynced-WAL contract.
    """

    def __init__(self, path: str, fsync_each_write: bool = False):
        self.path = path
        self.fsync_each_write = fsync_each_write
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        self._f = os.fdopen(fd, "wb", buffering=64 * 1024)
        self._last_seqno = 0
        self.bytes_written = 0

    def append(self, seqno: int, kind: int, user_key: bytes, value: bytes):
        if seqno <= self._last_seqno:
            raise ValueError(
                f"seqno {seqno} not increasing (last {self._last_seqno})"
            )
        rec = encode_record(seqno, kind, user_key, value)
        if crashpoints.armed("wal-append-torn") and crashpoints.fatal_hit(
            "wal-append-torn"
        ):
            # Tear the record: persist only a prefix, then die.
            self._f.write(rec[: max(1, len(rec) // 2)])
            self._f.flush()
            os.fsync(self._f.fileno())
            crashpoints.crash_now("wal-append-torn")
        self._f.write(rec)
        self._last_seqno = seqno
        self.bytes_written += len(rec)
        if self.fsync_each_write:
            self._f.flush()
            os.fsync(self._f.fileno())

    def sync(self):
        self._f.flush()
        os.fsync(self._f.fileno())

    def close(self):
        if self._f is not None:
            self._f.flush()
            self._f.close()
            self._f = None


def replay(path: str):
    """Yield (seqno, kind, user_key, value) until EOF or a torn record."""
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    last_seqno = 0
    while offset + _PREFIX.size <= len(data):
        length, crc = _PREFIX.unpack_from(data, offset)
        body_start = offset + _PREFIX.size
        body_end = body_start + length
        if body_end > len(data):
            break  # torn tail
        body = data[body_start:body_end]
        if zlib.crc32(body) != crc:
            break  # torn or corrupt: stop replay here
        seqno, kind, klen, vlen = _BODY_HEAD.unpack_from(body, 0)
        if _BODY_HEAD.size + klen + vlen != length:
            break
        if seqno <= last_seqno:
            raise CorruptionError(
                f"{path}: seqno {seqno} not increasing during replay"
            )
        key_start = _BODY_HEAD.size
        user_key = body[key_start : key_start + klen]
        value = body[key_start + klen : key_start + klen + vlen]
        yield seqno, RecordKind(kind), user_key, value
        last_seqno = seqno
        offset = body_end


def torn_tail_bytes(path: str) -> int:
    """Bytes after the last fully valid record (0 on a clean segment)."""
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    while offset + _PREFIX.size <= len(data):
        length, crc = _PREFIX.unpack_from(data, offset)
        body_start = offset + _PREFIX.size
        body_end = body_start + length
        if body_end > len(data) or zlib.crc32(data[body_start:body_end]) != crc:
            break
        offset = body_end
    return len(data) - offset
