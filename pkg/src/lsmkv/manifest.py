"""MANIFEST: the append-only version-edit log.

Each record is [len u32][edit_type u8][payload][crc u32], little-endian,
where len counts the edit_type byte plus payload and the crc covers those
same bytes.  Replay stops at the first record whose length or checksum does
not hold, treating everything after as a torn tail.

Edit types:
    1 add_file      level u32, file_id u64, file_size u64, birth_epoch u64,
                    durability u8, checksum u32, smallest key, largest key
    2 delete_file   level u32, file_id u64
    3 mark_durable  epoch u64, count u32, file_id u64 x count
    4 ledger_open   epoch u64, parent_count u32, parent ids,
                    offspring_count u32, offspring ids
    5 ledger_close  epoch u64, outcome u8 (1 retired-durable, 2 aborted)

A commit group is written with a single append so that a torn tail can
only ever truncate the group, never interleave it.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

from .model import (
    Durability,
    SstMeta,
    decode_internal_key,
    encode_internal_key,
)

MANIFEST_NAME = "MANIFEST"

_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")

ADD_FILE = 1
DELETE_FILE = 2
MARK_DURABLE = 3
LEDGER_OPEN = 4
LEDGER_CLOSE = 5

OUTCOME_RETIRED = 1
OUTCOME_ABORTED = 2


@dataclass(slots=True)
class AddFile:
    meta: SstMeta


@dataclass(slots=True)
class DeleteFile:
    level: int
    file_id: int


@dataclass(slots=True)
class MarkDurable:
    epoch: int
    file_ids: tuple


@dataclass(slots=True)
class LedgerOpen:
    epoch: int
    parents: tuple
    offspring: tuple


@dataclass(slots=True)
class LedgerClose:
    epoch: int
    outcome: int


def encode_edit(edit) -> bytes:
    if isinstance(edit, AddFile):
        m = edit.meta
        body = (
            bytes([ADD_FILE])
            + struct.pack(
                "<IQQQBI",
                m.level,
                m.file_id,
                m.file_size,
                m.birth_epoch,
                int(m.durability),
                m.checksum,
            )
            + encode_internal_key(m.smallest)
            + encode_internal_key(m.largest)
        )
    elif isinstance(edit, DeleteFile):
        body = bytes([DELETE_FILE]) + struct.pack("<IQ", edit.level, edit.file_id)
    elif isinstance(edit, MarkDurable):
        body = bytes([MARK_DURABLE]) + struct.pack(
            "<QI", edit.epoch, len(edit.file_ids)
        )
        body += struct.pack(f"<{len(edit.file_ids)}Q", *edit.file_ids)
    elif isinstance(edit, LedgerOpen):
        body = bytes([LEDGER_OPEN]) + struct.pack(
            "<QI", edit.epoch, len(edit.parents)
        )
        body += struct.pack(f"<{len(edit.parents)}Q", *edit.parents)
        body += struct.pack("<I", len(edit.offspring))
        body += struct.pack(f"<{len(edit.offspring)}Q", *edit.offspring)
    elif isinstance(edit, LedgerClose):
        body = bytes([LEDGER_CLOSE]) + struct.pack("<QB", edit.epoch, edit.outcome)
    else:
        raise TypeError(f"unknown edit {edit!r}")
    return _LEN.pack(len(body)) + body + _CRC.pack(zlib.crc32(body))


def _decode_body(body: bytes):
    etype = body[0]
    if etype == ADD_FILE:
        level, file_id, file_size, birth_epoch, durability, checksum = struct.unpack_from(
            "<IQQQBI", body, 1
        )
        off = 1 + struct.calcsize("<IQQQBI")
        smallest, off = decode_internal_key(body, off)
        largest, _ = decode_internal_key(body, off)
        return AddFile(
            SstMeta(
                file_id=file_id,
                level=level,
                smallest=smallest,
                largest=largest,
                file_size=file_size,
                durability=Durability(durability),
                birth_epoch=birth_epoch,
                checksum=checksum,
            )
        )
    if etype == DELETE_FILE:
        level, file_id = struct.unpack_from("<IQ", body, 1)
        return DeleteFile(level, file_id)
    if etype == MARK_DURABLE:
        epoch, count = struct.unpack_from("<QI", body, 1)
        ids = struct.unpack_from(f"<{count}Q", body, 13)
        return MarkDurable(epoch, tuple(ids))
    if etype == LEDGER_OPEN:
        epoch, pcount = struct.unpack_from("<QI", body, 1)
        off = 13
        parents = struct.unpack_from(f"<{pcount}Q", body, off)
        off += 8 * pcount
        (ocount,) = struct.unpack_from("<I", body, off)
        off += 4
        offspring = struct.unpack_from(f"<{ocount}Q", body, off)
        return LedgerOpen(epoch, tuple(parents), tuple(offspring))
    if etype == LEDGER_CLOSE:
        epoch, outcome = struct.unpack_from("<QB", body, 1)
        return LedgerClose(epoch, outcome)
    raise ValueError(f"unknown edit type {etype}")


def read_edits(path: str) -> list:
    """Decode all valid edits, stopping cleanly at a torn or corrupt tail."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        return []
    edits = []
    offset = 0
    n = len(data)
    while offset + _LEN.size <= n:
        (length,) = _LEN.unpack_from(data, offset)
        body_start = offset + _LEN.size
        crc_end = body_start + length + _CRC.size
        if crc_end > n or length == 0:
            break
        body = data[body_start : body_start + length]
        (crc,) = _CRC.unpack_from(data, body_start + length)
        if zlib.crc32(body) != crc:
            break
        try:
            edits.append(_decode_body(body))
        except (ValueError, struct.error, IndexError):
            break
        offset = crc_end
    return edits


class ManifestWriter:
    """Appends edit groups; one group, one write syscall."""

    def __init__(self, path: str):
        self.path = path
        self._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def append_group(self, edits, sync: bool = False):
        blob = b"".join(encode_edit(e) for e in edits)
        os.write(self._fd, blob)
        if sync:
            os.fsync(self._fd)

    def sync(self):
        os.fsync(self._fd)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
