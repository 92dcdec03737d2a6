"""Sorted-table files: builder, reader, and the k-way merge iterator.

On-disk layout (little-endian):

    [data records][index block][props block][footer]

    record       [klen u32][user_key][seqno u64][kind u8][vlen u32][value]
    index block  [block_count u32] then per block
                 [offset u64][length u32][last_key: encoded internal key]
    props block  [record_count u64][content_crc u32][smallest][largest]
    footer       [index_off u64][index_len u64][props_off u64][props_len u64]
                 [footer_crc u32][magic "AISL"]

content_crc covers the data region; footer_crc covers index block, props
block, and the footer fields before it.  Records are strictly increasing in
internal-key order.  Data leaves the builder through fixed-size buffer
handoffs to the I/O engine.
"""

from __future__ import annotations

import heapq
import os
import struct
import zlib

from .errors import IoQueueFullError, UnreadableFileError
from .io_engine import IoEngine, IoFile
from .model import (
    Durability,
    InternalKey,
    KVRecord,
    RecordKind,
    SstMeta,
    encode_internal_key,
    decode_internal_key,
    MAX_SEQNO,
)

MAGIC = b"AISL"
DATA_BLOCK_SIZE = 4096
_U32 = struct.Struct("<I")
_SEQ_KIND = struct.Struct("<QB")
_FOOTER_FIELDS = struct.Struct("<QQQQ")
FOOTER_SIZE = _FOOTER_FIELDS.size + 4 + 4


def _encode_key_parts(user_key: bytes, seqno: int, kind: int) -> bytes:
    return _U32.pack(len(user_key)) + user_key + _SEQ_KIND.pack(seqno, kind)


class SstBuilder:
    """Streams sorted records into one table file through buffer handoffs."""

    def __init__(
        self,
        io: IoEngine,
        file: IoFile,
        file_id: int,
        level: int,
        *,
        buffer_size: int,
        target_size: int,
        birth_epoch: int = 0,
        async_mode: bool = False,
    ):
        self.io = io
        self.file = file
        self.file_id = file_id
        self.level = level
        self.buffer_size = buffer_size
        self.target_size = target_size
        self.birth_epoch = birth_epoch
        self.async_mode = async_mode

        self.write_ids: list[int] = []
        self.buffer_flushes: list[int] = []  # sizes of data buffer handoffs
        self.record_count = 0
        self._buf = bytearray()
        self._submit_offset = 0
        self._content_crc = 0
        self._index_entries: list[tuple[int, int, bytes]] = []
        self._block_start = 0
        self._last: tuple | None = None  # (user_key, seqno, kind)
        self._first: tuple | None = None

    @property
    def data_bytes(self) -> int:
        return self._submit_offset + len(self._buf)

    @property
    def full(self) -> bool:
        return self.data_bytes >= self.target_size

    def add(self, user_key: bytes, seqno: int, kind: int, value: bytes):
        buf = self._buf
        buf += _U32.pack(len(user_key))
        buf += user_key
        buf += _SEQ_KIND.pack(seqno, kind)
        buf += _U32.pack(len(value))
        buf += value
        self._post_add(user_key, seqno, kind)

    def add_raw(self, user_key: bytes, seqno: int, kind: int, raw: bytes):
        """Append an already-encoded record verbatim (compaction fast path)."""
        self._buf += raw
        self._post_add(user_key, seqno, kind)

    def _post_add(self, user_key: bytes, seqno: int, kind: int):
        last = self._last
        if last is not None and (user_key, -seqno) <= (last[0], -last[1]):
            raise ValueError(
                f"records out of order: {user_key!r}@{seqno} after "
                f"{last[0]!r}@{last[1]}"
            )
        if self._first is None:
            self._first = (user_key, seqno, kind)
        self._last = (user_key, seqno, kind)
        self.record_count += 1

        pos = self.data_bytes
        if pos - self._block_start >= DATA_BLOCK_SIZE:
            self._index_entries.append(
                (
                    self._block_start,
                    pos - self._block_start,
                    _encode_key_parts(user_key, seqno, kind),
                )
            )
            self._block_start = pos

        buf = self._buf
        while len(buf) >= self.buffer_size:
            chunk = bytes(memoryview(buf)[: self.buffer_size])
            del buf[: self.buffer_size]
            self._submit_data(chunk)

    def add_record(self, rec: KVRecord):
        self.add(rec.key.user_key, rec.key.seqno, rec.key.kind, rec.value)

    def _submit_data(self, data: bytes):
        self._submit_write(data)
        self.buffer_flushes.append(len(data))
        self._content_crc = zlib.crc32(data, self._content_crc)

    def _submit_write(self, data: bytes):
        while True:
            try:
                wid = self.io.submit_write(self.file, self._submit_offset, data)
                break
            except IoQueueFullError:
                # Backpressure: drain the older half of our outstanding writes.
                drain = self.write_ids[: max(1, len(self.write_ids) // 2)]
                res = self.io.wait_all(drain)
                self._check(res.events)
        self.write_ids.append(wid)
        self._submit_offset += len(data)

    @staticmethod
    def _check(events):
        for ev in events:
            if not ev.ok:
                raise OSError(f"table write failed: {ev.error}")

    def finish(self) -> tuple[SstMeta, list[int]]:
        if self.record_count == 0:
            raise ValueError("cannot finish an empty table")
        if self._buf:
            chunk = bytes(self._buf)
            self._buf.clear()
            self._submit_data(chunk)
        pos = self._submit_offset
        if pos > self._block_start:
            self._index_entries.append(
                (
                    self._block_start,
                    pos - self._block_start,
                    _encode_key_parts(*self._last),
                )
            )

        index = bytearray(_U32.pack(len(self._index_entries)))
        for off, length, last_key in self._index_entries:
            index += struct.pack("<QI", off, length)
            index += last_key
        props = (
            struct.pack("<QI", self.record_count, self._content_crc)
            + _encode_key_parts(*self._first)
            + _encode_key_parts(*self._last)
        )
        index_off = pos
        props_off = index_off + len(index)
        fields = _FOOTER_FIELDS.pack(index_off, len(index), props_off, len(props))
        footer_crc = zlib.crc32(bytes(index) + props + fields)
        tail = bytes(index) + props + fields + _U32.pack(footer_crc) + MAGIC
        self._submit_write(tail)

        meta = SstMeta(
            file_id=self.file_id,
            level=self.level,
            smallest=InternalKey(
                self._first[0], self._first[1], RecordKind(self._first[2])
            ),
            largest=InternalKey(
                self._last[0], self._last[1], RecordKind(self._last[2])
            ),
            file_size=self._submit_offset,
            durability=Durability.VOLATILE,
            birth_epoch=self.birth_epoch,
            checksum=footer_crc,
        )
        ids = list(self.write_ids)
        if not self.async_mode:
            res = self.io.wait_all(ids)
            self._check(res.events)
            if not res.complete:
                raise OSError("table writes did not complete")
        return meta, ids


def build_sst(
    stream,
    io: IoEngine,
    path: str,
    file_id: int,
    level: int,
    *,
    buffer_size: int,
    target_size: int,
    birth_epoch: int = 0,
    async_mode: bool = False,
) -> tuple[SstMeta, list[int], IoFile]:
    """Write one table from an already-sorted record stream."""
    f = io.create(path)
    b = SstBuilder(
        io,
        f,
        file_id,
        level,
        buffer_size=buffer_size,
        target_size=target_size,
        birth_epoch=birth_epoch,
        async_mode=async_mode,
    )
    for rec in stream:
        b.add_record(rec)
    meta, ids = b.finish()
    return meta, ids, f


class SstReader:
    """Random and sequential access to one table file."""

    def __init__(self, path: str):
        self.path = path
        self._fd = os.open(path, os.O_RDONLY)
        try:
            self._load_footer()
        except Exception:
            os.close(self._fd)
            raise

    def _load_footer(self):
        size = os.fstat(self._fd).st_size
        if size < FOOTER_SIZE:
            raise UnreadableFileError(f"{self.path}: too small for a footer")
        tail = os.pread(self._fd, FOOTER_SIZE, size - FOOTER_SIZE)
        fields, crc_raw, magic = tail[:32], tail[32:36], tail[36:40]
        if magic != MAGIC:
            raise UnreadableFileError(f"{self.path}: bad magic {magic!r}")
        index_off, index_len, props_off, props_len = _FOOTER_FIELDS.unpack(fields)
        if props_off + props_len + FOOTER_SIZE != size or index_off + index_len != props_off:
            raise UnreadableFileError(f"{self.path}: footer geometry mismatch")
        blob = os.pread(self._fd, index_len + props_len, index_off)
        (stored_crc,) = _U32.unpack(crc_raw)
        if zlib.crc32(blob + fields) != stored_crc:
            raise UnreadableFileError(f"{self.path}: footer checksum mismatch")

        index = blob[:index_len]
        props = blob[index_len:]
        (count,) = _U32.unpack_from(index, 0)
        off = 4
        self._blocks: list[tuple[int, int]] = []
        self._block_last: list[tuple[bytes, int]] = []  # (user_key, -seqno)
        for _ in range(count):
            boff, blen = struct.unpack_from("<QI", index, off)
            off += 12
            last, off = decode_internal_key(index, off)
            self._blocks.append((boff, blen))
            self._block_last.append((last.user_key, -last.seqno))
        self.record_count, self.content_crc = struct.unpack_from("<QI", props, 0)
        self.smallest, p = decode_internal_key(props, 12)
        self.largest, _ = decode_internal_key(props, p)
        self.data_size = index_off
        self.footer_crc = stored_crc

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def get(self, user_key: bytes, snapshot_seqno: int | None = None):
        """Returns (found, value_or_None); tombstone reports found with None."""
        seek = (user_key, -(MAX_SEQNO if snapshot_seqno is None else snapshot_seqno))
        lo, hi = 0, len(self._block_last)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._block_last[mid] < seek:
                lo = mid + 1
            else:
                hi = mid
        if lo == len(self._blocks):
            return False, None
        boff, blen = self._blocks[lo]
        block = os.pread(self._fd, blen, boff)
        off, n = 0, len(block)
        while off < n:
            (klen,) = _U32.unpack_from(block, off)
            off += 4
            uk = block[off : off + klen]
            off += klen
            seqno, kind = _SEQ_KIND.unpack_from(block, off)
            off += 9
            (vlen,) = _U32.unpack_from(block, off)
            off += 4
            if uk == user_key and (snapshot_seqno is None or seqno <= snapshot_seqno):
                if kind == RecordKind.DELETE:
                    return True, None
                return True, bytes(block[off : off + vlen])
            if uk > user_key:
                return False, None
            off += vlen
        return False, None

    def iter_records(self, chunk_size: int = 256 * 1024):
        """Stream all records in order."""
        pending = b""
        pos = 0
        end = self.data_size
        while pos < end or pending:
            if pos < end:
                pending += os.pread(self._fd, min(chunk_size, end - pos), pos)
                pos += min(chunk_size, end - pos)
            off, n = 0, len(pending)
            while True:
                if off + 4 > n:
                    break
                (klen,) = _U32.unpack_from(pending, off)
                rec_end = off + 4 + klen + 9 + 4
                if rec_end > n:
                    break
                uk = pending[off + 4 : off + 4 + klen]
                seqno, kind = _SEQ_KIND.unpack_from(pending, off + 4 + klen)
                (vlen,) = _U32.unpack_from(pending, off + 4 + klen + 9)
                if rec_end + vlen > n:
                    break
                value = pending[rec_end : rec_end + vlen]
                yield KVRecord(
                    InternalKey(bytes(uk), seqno, RecordKind(kind)), bytes(value)
                )
                off = rec_end + vlen
            pending = pending[off:]
            if pos >= end and off == 0:
                if pending:
                    raise UnreadableFileError(
                        f"{self.path}: trailing bytes in data region"
                    )
                break

    def iter_raw(self, chunk_size: int = 256 * 1024):
        """Stream (user_key, seqno, kind, encoded_record) without decoding
        values; the encoded slice can be appended verbatim to a builder."""
        pending = b""
        pos = 0
        end = self.data_size
        while pos < end or pending:
            if pos < end:
                step = min(chunk_size, end - pos)
                pending += os.pread(self._fd, step, pos)
                pos += step
            off, n = 0, len(pending)
            while True:
                if off + 4 > n:
                    break
                (klen,) = _U32.unpack_from(pending, off)
                head_end = off + 4 + klen + 9 + 4
                if head_end > n:
                    break
                (vlen,) = _U32.unpack_from(pending, head_end - 4)
                rec_end = head_end + vlen
                if rec_end > n:
                    break
                uk = bytes(pending[off + 4 : off + 4 + klen])
                seqno, kind = _SEQ_KIND.unpack_from(pending, off + 4 + klen)
                yield uk, seqno, kind, bytes(pending[off:rec_end])
                off = rec_end
            pending = pending[off:]
            if pos >= end and off == 0:
                if pending:
                    raise UnreadableFileError(
                        f"{self.path}: trailing bytes in data region"
                    )
                break

    def iter_from(self, user_key: bytes):
        """Stream records whose user key is >= user_key."""
        seek = (user_key, -MAX_SEQNO)
        lo, hi = 0, len(self._block_last)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._block_last[mid] < seek:
                lo = mid + 1
            else:
                hi = mid
        for bidx in range(lo, len(self._blocks)):
            boff, blen = self._blocks[bidx]
            block = os.pread(self._fd, blen, boff)
            off, n = 0, len(block)
            while off < n:
                (klen,) = _U32.unpack_from(block, off)
                off += 4
                uk = bytes(block[off : off + klen])
                off += klen
                seqno, kind = _SEQ_KIND.unpack_from(block, off)
                off += 9
                (vlen,) = _U32.unpack_from(block, off)
                off += 4
                value = bytes(block[off : off + vlen])
                off += vlen
                if uk >= user_key:
                    yield KVRecord(
                        InternalKey(uk, seqno, RecordKind(kind)), value
                    )

    def verify_content(self, chunk_size: int = 1024 * 1024) -> bool:
        """Recompute the data-region checksum; True when it matches."""
        crc = 0
        pos = 0
        while pos < self.data_size:
            chunk = os.pread(self._fd, min(chunk_size, self.data_size - pos), pos)
            if not chunk:
                return False
            crc = zlib.crc32(chunk, crc)
            pos += len(chunk)
        return crc == self.content_crc


def open_sst(path: str) -> SstReader:
    return SstReader(path)


def verify_sst_file(path: str) -> bool:
    """Full verification: footer integrity plus data-region checksum."""
    try:
        r = SstReader(path)
    except (UnreadableFileError, OSError):
        return False
    try:
        return r.verify_content()
    finally:
        r.close()


def merge(children, drop_deletes: bool = False):
    """Merge sorted record streams, keeping only the newest per user key.

    Tombstones are emitted unless drop_deletes is set (bottom level).
    """
    heap = []
    for i, child in enumerate(children):
        it = iter(child)
        rec = next(it, None)
        if rec is not None:
            heap.append((rec.key.user_key, -rec.key.seqno, i, rec, it))
    heapq.heapify(heap)
    prev_key = None
    push = heapq.heappush
    pop = heapq.heappop
    while heap:
        uk, _, i, rec, it = pop(heap)
        nxt = next(it, None)
        if nxt is not None:
            push(heap, (nxt.key.user_key, -nxt.key.seqno, i, nxt, it))
        if uk == prev_key:
            continue
        prev_key = uk
        if drop_deletes and rec.key.kind == RecordKind.DELETE:
            continue
        yield rec


_DELETE = int(RecordKind.DELETE)


def merge_raw(children, drop_deletes: bool = False):
    """merge() over (user_key, seqno, kind, encoded) tuples; same semantics,
    no record-object construction."""
    heap = []
    for i, child in enumerate(children):
        it = iter(child)
        tup = next(it, None)
        if tup is not None:
            heap.append((tup[0], -tup[1], i, tup, it))
    heapq.heapify(heap)
    prev_key = None
    push = heapq.heappush
    pop = heapq.heappop
    while heap:
        uk, _, i, tup, it = pop(heap)
        nxt = next(it, None)
        if nxt is not None:
            push(heap, (nxt[0], -nxt[1], i, nxt, it))
        if uk == prev_key:
            continue
        prev_key = uk
        if drop_deletes and tup[2] == _DELETE:
            continue
        yield tup
