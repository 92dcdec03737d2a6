"""In-memory write buffer: newest record per user key, frozen for flush.

Entries are kept in a plain dict and ordered lazily: flush and scans sort
once at freeze time, which is cheaper in Python than maintaining a skiplist
per insert.  Byte accounting mirrors what the WAL appended, so rotation
decisions follow inserted record sizes, not live map size.
"""

from __future__ import annotations

from .model import InternalKey, KVRecord, RecordKind


def record_bytes(user_key: bytes, value: bytes) -> int:
    # Matches the encoded WAL record footprint.
    return 8 + 17 + len(user_key) + len(value)


class MemTable:
    MUTABLE = "mutable"
    IMMUTABLE = "immutable"

    def __init__(self, limit: int, wal_segment_id: int = 0):
        self.limit = limit
        self.wal_segment_id = wal_segment_id
        self.state = self.MUTABLE
        self.approximate_bytes = 0
        self.min_seqno = 0
        self.max_seqno = 0
        # user_key -> (seqno, kind, value); newest wins
        self._map: dict[bytes, tuple] = {}

    def __len__(self):
        return len(self._map)

    def insert(self, seqno: int, kind: int, user_key: bytes, value: bytes):
        if self.state != self.MUTABLE:
            raise RuntimeError("insert into immutable memtable")
        prev = self._map.get(user_key)
        if prev is None or prev[0] < seqno:
            self._map[user_key] = (seqno, kind, value)
        self.approximate_bytes += record_bytes(user_key, value)
        if not self.min_seqno:
            self.min_seqno = seqno
        self.max_seqno = max(self.max_seqno, seqno)

    @property
    def full(self) -> bool:
        return self.approximate_bytes >= self.limit

    def freeze(self):
        self.state = self.IMMUTABLE

    def get(self, user_key: bytes, snapshot_seqno: int | None = None):
        """Returns (found, value_or_None); tombstones report found with None."""
        entry = self._map.get(user_key)
        if entry is None:
            return False, None
        seqno, kind, value = entry
        if snapshot_seqno is not None and seqno > snapshot_seqno:
            return False, None
        if kind == RecordKind.DELETE:
            return True, None
        return True, value

    def sorted_records(self):
        """Yield KVRecords in internal-key order (single record per key)."""
        for user_key in sorted(self._map):
            seqno, kind, value = self._map[user_key]
            yield KVRecord(InternalKey(user_key, seqno, RecordKind(kind)), value)

    def sorted_entries(self):
        """Yield raw (user_key, seqno, kind, value) tuples in key order."""
        for user_key in sorted(self._map):
            seqno, kind, value = self._map[user_key]
            yield user_key, seqno, kind, value

    def sorted_records_from(self, start_key: bytes):
        for user_key in sorted(k for k in self._map if k >= start_key):
            seqno, kind, value = self._map[user_key]
            yield KVRecord(InternalKey(user_key, seqno, RecordKind(kind)), value)
