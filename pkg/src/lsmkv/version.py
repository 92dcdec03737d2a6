"""Live file-set tracking: immutable Version snapshots and the VersionSet.

The VersionSet owns the engine-wide version lock.  Mutations happen only at
flush/compaction/retirement commit points; readers take the current Version
reference, which is never modified after construction (copy-on-write).
"""

from __future__ import annotations

import threading
from bisect import bisect_left

from . import manifest as mf
from .errors import CorruptionError
from .model import Durability, SstMeta


class Version:
    """Immutable snapshot of the per-level file sets."""

    __slots__ = ("levels", "_l1_smallest")

    def __init__(self, levels):
        # L0 newest-first (file id descending); deeper levels by smallest key.
        norm = []
        for n, files in enumerate(levels):
            if n == 0:
                norm.append(tuple(sorted(files, key=lambda m: -m.file_id)))
            else:
                norm.append(
                    tuple(sorted(files, key=lambda m: m.smallest.user_key))
                )
        self.levels = tuple(norm)
        self._l1_smallest = [
            [m.smallest.user_key for m in files] for files in self.levels
        ]

    def level_bytes(self, n: int) -> int:
        return sum(m.file_size for m in self.levels[n])

    def file_count(self, n: int) -> int:
        return len(self.levels[n])

    def all_files(self):
        for files in self.levels:
            yield from files

    def files_overlapping(self, n: int, lo: bytes, hi: bytes):
        return [m for m in self.levels[n] if m.overlaps_user_range(lo, hi)]

    def find_file(self, n: int, user_key: bytes) -> SstMeta | None:
        """Level >= 1 lookup via binary search over disjoint ranges."""
        keys = self._l1_smallest[n]
        idx = bisect_left(keys, user_key)
        files = self.levels[n]
        if idx < len(files) and files[idx].smallest.user_key == user_key:
            return files[idx]
        if idx > 0 and files[idx - 1].contains_user_key(user_key):
            return files[idx - 1]
        return None

    def max_populated_level(self) -> int:
        top = 0
        for n, files in enumerate(self.levels):
            if files:
                top = n
        return top

    def check_disjoint(self):
        """Assert pairwise-disjoint user-key ranges at every level >= 1."""
        for n in range(1, len(self.levels)):
            files = self.levels[n]
            for a, b in zip(files, files[1:]):
                if a.largest.user_key >= b.smallest.user_key:
                    raise CorruptionError(
                        f"level {n}: {a.file_id} [{a.smallest.user_key!r}..."
                        f"{a.largest.user_key!r}] overlaps {b.file_id} "
                        f"[{b.smallest.user_key!r}...]"
                    )


class VersionSet:
    """Mutable engine state: current version, id counters, manifest writer."""

    def __init__(self, directory: str, max_levels: int = 7):
        self.directory = directory
        self.max_levels = max_levels
        self.lock = threading.RLock()
        self.current = Version([[] for _ in range(max_levels)])
        self.metas_by_id: dict[int, SstMeta] = {}
        self.live_ids: set[int] = set()
        self.next_file_id = 1
        self.last_seqno = 0
        self.next_epoch = 1
        self.writer: mf.ManifestWriter | None = None

    # -- id allocation (under lock) ---------------------------------------

    def allocate_file_id(self) -> int:
        with self.lock:
            fid = self.next_file_id
            self.next_file_id += 1
            return fid

    def allocate_epoch(self) -> int:
        with self.lock:
            e = self.next_epoch
            self.next_epoch += 1
            return e

    # -- commits -----------------------------------------------------------

    def apply_group(self, edits, sync: bool = False):
        """Apply an edit group to the live version and append it durably."""
        with self.lock:
            levels = [list(files) for files in self.current.levels]
            for e in edits:
                self._apply_one(levels, e)
            new_version = Version(levels)
            new_version.check_disjoint()
            if self.writer is not None:
                self.writer.append_group(edits, sync=sync)
            self.current = new_version
            return new_version

    def _apply_one(self, levels, e):
        if isinstance(e, mf.AddFile):
            m = e.meta
            if m.file_id in self.metas_by_id and m.file_id in self.live_ids:
                raise CorruptionError(f"file id {m.file_id} added twice")
            self.metas_by_id[m.file_id] = m
            self.live_ids.add(m.file_id)
            levels[m.level].append(m)
            self.next_file_id = max(self.next_file_id, m.file_id + 1)
            self.last_seqno = max(self.last_seqno, m.largest.seqno)
            self.next_epoch = max(self.next_epoch, m.birth_epoch + 1)
        elif isinstance(e, mf.DeleteFile):
            levels[e.level] = [m for m in levels[e.level] if m.file_id != e.file_id]
            self.live_ids.discard(e.file_id)
        elif isinstance(e, mf.MarkDurable):
            for fid in e.file_ids:
                meta = self.metas_by_id.get(fid)
                if meta is not None:
                    meta.durability = Durability.DURABLE
            self.next_epoch = max(self.next_epoch, e.epoch + 1)
        elif isinstance(e, mf.LedgerOpen):
            self.next_epoch = max(self.next_epoch, e.epoch + 1)
        elif isinstance(e, mf.LedgerClose):
            self.next_epoch = max(self.next_epoch, e.epoch + 1)
        else:
            raise TypeError(f"unknown edit {e!r}")

    def observe_seqno(self, seqno: int):
        with self.lock:
            self.last_seqno = max(self.last_seqno, seqno)

    def meta(self, file_id: int) -> SstMeta | None:
        return self.metas_by_id.get(file_id)

    def close(self):
        if self.writer is not None:
            self.writer.close()
            self.writer = None


def replay_manifest(directory: str, path: str, max_levels: int = 7):
    """Rebuild a VersionSet plus raw ledger edits from a manifest file.

    Returns (version_set, ledger_edits) where ledger_edits preserves the
    ordered LedgerOpen/MarkDurable/LedgerClose stream for the ledger to
    reconstruct entry states.
    """
    vs = VersionSet(directory, max_levels)
    ledger_edits = []
    levels = [list(files) for files in vs.current.levels]
    for e in mf.read_edits(path):
        vs._apply_one(levels, e)
        if isinstance(e, (mf.LedgerOpen, mf.MarkDurable, mf.LedgerClose)):
            ledger_edits.append(e)
    vs.current = Version(levels)
    return vs, ledger_edits
