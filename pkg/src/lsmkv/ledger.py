"""Generation-dependency ledger: deferred durability check-up and deletion.

Every compaction records one entry {parents, offspring, fsync batch}.  The
parent files stay on disk, backing the durability of the offspring, until
the offspring's compound fsync batch is known complete.  The check-up runs
when offspring are about to serve as inputs to a later compaction; an
outlier sweep retires entries the workload never touches again.

Entries persist inside the MANIFEST (ledger_open / mark_durable /
ledger_close records), so recovery has a single source of truth.
"""

from __future__ import annotations

import os
import threading
import time

from . import crashpoints
from . import manifest as mf
from .errors import CorruptionError
from .io_engine import IoEngine
from .metrics import EngineMetrics
from .model import Durability, SstMeta, sst_filename
from .sstable import SstBuilder, merge, open_sst, verify_sst_file

PENDING = "pending"
DURABLE = "durable"
RETIRED = "retired"


class LedgerEntry:
    __slots__ = (
        "epoch",
        "parents",
        "offspring",
        "fsync_batch_id",
        "state",
        "opened_at",
        "batch_event",
        "drop_deletes",
        "handles",
    )

    def __init__(self, epoch, parents, offspring, fsync_batch_id,
                 drop_deletes=False, handles=()):
        self.epoch = epoch
        self.parents = tuple(parents)
        self.offspring = tuple(offspring)
        self.fsync_batch_id = fsync_batch_id
        self.state = PENDING
        self.opened_at = time.monotonic()
        self.batch_event = None
        self.drop_deletes = drop_deletes
        self.handles = tuple(handles)

    def __repr__(self):
        return (
            f"LedgerEntry(epoch={self.epoch}, state={self.state}, "
            f"parents={self.parents}, offspring={self.offspring})"
        )


class DurabilityLedger:
    def __init__(
        self,
        io: IoEngine,
        version_set,
        metrics: EngineMetrics,
        *,
        sst_path,
        delete_file,
        merge_buffer_size: int = 1024 * 1024,
    ):
        self.io = io
        self.version_set = version_set
        self.metrics = metrics
        self.sst_path = sst_path          # file_id -> path
        self.delete_file = delete_file    # file_id -> None (unlink + cache evict)
        self.merge_buffer_size = merge_buffer_size
        self._lock = threading.RLock()
        self.entries: dict[int, LedgerEntry] = {}
        self._by_offspring: dict[int, int] = {}

    # -- entry creation ------------------------------------------------------

    def open_entry(self, epoch, parent_metas, offspring_metas, fsync_batch_id,
                   *, drop_deletes=False, handles=()) -> int:
        """Commit a compaction: version edit plus a pending ledger entry.

        Group order matters for torn-tail recovery: offspring adds first,
        then the ledger record, then the parent removals.
        """
        edits = [mf.AddFile(m) for m in offspring_metas]
        edits.append(
            mf.LedgerOpen(
                epoch,
                tuple(m.file_id for m in parent_metas),
                tuple(m.file_id for m in offspring_metas),
            )
        )
        edits.extend(mf.DeleteFile(m.level, m.file_id) for m in parent_metas)
        entry = LedgerEntry(
            epoch,
            (m.file_id for m in parent_metas),
            (m.file_id for m in offspring_metas),
            fsync_batch_id,
            drop_deletes=drop_deletes,
            handles=handles,
        )
        with self.version_set.lock:
            self.version_set.apply_group(edits, sync=False)
            with self._lock:
                self.entries[epoch] = entry
                for fid in entry.offspring:
                    self._by_offspring[fid] = epoch
        return epoch

    # -- check-up ----------------------------------------------------------------

    def checkup(self, input_metas) -> list[int]:
        """Retire the birth epochs of any volatile input files.

        A batch still in flight forces a synchronous wait (the rare
        fallback); an already-durable epoch costs metadata lookups only,
        no I/O.
        """
        return self._checkup(input_metas, blocking=True)

    def checkup_ready(self, input_metas) -> list[int]:
        """Non-blocking check-up: retire input epochs whose batches already
        completed; pending ones stay open, protected by the retained
        parents, until a later check-up or the sweep catches them."""
        return self._checkup(input_metas, blocking=False)

    def _checkup(self, input_metas, blocking: bool) -> list[int]:
        self.metrics.add_counter("checkup_count")
        with self._lock:
            epochs = sorted(
                {
                    self._by_offspring[m.file_id]
                    for m in input_metas
                    if m.durability == Durability.VOLATILE
                    and m.file_id in self._by_offspring
                }
            )
        retired = []
        for epoch in epochs:
            if self._retire_epoch(epoch, origin="checkup", blocking=blocking):
                retired.append(epoch)
        return retired

    def outlier_sweep(self, max_age: float) -> list[int]:
        """Retire pending entries older than max_age (cold outlier batches)."""
        self.metrics.add_counter("sweep_runs")
        now = time.monotonic()
        with self._lock:
            stale = sorted(
                e.epoch
                for e in self.entries.values()
                if e.state == PENDING and now - e.opened_at >= max_age
            )
        retired = []
        for epoch in stale:
            if self._retire_epoch(epoch, origin="sweep", blocking=True):
                retired.append(epoch)
                crashpoints.hit("sweep-after-retire")
        return retired

    def force_retire_all(self) -> list[int]:
        """Retire every open entry (clean shutdown)."""
        return self.outlier_sweep(max_age=-1.0)

    # -- retirement core ----------------------------------------------------------

    def _retire_epoch(self, epoch: int, origin: str, blocking: bool = True) -> bool:
        with self._lock:
            entry = self.entries.get(epoch)
            if entry is None or entry.state == RETIRED:
                return False
            ev = entry.batch_event
            batch_id = entry.fsync_batch_id

        if ev is None:
            got = self.io.poll_completions(only=[batch_id])
            if got:
                ev = got[0]
            elif not self.io.is_complete(batch_id):
                if not blocking:
                    return False
                # Batch still in flight: the synchronous fallback.
                t0 = time.monotonic()
                self.metrics.log("checkup_wait", epoch=epoch, origin=origin)
                res = self.io.wait_all([batch_id])
                if origin != "sweep":
                    self.metrics.add_counter("fallback_fsync_waits")
                    self.metrics.add_phase_times(
                        0.0, 0.0, time.monotonic() - t0
                    )
                if res.events:
                    ev = res.events[0]
            with self._lock:
                if ev is not None and entry.batch_event is None:
                    entry.batch_event = ev
                ev = entry.batch_event
            if ev is None:
                # Another thread harvested and is retiring concurrently; let
                # it finish and report idempotently.
                self.io.wait_all([batch_id], timeout=0)
                with self._lock:
                    if entry.state == RETIRED:
                        return False
                    ev = entry.batch_event
                if ev is None:
                    raise CorruptionError(
                        f"epoch {epoch}: batch {batch_id} event lost"
                    )
        else:
            with self._lock:
                if entry.state == RETIRED:
                    return False

        self.metrics.log_at(ev.complete_time, "batch_complete", epoch=epoch)
        if not ev.ok:
            self.retry_fsync(entry)

        # Ancestors first: parents that are themselves pending offspring
        # must retire before this entry deletes them (transitive check-up).
        # In non-blocking mode a still-pending ancestor defers this
        # retirement instead; retained parents keep everything safe.
        for pid in entry.parents:
            anc = self.entry_for_offspring(pid)
            if anc is not None and anc.state != RETIRED:
                self._retire_epoch(
                    anc.epoch, origin="transitive", blocking=blocking
                )
                with self._lock:
                    if anc.state != RETIRED:
                        return False

        return self._finalize_retirement(entry)

    def _finalize_retirement(self, entry: LedgerEntry) -> bool:
        with self.version_set.lock:
            with self._lock:
                if entry.state == RETIRED:
                    return False
                entry.state = DURABLE
                edits = [
                    mf.MarkDurable(entry.epoch, entry.offspring),
                    mf.LedgerClose(entry.epoch, mf.OUTCOME_RETIRED),
                ]
                self.version_set.apply_group(edits, sync=True)
                entry.state = RETIRED
                for fid in entry.offspring:
                    self._by_offspring.pop(fid, None)
        crashpoints.hit("checkup-after-mark-durable")
        for fid in entry.parents:
            self.delete_file(fid)
        crashpoints.hit("checkup-after-unlink")
        for h in entry.handles:
            self.io.close(h)
        self.metrics.add_counter("retired_epochs")
        self.metrics.log("retired", epoch=entry.epoch)
        return True

    # -- failed fsync handling ------------------------------------------------------

    def retry_fsync(self, entry: LedgerEntry):
        """Repair a failed batch: re-fsync, then rebuild from parents."""
        failed_paths = set(entry.batch_event.error_files)
        handles = {h.path: h for h in entry.handles}
        still_bad = []
        ids = {}
        for path in failed_paths:
            h = handles.get(path) or self.io.open_for_sync(path)
            ids[self.io.submit_fsync(h)] = path
        res = self.io.wait_all(list(ids))
        for got in res.events:
            if not got.ok:
                still_bad.append(ids[got.req_id])
        for path in still_bad:
            fid = next(
                fid for fid in entry.offspring if self.sst_path(fid) == path
            )
            self._rebuild_offspring(entry, fid)
        with self._lock:
            # Every member is durable now, by retry or by rebuild.
            entry.batch_event.ok = True
            entry.batch_event.error = None
            entry.batch_event.error_files = ()

    def _rebuild_offspring(self, entry: LedgerEntry, file_id: int):
        """Regenerate one output file from the retained parents."""
        meta = self.version_set.meta(file_id)
        parent_metas = [self.version_set.meta(fid) for fid in entry.parents]
        if any(m is None for m in parent_metas):
            raise CorruptionError(
                f"epoch {entry.epoch}: parents missing while rebuilding "
                f"{file_id}; durability chain broken"
            )
        readers = []
        try:
            for m in parent_metas:
                readers.append(open_sst(self.sst_path(m.file_id)))
            lo = (meta.smallest.user_key, -meta.smallest.seqno)
            hi = (meta.largest.user_key, -meta.largest.seqno)
            tmp_path = self.sst_path(file_id) + ".rebuild"
            f = self.io.create(tmp_path)
            builder = SstBuilder(
                self.io,
                f,
                file_id,
                meta.level,
                buffer_size=self.merge_buffer_size,
                target_size=meta.file_size + 1,
                birth_epoch=meta.birth_epoch,
                async_mode=False,
            )
            for rec in merge(
                [r.iter_records() for r in readers],
                drop_deletes=entry.drop_deletes,
            ):
                k = (rec.key.user_key, -rec.key.seqno)
                if k < lo:
                    continue
                if k > hi:
                    break
                builder.add_record(rec)
            rebuilt, _ = builder.finish()
            wid = self.io.submit_fsync(f)
            res = self.io.wait_all([wid])
            if not res.all_ok:
                raise CorruptionError(f"rebuild fsync failed for {tmp_path}")
            self.io.close(f)
            if rebuilt.checksum != meta.checksum or rebuilt.file_size != meta.file_size:
                raise CorruptionError(
                    f"rebuild of {file_id} diverged from original content"
                )
            os.replace(tmp_path, self.sst_path(file_id))
        finally:
            for r in readers:
                r.close()

    # -- introspection ----------------------------------------------------------------

    def open_entries(self) -> list[LedgerEntry]:
        with self._lock:
            return [e for e in self.entries.values() if e.state != RETIRED]

    def entry_for_offspring(self, file_id: int) -> LedgerEntry | None:
        with self._lock:
            epoch = self._by_offspring.get(file_id)
            return self.entries.get(epoch) if epoch is not None else None

    def dump(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "epoch": e.epoch,
                    "state": e.state,
                    "parents": list(e.parents),
                    "offspring": list(e.offspring),
                    "age_seconds": time.monotonic() - e.opened_at,
                }
                for e in sorted(self.entries.values(), key=lambda x: x.epoch)
            ]


def rebuild_entries_from_edits(ledger_edits) -> dict[int, dict]:
    """Fold the manifest's ledger records into {epoch: status} maps."""
    entries: dict[int, dict] = {}
    for e in ledger_edits:
        if isinstance(e, mf.LedgerOpen):
            entries[e.epoch] = {
                "parents": e.parents,
                "offspring": e.offspring,
                "durable_marked": False,
                "closed": False,
                "outcome": None,
            }
        elif isinstance(e, mf.MarkDurable):
            if e.epoch in entries:
                entries[e.epoch]["durable_marked"] = True
        elif isinstance(e, mf.LedgerClose):
            if e.epoch in entries:
                entries[e.epoch]["closed"] = True
                entries[e.epoch]["outcome"] = e.outcome
    return entries


def resolve_on_recovery(version_set, ledger_edits, sst_path, delete_path_fn=None):
    """Settle every open ledger entry found in the manifest.

    Offspring that verify clean become durable and their parents are
    deleted; a damaged or missing offspring aborts its whole batch, keeping
    the parents live instead.  Also drops any volatile file left without an
    open entry by a torn commit group.

    Returns a report dict for logging/tests.
    """
    vs = version_set
    entries = rebuild_entries_from_edits(ledger_edits)
    report = {"retired": [], "aborted": [], "orphans_dropped": []}
    delete_path = delete_path_fn or os.unlink
    # Offspring discarded by an aborted entry: their records live on in
    # that entry's restored parents, so later entries may skip them.
    resolved_away: set[int] = set()

    for epoch in sorted(e for e, st in entries.items() if not st["closed"]):
        st = entries[epoch]
        offspring_metas = [vs.meta(fid) for fid in st["offspring"]]
        valid = True
        for fid, meta in zip(st["offspring"], offspring_metas):
            if meta is None or not verify_sst_file(sst_path(fid)):
                valid = False
                break
            if meta.file_size != os.path.getsize(sst_path(fid)):
                valid = False
                break

        if valid:
            edits = []
            for pid in st["parents"]:
                if pid in vs.live_ids:
                    # Torn group: the parent removals never hit the log.
                    pm = vs.meta(pid)
                    edits.append(mf.DeleteFile(pm.level, pid))
            edits.append(mf.MarkDurable(epoch, st["offspring"]))
            edits.append(mf.LedgerClose(epoch, mf.OUTCOME_RETIRED))
            vs.apply_group(edits, sync=True)
            for pid in st["parents"]:
                try:
                    delete_path(sst_path(pid))
                except FileNotFoundError:
                    pass
            report["retired"].append(epoch)
        else:
            edits = []
            for fid, meta in zip(st["offspring"], offspring_metas):
                if meta is not None and fid in vs.live_ids:
                    edits.append(mf.DeleteFile(meta.level, fid))
            for pid in st["parents"]:
                if pid in resolved_away:
                    # Covered by an earlier aborted entry's restored parents.
                    continue
                pm = vs.meta(pid)
                if pm is None or not os.path.exists(sst_path(pid)):
                    raise CorruptionError(
                        f"epoch {epoch}: offspring invalid and parent {pid} "
                        f"missing; recovery cannot proceed"
                    )
                if pid not in vs.live_ids:
                    edits.append(mf.AddFile(pm))
            edits.append(mf.LedgerClose(epoch, mf.OUTCOME_ABORTED))
            vs.apply_group(edits, sync=True)
            for fid in st["offspring"]:
                resolved_away.add(fid)
                try:
                    delete_path(sst_path(fid))
                except FileNotFoundError:
                    pass
            report["aborted"].append(epoch)

    # Volatile files with no open entry can only come from a torn commit
    # group whose ledger record was lost; their inputs are still live.
    orphan = [
        m
        for m in vs.current.all_files()
        if m.durability == Durability.VOLATILE
    ]
    if orphan:
        edits = [mf.DeleteFile(m.level, m.file_id) for m in orphan]
        vs.apply_group(edits, sync=True)
        for m in orphan:
            try:
                delete_path(sst_path(m.file_id))
            except FileNotFoundError:
                pass
            report["orphans_dropped"].append(m.file_id)
    return report


def check_durable_ancestry(version_set, ledger: DurabilityLedger, sst_dir: str):
    """Invariant probe: every live volatile file is offspring of exactly one
    open entry whose parents transitively reach durable files on disk."""
    vs = version_set

    def path_of(fid):
        return os.path.join(sst_dir, sst_filename(fid))

    def walk(fid, depth=0):
        if depth > 64:
            raise AssertionError(f"ancestry of {fid} does not terminate")
        pm = vs.meta(fid)
        if pm is None:
            raise AssertionError(f"file {fid} unknown to the version registry")
        if not os.path.exists(path_of(fid)):
            raise AssertionError(f"ancestor file {fid} missing on disk")
        if pm.durability == Durability.DURABLE:
            return
        entry = ledger.entry_for_offspring(fid)
        if entry is None or entry.state == RETIRED:
            raise AssertionError(f"volatile file {fid} has no open ledger entry")
        for pid in entry.parents:
            walk(pid, depth + 1)

    for meta in vs.current.all_files():
        if meta.durability == Durability.DURABLE:
            if not os.path.exists(path_of(meta.file_id)):
                raise AssertionError(
                    f"durable file {meta.file_id} missing on disk"
                )
        else:
            walk(meta.file_id)
