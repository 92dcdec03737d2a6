"""The storage engine: foreground write path, flush, recovery, lifecycle.

Thread layout: N foreground writers serialize on the write lock for WAL
append + memtable insert; one flush worker turns immutable memtables into
durably fsynced level-0 tables; compaction workers run the async pipeline;
a timer thread sweeps outlier ledger entries.  Version state changes only
under the version lock at commit points.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import deque

from . import crashpoints
from . import manifest as mf
from .compaction import Compactor
from .errors import EngineClosedError, EngineError
from .io_engine import IoEngine
from .ledger import DurabilityLedger, check_durable_ancestry, resolve_on_recovery
from .memtable import MemTable
from .metrics import EngineMetrics, StallReason
from .model import (
    Durability,
    EngineConfig,
    RecordKind,
    sst_filename,
    wal_filename,
)
from .sstable import SstBuilder, SstReader, merge
from .version import VersionSet, replay_manifest
from .wal import WalWriter, replay as wal_replay

log = logging.getLogger("lsmkv.engine")


class Engine:
    def __init__(self, directory: str, config: EngineConfig | None = None):
        self.directory = str(directory)
        self.config = (config or EngineConfig()).validate()
        os.makedirs(self.directory, exist_ok=True)

        self.metrics = EngineMetrics()
        self.io = IoEngine(
            self.config.io_backend,
            sim_write_latency_us_per_mib=self.config.sim_write_latency_us_per_mib,
            sim_fsync_latency_us=self.config.sim_fsync_latency_us,
            sim_fsync_latency_us_per_mib=self.config.sim_fsync_latency_us_per_mib,
            pool_size=self.config.io_pool_size,
            max_in_flight=self.config.io_max_in_flight,
        )
        self.closed = False
        self._bg_error: Exception | None = None

        self._write_lock = threading.RLock()
        self._stall_cond = threading.Condition()
        self._flush_cond = threading.Condition()
        self._immutables: deque[MemTable] = deque()
        self._readers: dict[int, SstReader] = {}
        self._readers_lock = threading.Lock()

        manifest_path = os.path.join(self.directory, mf.MANIFEST_NAME)
        recovering = os.path.exists(manifest_path)
        self.vs, ledger_edits = replay_manifest(
            self.directory, manifest_path, self.config.max_levels
        )
        self.vs.writer = mf.ManifestWriter(manifest_path)
        self.ledger = DurabilityLedger(
            self.io,
            self.vs,
            self.metrics,
            sst_path=self._sst_path,
            delete_file=self._delete_sst,
            merge_buffer_size=self.config.merge_buffer_size,
        )
        self.recovery_report = None
        if recovering:
            self.recovery_report = resolve_on_recovery(
                self.vs, ledger_edits, self._sst_path, self._unlink_path
            )
            self._collect_garbage()

        self._seqno = self.vs.last_seqno
        self._wal_segment_id = self._max_wal_segment()
        if recovering:
            self._replay_wals()

        self._wal_segment_id += 1
        self._mutable = MemTable(self.config.memtable_limit, self._wal_segment_id)
        self._wal = WalWriter(
            self._wal_path(self._wal_segment_id), self.config.wal_fsync_each_write
        )

        self.compactor = Compactor(
            self.io,
            self.vs,
            self.ledger,
            self.config,
            self.metrics,
            self._sst_path,
            on_commit=self._on_background_commit,
        )
        self._stop_flush = False
        self._flush_thread = threading.Thread(
            target=self._flush_loop, name="flush", daemon=True
        )
        self._flush_thread.start()
        self.compactor.start_workers(self.config.compaction_threads)
        self._sweep_stop = threading.Event()
        self._sweep_thread = threading.Thread(
            target=self._sweep_loop, name="ledger-sweep", daemon=True
        )
        self._sweep_thread.start()

    # -- paths ----------------------------------------------------------------

    def _sst_path(self, file_id: int) -> str:
        return os.path.join(self.directory, sst_filename(file_id))

    def _wal_path(self, segment_id: int) -> str:
        return os.path.join(self.directory, wal_filename(segment_id))

    def _max_wal_segment(self) -> int:
        top = 0
        for name in os.listdir(self.directory):
            if name.startswith("wal-") and name.endswith(".log"):
                try:
                    top = max(top, int(name[4:-4]))
                except ValueError:
                    continue
        return top

    # -- recovery ----------------------------------------------------------------

    def _replay_wals(self):
        """Replay surviving WAL segments, then flush them durably so the old
        segments can be deleted; keeps the crash matrix enumerable."""
        segments = sorted(
            int(n[4:-4])
            for n in os.listdir(self.directory)
            if n.startswith("wal-") and n.endswith(".log")
        )
        tables: list[MemTable] = []
        current: MemTable | None = None
        for seg in segments:
            for seqno, kind, user_key, value in wal_replay(self._wal_path(seg)):
                if current is None:
                    current = MemTable(self.config.memtable_limit, seg)
                    tables.append(current)
                current.insert(seqno, kind, user_key, value)
                self._seqno = max(self._seqno, seqno)
                if current.full:
                    current.freeze()
                    current = None
        for table in tables:
            table.freeze()
            if len(table):
                self._flush_table(table)
        for seg in segments:
            self._unlink_path(self._wal_path(seg))
        self.vs.observe_seqno(self._seqno)

    def _collect_garbage(self):
        """Unlink table files that are neither live nor awaiting retirement."""
        keep = set(self.vs.live_ids)
        for entry in self.ledger.open_entries():
            keep.update(entry.parents)
            keep.update(entry.offspring)
        for name in os.listdir(self.directory):
            if not (name.startswith("sst-") and name.endswith(".sst")):
                continue
            try:
                fid = int(name[4:-4])
            except ValueError:
                continue
            if fid not in keep:
                self._unlink_path(os.path.join(self.directory, name))

    @staticmethod
    def _unlink_path(path: str):
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass

    # -- foreground write path -----------------------------------------------------

    def put(self, user_key: bytes, value: bytes) -> int:
        return self._write(user_key, value, RecordKind.PUT)

    def delete(self, user_key: bytes) -> int:
        return self._write(user_key, b"", RecordKind.DELETE)

    def _write(self, user_key: bytes, value: bytes, kind: RecordKind) -> int:
        if self.closed:
            raise EngineClosedError("engine is closed")
        if len(value) > self.config.max_value_size:
            raise ValueError(
                f"value of {len(value)} bytes exceeds max_value_size"
            )
        self._check_bg_error()
        self._maybe_stall()
        with self._write_lock:
            seqno = self._seqno + 1
            self._wal.append(seqno, kind, user_key, value)
            crashpoints.hit("wal-append-before-memtable")
            self._seqno = seqno
            self._mutable.insert(seqno, kind, user_key, value)
            self.metrics.user_bytes += len(user_key) + len(value)
            self.metrics.wal_bytes += 25 + len(user_key) + len(value)
            if self._mutable.full:
                self._rotate_locked()
        return seqno

    def rotate(self):
        """Force rotation of the mutable memtable (test/maintenance hook)."""
        with self._write_lock:
            if len(self._mutable):
                self._rotate_locked()

    def _rotate_locked(self):
        imm = self._mutable
        imm.freeze()
        self._immutables.append(imm)
        self._wal.close()
        self._wal_segment_id += 1
        self._mutable = MemTable(self.config.memtable_limit, self._wal_segment_id)
        self._wal = WalWriter(
            self._wal_path(self._wal_segment_id), self.config.wal_fsync_each_write
        )
        crashpoints.hit("rotate-after")
        with self._flush_cond:
            self._flush_cond.notify_all()

    def _stall_reason(self) -> str | None:
        if len(self._immutables) > self.config.max_immutable_memtables:
            return StallReason.TOO_MANY_IMMUTABLES
        if self.vs.current.file_count(0) > self.config.l0_stall_limit:
            return StallReason.TOO_MANY_L0
        return None

    def _maybe_stall(self):
        reason = self._stall_reason()
        if reason is None:
            return
        self.metrics.stall_enter(reason)
        try:
            with self._stall_cond:
                while not self.closed and self._stall_reason() is not None:
                    self._check_bg_error()
                    self._stall_cond.wait(0.02)
        finally:
            self.metrics.stall_exit()

    def _on_background_commit(self):
        with self._stall_cond:
            self._stall_cond.notify_all()

    def _check_bg_error(self):
        err = self._bg_error or self.compactor.error
        if err is not None:
            raise EngineError(f"background work failed: {err}") from err

    # -- reads --------------------------------------------------------------------

    def get(self, user_key: bytes) -> bytes | None:
        if self.closed:
            raise EngineClosedError("engine is closed")
        for attempt in (0, 1):
            try:
                return self._get_once(user_key)
            except FileNotFoundError:
                # A table retired between snapshot and open; retry once.
                if attempt:
                    raise
        return None

    def _get_once(self, user_key: bytes) -> bytes | None:
        with self._write_lock:
            mut = self._mutable
            imms = tuple(self._immutables)
            version = self.vs.current
        found, value = mut.get(user_key)
        if found:
            return value
        for imm in reversed(imms):
            found, value = imm.get(user_key)
            if found:
                return value
        for meta in version.levels[0]:  # newest first
            if meta.contains_user_key(user_key):
                found, value = self._reader(meta.file_id).get(user_key)
                if found:
                    return value
        for n in range(1, len(version.levels)):
            meta = version.find_file(n, user_key)
            if meta is not None:
                found, value = self._reader(meta.file_id).get(user_key)
                if found:
                    return value
        return None

    def scan(self):
        """Yield (user_key, value) for every live record, in key order."""
        if self.closed:
            raise EngineClosedError("engine is closed")
        with self._write_lock:
            mut = self._mutable
            imms = tuple(self._immutables)
            version = self.vs.current
        children = [list(mut.sorted_records())]
        children.extend(list(im.sorted_records()) for im in imms)
        for meta in version.levels[0]:
            children.append(self._reader(meta.file_id).iter_records())
        for n in range(1, len(version.levels)):
            files = version.levels[n]
            if files:
                children.append(self._level_iter(list(files)))
        for rec in merge(children, drop_deletes=True):
            yield rec.key.user_key, rec.value

    def range_scan(self, start_key: bytes, count: int):
        """Up to `count` live (key, value) pairs with key >= start_key."""
        if self.closed:
            raise EngineClosedError("engine is closed")
        with self._write_lock:
            mut = self._mutable
            imms = tuple(self._immutables)
            version = self.vs.current
        children = [list(mut.sorted_records_from(start_key))]
        children.extend(list(im.sorted_records_from(start_key)) for im in imms)
        for meta in version.levels[0]:
            if meta.largest.user_key >= start_key:
                children.append(self._reader(meta.file_id).iter_from(start_key))
        for n in range(1, len(version.levels)):
            files = [
                m for m in version.levels[n] if m.largest.user_key >= start_key
            ]
            if files:
                children.append(self._level_iter(files, start_key))
        out = []
        for rec in merge(children, drop_deletes=True):
            out.append((rec.key.user_key, rec.value))
            if len(out) >= count:
                break
        return out

    def _level_iter(self, files, start_key: bytes | None = None):
        for meta in files:
            reader = self._reader(meta.file_id)
            if start_key is None:
                yield from reader.iter_records()
            else:
                yield from reader.iter_from(start_key)

    def _reader(self, file_id: int) -> SstReader:
        with self._readers_lock:
            r = self._readers.get(file_id)
            if r is not None:
                return r
        r = SstReader(self._sst_path(file_id))
        with self._readers_lock:
            return self._readers.setdefault(file_id, r)

    def _delete_sst(self, file_id: int):
        with self._readers_lock:
            r = self._readers.pop(file_id, None)
        if r is not None:
            r.close()
        self._unlink_path(self._sst_path(file_id))

    # -- flush -------------------------------------------------------------------

    def _flush_loop(self):
        while True:
            with self._flush_cond:
                if self._stop_flush and not self._immutables:
                    return
                if not self._immutables:
                    self._flush_cond.wait(0.02)
                    continue
            with self._write_lock:
                imm = self._immutables[0] if self._immutables else None
            if imm is None:
                continue
            try:
                self._flush_table(imm)
            except Exception as e:  # noqa: BLE001 - flush retries, WAL retained
                self._bg_error = e
                log.exception("flush failed; WAL retained")
                time.sleep(0.1)
                continue
            with self._write_lock:
                if self._immutables and self._immutables[0] is imm:
                    self._immutables.popleft()
            with self._stall_cond:
                self._stall_cond.notify_all()
            self.compactor.kick()

    def _flush_table(self, imm: MemTable):
        """Build one durable L0 table from a frozen memtable; returns its meta."""
        if not len(imm):
            self._unlink_path(self._wal_path(imm.wal_segment_id))
            return None
        fid = self.vs.allocate_file_id()
        epoch = self.vs.allocate_epoch()
        f = self.io.create(self._sst_path(fid))
        try:
            builder = SstBuilder(
                self.io,
                f,
                fid,
                0,
                buffer_size=self.config.merge_buffer_size,
                # One table per memtable: never roll during flush.
                target_size=max(
                    self.config.sst_target_size, 2 * self.config.memtable_limit
                ),
                birth_epoch=epoch,
                async_mode=False,
            )
            for rec in imm.sorted_records():
                builder.add_record(rec)
            meta, _ = builder.finish()
            crashpoints.hit("flush-before-fsync")
            res = self.io.wait_all([self.io.submit_fsync(f)])
            if not res.all_ok:
                raise EngineError(
                    f"flush fsync failed: "
                    f"{'; '.join(e.error or '?' for e in res.events)}"
                )
            crashpoints.hit("flush-after-fsync")
        except Exception:
            self.io.close(f)
            self._unlink_path(self._sst_path(fid))
            raise
        # L0 files are always durable at creation.
        meta.durability = Durability.DURABLE
        with self.vs.lock:
            self.vs.apply_group([mf.AddFile(meta)], sync=True)
        crashpoints.hit("flush-after-commit")
        self.io.close(f)
        self._unlink_path(self._wal_path(imm.wal_segment_id))
        self.metrics.add_counter("flush_count")
        self.metrics.add_counter("flush_bytes", meta.file_size)
        self.metrics.log("flush", file_id=fid)
        return meta

    # -- background maintenance ------------------------------------------------------

    def _sweep_loop(self):
        interval = max(0.05, min(self.config.ledger_sweep_max_age / 2, 1.0))
        while not self._sweep_stop.wait(interval):
            try:
                self.ledger.outlier_sweep(self.config.ledger_sweep_max_age)
            except Exception as e:  # noqa: BLE001
                self._bg_error = e
                log.exception("ledger sweep failed")

    def ledger_sweep(self, max_age: float | None = None) -> list[int]:
        return self.ledger.outlier_sweep(
            self.config.ledger_sweep_max_age if max_age is None else max_age
        )

    def ledger_dump(self) -> list[dict]:
        return self.ledger.dump()

    # -- lifecycle ----------------------------------------------------------------

    def flush_all(self, timeout: float = 60.0):
        """Rotate and wait until every memtable is flushed."""
        self.rotate()
        deadline = time.monotonic() + timeout
        while True:
            with self._write_lock:
                if not self._immutables:
                    return
            self._check_bg_error()
            if time.monotonic() > deadline:
                raise EngineError("flush_all timed out")
            time.sleep(0.005)

    def wait_idle(self, timeout: float = 120.0):
        """Block until flushes are drained and no level is over its limit."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self._check_bg_error()
            with self._write_lock:
                mems = bool(self._immutables)
            with self.vs.lock:
                busy = bool(self.compactor._busy_ids)
                pending = any(
                    s >= 1.0 for s, _ in self.compactor.scores(self.vs.current)
                )
            if not mems and not busy and not pending and self.io.in_flight() == 0:
                return
            time.sleep(0.01)
        raise EngineError("wait_idle timed out")

    def check_invariants(self):
        """Assert level disjointness and the durable-ancestor chain."""
        with self.vs.lock:
            self.vs.current.check_disjoint()
            check_durable_ancestry(self.vs, self.ledger, self.directory)

    @property
    def last_seqno(self) -> int:
        return self._seqno

    def metrics_snapshot(self) -> dict:
        snap = self.metrics.snapshot()
        with self.vs.lock:
            snap["levels"] = [
                {"level": n, "files": len(files), "bytes": sum(m.file_size for m in files)}
                for n, files in enumerate(self.vs.current.levels)
            ]
            snap["last_seqno"] = self._seqno
        return snap

    def close(self, flush: bool = True):
        if self.closed:
            return
        if flush:
            self.flush_all()
        self.closed = True
        with self._stall_cond:
            self._stall_cond.notify_all()
        with self._flush_cond:
            self._stop_flush = True
            self._flush_cond.notify_all()
        self._flush_thread.join()
        self.compactor.stop_workers()
        self._sweep_stop.set()
        self._sweep_thread.join()
        # Clean shutdown leaves nothing volatile behind.
        self.ledger.force_retire_all()
        self._wal.close()
        if flush:
            self._unlink_path(self._wal_path(self._wal_segment_id))
        self.vs.close()
        with self._readers_lock:
            for r in self._readers.values():
                r.close()
            self._readers.clear()
        self.io.shutdown()


def open_engine(directory: str, config: EngineConfig | None = None) -> Engine:
    return Engine(directory, config)
