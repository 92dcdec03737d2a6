"""Compaction selection and the asynchronous compaction pipeline.

One job: check up prior epochs, merge the inputs into rolling output
tables whose writes are submitted as buffers fill, block once for the
write completions, submit one compound fsync for every output without
waiting on it, then commit the version edit and the ledger entry.  With a
non-blocking backend the worker immediately starts the next job while the
previous batch persists in the background.
"""

from __future__ import annotations

import logging
import threading
import time

from . import crashpoints
from .errors import EngineError
from .io_engine import IoEngine
from .ledger import DurabilityLedger
from .metrics import EngineMetrics
from .model import EngineConfig, SstMeta, level_capacity
from .sstable import SstBuilder, merge_raw, open_sst
from .version import VersionSet

log = logging.getLogger("lsmkv.compaction")

SELECTING = "selecting"
MERGING = "merging"
AWAIT_WRITES = "await_writes"
FSYNC_SUBMITTED = "fsync_submitted"
POSTPROCESSED = "postprocessed"


class CompactionJob:
    __slots__ = (
        "epoch_id",
        "level_n",
        "inputs_n",
        "inputs_n1",
        "outputs",
        "write_ids",
        "fsync_batch_id",
        "phase",
        "is_bottom",
        "timings",
    )

    def __init__(self, epoch_id, level_n, inputs_n, inputs_n1, is_bottom):
        self.epoch_id = epoch_id
        self.level_n = level_n
        self.inputs_n = list(inputs_n)
        self.inputs_n1 = list(inputs_n1)
        self.outputs: list[SstMeta] = []
        self.write_ids: list[int] = []
        self.fsync_batch_id: int | None = None
        self.phase = SELECTING
        self.is_bottom = is_bottom
        self.timings = {"compute": 0.0, "write_wait": 0.0, "fsync_wait": 0.0}

    @property
    def inputs(self):
        return self.inputs_n + self.inputs_n1

    def __repr__(self):
        return (
            f"CompactionJob(epoch={self.epoch_id}, L{self.level_n}->"
            f"L{self.level_n + 1}, n={len(self.inputs_n)}, "
            f"n1={len(self.inputs_n1)}, phase={self.phase})"
        )


def record_phase_timings(job: CompactionJob) -> dict:
    """Wall-time shares of compute vs write waits vs fsync waits."""
    t = job.timings
    total = t["compute"] + t["write_wait"] + t["fsync_wait"]
    if total <= 0:
        return {"compute_pct": 0.0, "write_pct": 0.0, "fsync_pct": 0.0}
    return {
        "compute_pct": 100.0 * t["compute"] / total,
        "write_pct": 100.0 * t["write_wait"] / total,
        "fsync_pct": 100.0 * t["fsync_wait"] / total,
    }


class Compactor:
    """Owns selection state and runs jobs; one instance per engine."""

    def __init__(
        self,
        io: IoEngine,
        version_set: VersionSet,
        ledger: DurabilityLedger,
        config: EngineConfig,
        metrics: EngineMetrics,
        sst_path,
        on_commit=None,
    ):
        self.io = io
        self.vs = version_set
        self.ledger = ledger
        self.config = config
        self.metrics = metrics
        self.sst_path = sst_path
        self.on_commit = on_commit or (lambda: None)
        self._busy_ids: set[int] = set()
        self._cursors: dict[int, bytes] = {}  # per-level round-robin position
        self._work = threading.Condition()
        self._stop = False
        self._threads: list[threading.Thread] = []
        self.error: Exception | None = None

    # -- selection ---------------------------------------------------------

    def scores(self, version) -> list[tuple[float, int]]:
        """(score, level) for every level that could seed a compaction."""
        out = [(version.file_count(0) / self.config.l0_compaction_trigger, 0)]
        for n in range(1, self.config.max_levels - 1):
            cap = level_capacity(self.config, n)
            out.append((version.level_bytes(n) / cap, n))
        return out

    def pick_compaction(self) -> CompactionJob | None:
        """Choose the level maximally over its limit; None when all fit.

        Holds the version lock; chosen files are marked in-progress so
        concurrent workers never overlap.
        """
        with self.vs.lock:
            version = self.vs.current
            ranked = sorted(
                self.scores(version), key=lambda s: (-s[0], s[1])
            )
            for score, n in ranked:
                if score < 1.0:
                    break
                job = self._try_pick_level(version, n)
                if job is not None:
                    for m in job.inputs:
                        self._busy_ids.add(m.file_id)
                    return job
            return None

    def _try_pick_level(self, version, n: int) -> CompactionJob | None:
        if n == 0:
            inputs_n = list(version.levels[0])
            if not inputs_n or any(m.file_id in self._busy_ids for m in inputs_n):
                return None
        else:
            files = version.levels[n]
            if not files:
                return None
            cursor = self._cursors.get(n, b"")
            rotated = [m for m in files if m.smallest.user_key > cursor]
            rotated += [m for m in files if m.smallest.user_key <= cursor]
            seed = next(
                (m for m in rotated if m.file_id not in self._busy_ids), None
            )
            if seed is None:
                return None
            inputs_n = [seed]
        lo = min(m.smallest.user_key for m in inputs_n)
        hi = max(m.largest.user_key for m in inputs_n)
        inputs_n1 = version.files_overlapping(n + 1, lo, hi)
        if any(m.file_id in self._busy_ids for m in inputs_n1):
            return None
        is_bottom = all(
            not version.levels[k] for k in range(n + 2, self.config.max_levels)
        )
        if n > 0:
            self._cursors[n] = hi
        epoch = self.vs.allocate_epoch()
        return CompactionJob(epoch, n, inputs_n, inputs_n1, is_bottom)

    def _release(self, job: CompactionJob):
        with self.vs.lock:
            for m in job.inputs:
                self._busy_ids.discard(m.file_id)

    # -- the pipeline -------------------------------------------------------

    def run_compaction(self, job: CompactionJob):
        try:
            self._run(job)
        finally:
            self._release(job)

    def _run(self, job: CompactionJob):
        epoch = job.epoch_id
        self.metrics.log("compact_start", epoch=epoch, level=job.level_n)

        # Deferred check-up for the epochs that produced our inputs happens
        # before any input byte is loaded.  The non-blocking variant leaves
        # still-pending epochs for a later check-up; retained parents keep
        # them safe meanwhile.
        t0 = time.monotonic()
        if self.config.checkup_blocking:
            self.ledger.checkup(job.inputs)
        else:
            self.ledger.checkup_ready(job.inputs)
        checkup_s = time.monotonic() - t0

        job.phase = MERGING
        self.metrics.log("merge_start", epoch=epoch)
        readers, handles = [], []
        compute_s = 0.0
        try:
            tc = time.monotonic()
            for m in job.inputs:
                readers.append(open_sst(self.sst_path(m.file_id)))
            stream = merge_raw(
                [r.iter_raw() for r in readers], drop_deletes=job.is_bottom
            )
            builder = None
            out_level = job.level_n + 1
            for uk, seqno, kind, raw in stream:
                if builder is None:
                    fid = self.vs.allocate_file_id()
                    f = self.io.create(self.sst_path(fid))
                    handles.append(f)
                    builder = SstBuilder(
                        self.io,
                        f,
                        fid,
                        out_level,
                        buffer_size=self.config.merge_buffer_size,
                        target_size=self.config.sst_target_size,
                        birth_epoch=epoch,
                        async_mode=True,
                    )
                builder.add_raw(uk, seqno, kind, raw)
                if builder.full:
                    meta, ids = builder.finish()
                    job.outputs.append(meta)
                    job.write_ids.extend(ids)
                    builder = None
                    crashpoints.hit("compact-during-build")
            if builder is not None and builder.record_count:
                # The final partial output file is always emitted.
                meta, ids = builder.finish()
                job.outputs.append(meta)
                job.write_ids.extend(ids)
            compute_s = time.monotonic() - tc
        except Exception:
            self._abort(job, handles)
            raise
        finally:
            for r in readers:
                r.close()

        if not job.outputs:
            # Everything merged away (bottom-level tombstones): no offspring,
            # no ledger entry; the durable inputs simply retire.
            self._commit_empty(job)
            job.timings["compute"] = compute_s + checkup_s
            self._account(job)
            return

        job.phase = AWAIT_WRITES
        self.metrics.log("await_writes", epoch=epoch)
        tw = time.monotonic()
        res = self.io.wait_all(job.write_ids)
        write_wait_s = time.monotonic() - tw
        if not res.all_ok:
            bad = "; ".join(e.error or "?" for e in res.events if not e.ok)
            self._abort(job, handles)
            raise EngineError(f"compaction {epoch} write I/O failed: {bad}")
        crashpoints.hit("compact-after-wait-writes")

        job.phase = FSYNC_SUBMITTED
        tf = time.monotonic()
        job.fsync_batch_id = self.io.submit_fsync_batch(handles)
        fsync_wait_s = time.monotonic() - tf
        self.metrics.log("fsync_submitted", epoch=epoch, batch=job.fsync_batch_id)
        crashpoints.hit("compact-after-fsync-submit")

        self.ledger.open_entry(
            epoch,
            job.inputs,
            job.outputs,
            job.fsync_batch_id,
            drop_deletes=job.is_bottom,
            handles=handles,
        )
        job.phase = POSTPROCESSED
        self.metrics.log("postprocess_done", epoch=epoch)
        crashpoints.hit("compact-after-commit")

        # Check-up bookkeeping (metadata + manifest records) counts as
        # compute; its blocking batch waits are charged to fsync time by the
        # ledger itself.
        job.timings["compute"] = compute_s + checkup_s
        job.timings["write_wait"] = write_wait_s
        job.timings["fsync_wait"] = fsync_wait_s
        self._account(job)
        self.on_commit()

    def _account(self, job: CompactionJob):
        t = job.timings
        self.metrics.add_counter("compactions_count")
        self.metrics.add_phase_times(t["compute"], t["write_wait"], t["fsync_wait"])
        self.metrics.add_counter(
            "compact_read_bytes", sum(m.file_size for m in job.inputs)
        )
        self.metrics.add_counter(
            "compact_write_bytes", sum(m.file_size for m in job.outputs)
        )
        self.metrics.record_breakdown(
            {"epoch": job.epoch_id, **record_phase_timings(job)}
        )

    def _commit_empty(self, job: CompactionJob):
        import lsmkv.manifest as mf

        edits = [mf.DeleteFile(m.level, m.file_id) for m in job.inputs]
        with self.vs.lock:
            self.vs.apply_group(edits, sync=True)
        for m in job.inputs:
            self.ledger.delete_file(m.file_id)
        job.phase = POSTPROCESSED
        self.on_commit()

    def _abort(self, job: CompactionJob, handles):
        """Write failure: drop partial outputs; inputs remain the durable copy."""
        self.io.wait_all(job.write_ids, timeout=5.0)
        for h in handles:
            self.io.close(h)
            try:
                self.io.delete(h.path)
            except FileNotFoundError:
                pass
        job.outputs.clear()

    # -- worker loop -------------------------------------------------------

    def kick(self):
        with self._work:
            self._work.notify_all()

    def start_workers(self, count: int):
        for i in range(count):
            t = threading.Thread(
                target=self.worker_loop, name=f"compact-{i}", daemon=True
            )
            t.start()
            self._threads.append(t)

    def stop_workers(self):
        with self._work:
            self._stop = True
            self._work.notify_all()
        for t in self._threads:
            t.join()
        self._threads.clear()

    def worker_loop(self):
        """Pick and run jobs until stopped; fsync batches persist in the
        background, so the next pick happens while they are still pending."""
        while True:
            with self._work:
                if self._stop:
                    return
            job = None
            try:
                job = self.pick_compaction()
                if job is None:
                    with self._work:
                        if self._stop:
                            return
                        self._work.wait(timeout=0.02)
                    continue
                self.run_compaction(job)
            except Exception as e:  # noqa: BLE001 - worker must not die silently
                self.error = e
                log.exception("compaction worker failed on %r", job)
                time.sleep(0.05)
