"""Submission/completion I/O engine with three interchangeable backends.

Backends:
  sync  -- every submit executes the operation inline and blocks; configured
           simulated latencies are charged inline too.
  async -- operations run on a worker pool; submit returns immediately.
  sim   -- like async, but each operation sleeps its configured latency
           before touching the file, so timing is deterministic while file
           contents stay real.

Within one file, operations are applied strictly in submission order.  A
fsync batch acts as a barrier across its member files: it executes only
after every previously submitted write to those files has been applied,
and it completes exactly once.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import IoBackendBusyError, IoQueueFullError

MIB = 1024 * 1024


@dataclass(slots=True)
class WriteOp:
    file: "IoFile"
    offset: int
    data: bytes


@dataclass(slots=True)
class FsyncOp:
    file: "IoFile"


@dataclass(slots=True)
class FsyncBatchOp:
    files: tuple


@dataclass(slots=True)
class IoRequest:
    req_id: int
    op: object
    submit_time: float


@dataclass(slots=True)
class CompletionEvent:
    req_id: int
    ok: bool
    complete_time: float
    error: str | None = None
    error_files: tuple = ()


@dataclass
class WaitResult:
    events: list[CompletionEvent]
    pending: set[int] = field(default_factory=set)

    @property
    def complete(self) -> bool:
        return not self.pending

    @property
    def all_ok(self) -> bool:
        return self.complete and all(e.ok for e in self.events)


class IoFile:
    """Handle for a file opened for engine-managed writes and fsyncs."""

    __slots__ = ("path", "fd", "closed", "dirty_bytes", "_queue", "_running")

    def __init__(self, path: str, fd: int):
        self.path = path
        self.fd = fd
        self.closed = False
        self.dirty_bytes = 0  # written since the last successful fsync
        self._queue: deque = deque()
        self._running = False

    def __repr__(self):
        return f"IoFile({self.path!r})"


class _BatchState:
    __slots__ = ("req", "remaining", "write_latency_done")

    def __init__(self, req: IoRequest, remaining: int):
        self.req = req
        self.remaining = remaining


class IoEngine:
    def __init__(
        self,
        backend: str = "sync",
        *,
        sim_write_latency_us_per_mib: float = 0.0,
        sim_fsync_latency_us: float = 0.0,
        sim_fsync_latency_us_per_mib: float = 0.0,
        pool_size: int = 4,
        max_in_flight: int = 256,
    ):
        self._cond = threading.Condition()
        self._next_id = 1
        self._inflight: set[int] = set()     # submitted, not yet completed
        self._done: dict[int, CompletionEvent] = {}  # completed, not harvested
        self._completed_ids: set[int] = set()
        self.submitted_count = 0
        self.delivered_count = 0
        self._pool: ThreadPoolExecutor | None = None
        self._pool_size = pool_size
        self._max_in_flight = max_in_flight
        self._faults: dict[tuple[str, str], list] = {}
        self._backend = "sync"
        self.sim_write_latency_us_per_mib = 0.0
        self.sim_fsync_latency_us = 0.0
        self.sim_fsync_latency_us_per_mib = 0.0
        self.set_backend(
            backend,
            sim_write_latency_us_per_mib=sim_write_latency_us_per_mib,
            sim_fsync_latency_us=sim_fsync_latency_us,
            sim_fsync_latency_us_per_mib=sim_fsync_latency_us_per_mib,
        )

    # -- backend control -------------------------------------------------

    @property
    def backend(self) -> str:
        return self._backend

    def set_backend(self, mode: str, **params):
        """Switch backends; only legal while no requests are in flight."""
        if mode not in ("sync", "async", "sim"):
            raise ValueError(f"unknown backend {mode!r}")
        with self._cond:
            if self._inflight:
                raise IoBackendBusyError(
                    f"{len(self._inflight)} requests in flight"
                )
            self._backend = mode
            if "sim_write_latency_us_per_mib" in params:
                self.sim_write_latency_us_per_mib = float(
                    params["sim_write_latency_us_per_mib"]
                )
            if "sim_fsync_latency_us" in params:
                self.sim_fsync_latency_us = float(params["sim_fsync_latency_us"])
            if "sim_fsync_latency_us_per_mib" in params:
                self.sim_fsync_latency_us_per_mib = float(
                    params["sim_fsync_latency_us_per_mib"]
                )
            if mode in ("async", "sim") and self._pool is None:
                self._pool = ThreadPoolExecutor(
                    max_workers=self._pool_size, thread_name_prefix="io"
                )

    def shutdown(self):
        with self._cond:
            pool = self._pool
            self._pool = None
        if pool is not None:
            pool.shutdown(wait=True)

    # -- plain file utilities (not on the async path) --------------------

    def create(self, path: str) -> IoFile:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        return IoFile(path, fd)

    def open_for_sync(self, path: str) -> IoFile:
        """Reopen an existing file so it can be fsynced again (retry path)."""
        fd = os.open(path, os.O_RDONLY)
        return IoFile(path, fd)

    def close(self, f: IoFile):
        if not f.closed:
            f.closed = True
            os.close(f.fd)

    def delete(self, path: str):
        os.unlink(path)

    def read(self, path: str, offset: int = 0, length: int = -1) -> bytes:
        with open(path, "rb") as f:
            if offset:
                f.seek(offset)
            return f.read() if length < 0 else f.read(length)

    # -- fault injection (test hook) --------------------------------------

    def inject_fault(self, path: str, op_kind: str, times: int = 1,
                     message: str = "injected I/O error"):
        """Fail the next `times` operations of op_kind on path."""
        with self._cond:
            self._faults[(path, op_kind)] = [times, message]

    def _take_fault(self, path: str, op_kind: str) -> str | None:
        entry = self._faults.get((path, op_kind))
        if not entry or entry[0] <= 0:
            return None
        entry[0] -= 1
        return entry[1]

    # -- submission --------------------------------------------------------

    def submit_write(self, f: IoFile, offset: int, data: bytes) -> int:
        return self.submit(WriteOp(f, offset, data))

    def submit_fsync(self, f: IoFile) -> int:
        return self.submit(FsyncOp(f))

    def submit_fsync_batch(self, files) -> int:
        return self.submit(FsyncBatchOp(tuple(files)))

    def submit(self, op) -> int:
        req = self._register(op)
        if self._backend == "sync":
            self._execute_inline(req)
        else:
            self._dispatch(req)
        return req.req_id

    def _register(self, op) -> IoRequest:
        with self._cond:
            if len(self._inflight) >= self._max_in_flight:
                raise IoQueueFullError(
                    f"{len(self._inflight)} requests in flight "
                    f"(limit {self._max_in_flight})"
                )
            req = IoRequest(self._next_id, op, time.monotonic())
            self._next_id += 1
            self._inflight.add(req.req_id)
            self.submitted_count += 1
            return req

    # -- inline (sync backend) --------------------------------------------

    def _execute_inline(self, req: IoRequest):
        op = req.op
        if isinstance(op, WriteOp):
            self._sleep_write(len(op.data))
            self._complete(req, self._apply_write(op))
        elif isinstance(op, FsyncOp):
            self._sleep_fsync(op.file.dirty_bytes)
            self._complete(req, self._apply_fsync(op.file))
        elif isinstance(op, FsyncBatchOp):
            self._sleep_fsync(sum(f.dirty_bytes for f in op.files))
            self._complete(req, self._apply_batch(op))
        else:
            raise TypeError(f"unsupported op {op!r}")

    # -- pooled (async / sim backends) --------------------------------------

    def _dispatch(self, req: IoRequest):
        op = req.op
        with self._cond:
            if isinstance(op, WriteOp):
                self._enqueue(op.file, ("write", req))
            elif isinstance(op, FsyncOp):
                self._enqueue(op.file, ("fsync", req))
            elif isinstance(op, FsyncBatchOp):
                state = _BatchState(req, len(op.files))
                if not op.files:
                    # Degenerate empty batch: completes immediately.
                    self._complete_locked(req, True, None, ())
                    return
                for f in op.files:
                    self._enqueue(f, ("batch", state))
            else:
                raise TypeError(f"unsupported op {op!r}")

    def _enqueue(self, f: IoFile, task):
        f._queue.append(task)
        if not f._running:
            f._running = True
            self._pool.submit(self._run_file, f)

    def _run_file(self, f: IoFile):
        while True:
            with self._cond:
                if not f._queue:
                    f._running = False
                    return
                kind, payload = f._queue.popleft()
            if kind == "write":
                req = payload
                if self._backend == "sim":
                    self._sleep_write(len(req.op.data))
                self._complete(req, self._apply_write(req.op))
            elif kind == "fsync":
                req = payload
                if self._backend == "sim":
                    self._sleep_fsync(req.op.file.dirty_bytes)
                self._complete(req, self._apply_fsync(req.op.file))
            else:  # batch barrier marker
                state = payload
                with self._cond:
                    state.remaining -= 1
                    last = state.remaining == 0
                if last:
                    if self._backend == "sim":
                        self._sleep_fsync(
                            sum(f.dirty_bytes for f in state.req.op.files)
                        )
                    self._complete(state.req, self._apply_batch(state.req.op))

    # -- operation bodies ---------------------------------------------------

    def _apply_write(self, op: WriteOp):
        fault = self._take_fault(op.file.path, "write")
        if fault:
            return (False, fault, (op.file.path,))
        try:
            if op.file.closed:
                raise OSError("file is closed")
            view = memoryview(op.data)
            pos = op.offset
            while view:
                n = os.pwrite(op.file.fd, view, pos)
                pos += n
                view = view[n:]
            with self._cond:
                op.file.dirty_bytes += len(op.data)
            return (True, None, ())
        except OSError as e:
            return (False, str(e), (op.file.path,))

    def _apply_fsync(self, f: IoFile):
        fault = self._take_fault(f.path, "fsync")
        if fault:
            return (False, fault, (f.path,))
        try:
            if f.closed:
                raise OSError("file is closed")
            os.fsync(f.fd)
            with self._cond:
                f.dirty_bytes = 0
            return (True, None, ())
        except OSError as e:
            return (False, str(e), (f.path,))

    def _apply_batch(self, op: FsyncBatchOp):
        failed, messages = [], []
        for f in op.files:
            ok, err, _ = self._apply_fsync(f)
            if not ok:
                failed.append(f.path)
                messages.append(f"{f.path}: {err}")
        if failed:
            return (False, "; ".join(messages), tuple(failed))
        return (True, None, ())

    # -- latency model -------------------------------------------------------

    def _sleep_write(self, nbytes: int):
        us = self.sim_write_latency_us_per_mib * (nbytes / MIB)
        if us > 0:
            time.sleep(us / 1e6)

    def _sleep_fsync(self, dirty_bytes: int = 0):
        # Per-request base cost plus a writeback term for the bytes that
        # are still unsynced on the simulated device.
        us = self.sim_fsync_latency_us + self.sim_fsync_latency_us_per_mib * (
            dirty_bytes / MIB
        )
        if us > 0:
            time.sleep(us / 1e6)

    # -- completion store ------------------------------------------------------

    def _complete(self, req: IoRequest, result):
        ok, err, error_files = result
        with self._cond:
            self._complete_locked(req, ok, err, error_files)

    def _complete_locked(self, req, ok, err, error_files):
        ev = CompletionEvent(req.req_id, ok, time.monotonic(), err, error_files)
        self._inflight.discard(req.req_id)
        self._completed_ids.add(req.req_id)
        self._done[req.req_id] = ev
        self._cond.notify_all()

    def is_complete(self, req_id: int) -> bool:
        with self._cond:
            return req_id in self._completed_ids

    def in_flight(self) -> int:
        with self._cond:
            return len(self._inflight)

    def wait_all(self, ids, timeout: float | None = None) -> WaitResult:
        """Block until every id completes (or timeout); harvest their events."""
        ids = set(ids)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not ids <= self._completed_ids:
                remaining = None
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                self._cond.wait(remaining)
            events = []
            for i in ids:
                ev = self._done.pop(i, None)
                if ev is not None:
                    events.append(ev)
                    self.delivered_count += 1
            pending = ids - self._completed_ids
            return WaitResult(events, pending)

    def poll_completions(self, only=None) -> list[CompletionEvent]:
        """Harvest completed events without blocking.

        With `only`, harvests just those request ids, leaving the rest for
        their owners.
        """
        with self._cond:
            if only is None:
                taken = list(self._done.values())
                self._done.clear()
            else:
                taken = []
                for i in list(only):
                    ev = self._done.pop(i, None)
                    if ev is not None:
                        taken.append(ev)
            self.delivered_count += len(taken)
            return taken
