"""Engine metrics: stall accounting, phase breakdowns, schedule log."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass


class StallReason:
    NONE = "none"
    TOO_MANY_L0 = "too_many_l0"
    TOO_MANY_IMMUTABLES = "too_many_immutables"
    PENDING_COMPACTION_BYTES = "pending_compaction_bytes"


@dataclass
class StallState:
    reason: str = StallReason.NONE
    entered_at: float = 0.0


class EngineMetrics:
    """Thread-safe counters plus a bounded schedule log.

    Stall time is wall-clock: the window while at least one writer is
    blocked, not the per-thread sum, so stall_seconds <= total runtime.
    """

    SCHEDULE_LOG_LIMIT = 200_000

    def __init__(self):
        self._lock = threading.Lock()
        self.stall = StallState()
        self._blocked_writers = 0
        self.stall_seconds = 0.0
        self.stall_events = 0

        self.compactions_count = 0
        self.fallback_fsync_waits = 0
        self.checkup_count = 0
        self.retired_epochs = 0
        self.sweep_runs = 0
        self.flush_count = 0

        self.compute_seconds = 0.0
        self.write_wait_seconds = 0.0
        self.fsync_wait_seconds = 0.0

        self.user_bytes = 0
        self.wal_bytes = 0
        self.flush_bytes = 0
        self.compact_read_bytes = 0
        self.compact_write_bytes = 0

        self.phase_breakdowns: list[dict] = []
        self.schedule_log: list[tuple] = []

    # -- stall window -------------------------------------------------------

    def stall_enter(self, reason: str):
        with self._lock:
            self._blocked_writers += 1
            if self._blocked_writers == 1:
                self.stall.reason = reason
                self.stall.entered_at = time.monotonic()
                self.stall_events += 1

    def stall_exit(self):
        with self._lock:
            self._blocked_writers -= 1
            if self._blocked_writers == 0:
                self.stall_seconds += time.monotonic() - self.stall.entered_at
                self.stall.reason = StallReason.NONE
                self.stall.entered_at = 0.0

    # -- schedule log ----------------------------------------------------------

    def log(self, kind: str, **fields):
        self.log_at(time.monotonic(), kind, **fields)

    def log_at(self, t: float, kind: str, **fields):
        with self._lock:
            if len(self.schedule_log) < self.SCHEDULE_LOG_LIMIT:
                self.schedule_log.append((t, kind, fields))

    def pipelining_overlaps(self) -> int:
        """Compactions whose merge began while an older fsync batch was pending."""
        with self._lock:
            log = list(self.schedule_log)
        submitted, completed, merges = {}, {}, []
        for t, kind, f in log:
            if kind == "fsync_submitted":
                submitted[f["epoch"]] = t
            elif kind == "batch_complete":
                completed[f["epoch"]] = t
            elif kind == "merge_start":
                merges.append((t, f["epoch"]))
        count = 0
        for t, epoch in merges:
            for other, t_sub in submitted.items():
                if other >= epoch:
                    continue
                t_done = completed.get(other, float("inf"))
                if t_sub <= t < t_done:
                    count += 1
                    break
        return count

    # -- aggregate helpers --------------------------------------------------------

    def add_counter(self, name: str, delta=1):
        with self._lock:
            setattr(self, name, getattr(self, name) + delta)

    def add_phase_times(self, compute: float, write_wait: float, fsync_wait: float):
        with self._lock:
            self.compute_seconds += compute
            self.write_wait_seconds += write_wait
            self.fsync_wait_seconds += fsync_wait

    def record_breakdown(self, breakdown: dict):
        with self._lock:
            self.phase_breakdowns.append(breakdown)

    def fallback_fraction(self) -> float:
        with self._lock:
            if self.compactions_count == 0:
                return 0.0
            return self.fallback_fsync_waits / self.compactions_count

    def write_amplification(self) -> float:
        with self._lock:
            if self.user_bytes == 0:
                return 0.0
            total = self.wal_bytes + self.flush_bytes + self.compact_write_bytes
            return total / self.user_bytes

    def aggregate_phase_pcts(self) -> dict:
        with self._lock:
            total = self.compute_seconds + self.write_wait_seconds + self.fsync_wait_seconds
            if total == 0:
                return {"compute_pct": 0.0, "write_pct": 0.0, "fsync_pct": 0.0}
            return {
                "compute_pct": 100.0 * self.compute_seconds / total,
                "write_pct": 100.0 * self.write_wait_seconds / total,
                "fsync_pct": 100.0 * self.fsync_wait_seconds / total,
            }

    def snapshot(self) -> dict:
        with self._lock:
            snap = {
                "stall_seconds": self.stall_seconds,
                "stall_events": self.stall_events,
                "compactions_count": self.compactions_count,
                "fallback_fsync_waits": self.fallback_fsync_waits,
                "checkup_count": self.checkup_count,
                "retired_epochs": self.retired_epochs,
                "sweep_runs": self.sweep_runs,
                "flush_count": self.flush_count,
                "compute_seconds": self.compute_seconds,
                "write_wait_seconds": self.write_wait_seconds,
                "fsync_wait_seconds": self.fsync_wait_seconds,
                "user_bytes": self.user_bytes,
                "wal_bytes": self.wal_bytes,
                "flush_bytes": self.flush_bytes,
                "compact_read_bytes": self.compact_read_bytes,
                "compact_write_bytes": self.compact_write_bytes,
            }
        snap["write_amplification"] = self.write_amplification()
        snap["phase_pcts"] = self.aggregate_phase_pcts()
        snap["fallback_fraction"] = self.fallback_fraction()
        snap["pipelining_overlaps"] = self.pipelining_overlaps()
        return snap

    def export_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True)
