"""Crash-injection harness: kill a child engine at instrumented points,
recover the directory, and compare a full scan against the op-stream oracle.

Verification logic: ops are single-threaded, so op i carries seqno i and any
recovered state must equal the oracle prefix after k = recovered last_seqno
ops.  Losing any flushed or compacted record (or, with a synced WAL, any
acknowledged record) breaks prefix equality, so one comparison covers all
three loss classes.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

from .. import crashpoints
from ..engine import Engine
from ..model import EngineConfig
from ..wal import torn_tail_bytes
from .workload import CrashWorkload

DEFAULT_OPS = 30_000

# The nth arrival that should be lethal, so the crash lands mid-run with
# background state piled up.
POINT_TUNING: dict[str, int] = {
    "wal-append-torn": 15_000,
    "wal-append-before-memtable": 15_000,
    "rotate-after": 12,
    "flush-before-fsync": 8,
    "flush-after-fsync": 8,
    "flush-after-commit": 8,
    "compact-during-build": 3,
    "compact-after-wait-writes": 3,
    "compact-after-fsync-submit": 3,
    "compact-after-commit": 3,
    "checkup-after-mark-durable": 2,
    "checkup-after-unlink": 2,
    "sweep-after-retire": 1,
}


def crash_config(wal_fsync_each_write: bool = True) -> EngineConfig:
    """Tiny geometry: dozens of flushes and compactions in a few seconds."""
    return EngineConfig(
        memtable_limit=24 * 1024,
        sst_target_size=24 * 1024,
        merge_buffer_size=8 * 1024,
        base_level_bytes=96 * 1024,
        l0_compaction_trigger=3,
        io_backend="sim",
        sim_write_latency_us_per_mib=200.0,
        sim_fsync_latency_us=2000.0,
        sim_fsync_latency_us_per_mib=10_000.0,
        wal_fsync_each_write=wal_fsync_each_write,
        ledger_sweep_max_age=0.4,
    )


def run_crash_child(directory: str, ops: int, seed: int,
                    wal_fsync_each_write: bool, idle_tail: float) -> int:
    """Child-process body: run the workload until the armed point kills us."""
    cfg = crash_config(wal_fsync_each_write)
    engine = Engine(directory, cfg)
    work = CrashWorkload(ops, seed)
    for op, key, value in work.ops():
        if op == "put":
            engine.put(key, value)
        else:
            engine.delete(key)
    if idle_tail > 0:
        # Give the sweep a chance to fire its crash point.
        time.sleep(idle_tail)
    engine.close()
    return 0


@dataclass
class CrashVerdict:
    point: str
    seed: int
    fired: bool
    recovered_ok: bool = False
    surviving_seqno: int = 0
    scanned: int = 0
    expected: int = 0
    wal_tail_ok: bool = True
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.fired and self.recovered_ok and self.wal_tail_ok

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] point={self.point} seed={self.seed} "
            f"fired={self.fired} k={self.surviving_seqno} "
            f"live={self.scanned}/{self.expected} {self.detail}"
        )


def run_crash_point(
    point: str,
    seed: int,
    ops: int = DEFAULT_OPS,
    wal_fsync_each_write: bool = True,
    keep_dir: bool = False,
) -> CrashVerdict:
    workdir = tempfile.mkdtemp(prefix=f"lsmkv-crash-{point}-")
    try:
        nth = POINT_TUNING.get(point, 1)
        idle_tail = 2.0 if point == "sweep-after-retire" else 0.0
        cmd = [
            sys.executable,
            "-m",
            "lsmkv.bench.cli",
            "crash-child",
            "--db",
            workdir,
            "--ops",
            str(ops),
            "--seed",
            str(seed),
            "--idle-tail",
            str(idle_tail),
        ]
        if wal_fsync_each_write:
            cmd.append("--wal-fsync")
        env = dict(os.environ)
        env[crashpoints.CRASH_ENV] = f"{point}:{nth}"
        proc = subprocess.run(
            cmd, env=env, capture_output=True, timeout=300.0
        )
        fired = (
            proc.returncode == crashpoints.CRASH_EXIT_CODE
            and f"CRASH {point}".encode() in proc.stderr
        )
        verdict = CrashVerdict(point=point, seed=seed, fired=fired)
        if not fired:
            verdict.detail = (
                f"point never fired (rc={proc.returncode}, "
                f"stderr={proc.stderr[-200:]!r})"
            )
            return verdict
        _verify_recovery(workdir, ops, seed, wal_fsync_each_write, verdict)
        return verdict
    finally:
        if not keep_dir:
            shutil.rmtree(workdir, ignore_errors=True)


def _verify_recovery(workdir: str, ops: int, seed: int,
                     wal_fsync_each_write: bool, verdict: CrashVerdict):
    work = CrashWorkload(ops, seed)
    # Inspect surviving WAL segments before recovery consumes them: with a
    # synced WAL nothing but one torn fragment may follow the last record.
    max_record = 8 + 17 + work.key_size + work.value_size
    if wal_fsync_each_write:
        for name in os.listdir(workdir):
            if name.startswith("wal-") and name.endswith(".log"):
                tail = torn_tail_bytes(os.path.join(workdir, name))
                if tail >= max_record:
                    verdict.wal_tail_ok = False
                    verdict.detail = f"{name}: {tail} unexplained tail bytes"

    cfg = crash_config(wal_fsync_each_write)
    engine = Engine(workdir, cfg)
    try:
        k = engine.last_seqno
        got = dict(engine.scan())
        expected = work.state_after(k)
        verdict.surviving_seqno = k
        verdict.scanned = len(got)
        verdict.expected = len(expected)
        if k > ops:
            verdict.detail = f"recovered seqno {k} exceeds issued ops {ops}"
            return
        if got != expected:
            missing = list(expected.keys() - got.keys())[:3]
            extra = list(got.keys() - expected.keys())[:3]
            diff = [
                kk
                for kk in got.keys() & expected.keys()
                if got[kk] != expected[kk]
            ][:3]
            verdict.detail = (
                f"state mismatch vs oracle prefix {k}: missing={missing} "
                f"extra={extra} differing={diff}"
            )
            return
        engine.check_invariants()
        engine.close()
        # Recovery must be idempotent: reopen and compare once more.
        engine = Engine(workdir, cfg)
        got2 = dict(engine.scan())
        if got2 != expected:
            verdict.detail = "second recovery diverged"
            return
        engine.check_invariants()
        verdict.recovered_ok = True
    except Exception as e:  # noqa: BLE001 - verdict carries the failure
        verdict.detail = f"recovery raised {type(e).__name__}: {e}"
    finally:
        try:
            engine.close()
        except Exception:  # noqa: BLE001
            pass


def crash_matrix(
    points=None,
    seeds=(1,),
    ops: int = DEFAULT_OPS,
    wal_fsync_each_write: bool = True,
    progress=None,
) -> list[CrashVerdict]:
    points = list(points or crashpoints.ALL_POINTS)
    verdicts = []
    for seed in seeds:
        for point in points:
            v = run_crash_point(
                point, seed, ops=ops, wal_fsync_each_write=wal_fsync_each_write
            )
            verdicts.append(v)
            if progress:
                progress(v)
    return verdicts


def matrix_report(verdicts) -> dict:
    return {
        "total": len(verdicts),
        "passed": sum(v.passed for v in verdicts),
        "failed": [asdict(v) for v in verdicts if not v.passed],
    }
