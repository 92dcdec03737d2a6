"""Crash-injection hooks for the recovery test harness.

Setting AISLSM_CRASH_POINT=<name> (or <name>:<nth>) makes the process
hard-exit the nth time that named point is reached, emulating a sudden
power cut.  With the variable unset every hook is a no-op.
"""

from __future__ import annotations

import os
import sys
from collections import Counter

CRASH_ENV = "AISLSM_CRASH_POINT"
CRASH_EXIT_CODE = 137

# Every instrumented point, for harness enumeration.
ALL_POINTS = (
    "wal-append-torn",
    "wal-append-before-memtable",
    "rotate-after",
    "flush-before-fsync",
    "flush-after-fsync",
    "flush-after-commit",
    "compact-during-build",
    "compact-after-wait-writes",
    "compact-after-fsync-submit",
    "compact-after-commit",
    "checkup-after-mark-durable",
    "checkup-after-unlink",
    "sweep-after-retire",
)

_armed_point: str | None = None
_armed_nth = 1
_hits: Counter = Counter()


def configure(spec: str | None):
    """Arm a crash point from 'name' or 'name:nth'; None disarms."""
    global _armed_point, _armed_nth
    _hits.clear()
    if not spec:
        _armed_point = None
        _armed_nth = 1
        return
    name, _, nth = spec.partition(":")
    if name not in ALL_POINTS:
        raise ValueError(f"unknown crash point {name!r}")
    _armed_point = name
    _armed_nth = int(nth) if nth else 1


configure(os.environ.get(CRASH_ENV))


def armed(point: str) -> bool:
    return _armed_point == point


def crash_now(point: str):
    # os._exit skips atexit/finally: nothing gets flushed or cleaned up.
    os.write(2, f"CRASH {point}\n".encode())
    sys.stderr.flush()
    os._exit(CRASH_EXIT_CODE)


def fatal_hit(point: str) -> bool:
    """Count one arrival; True when this arrival is the lethal one.

    Callers needing a pre-crash side effect (e.g. tearing a record) branch
    on this and then call crash_now themselves.
    """
    if _armed_point != point:
        return False
    _hits[point] += 1
    return _hits[point] >= _armed_nth


def hit(point: str):
    """Record one arrival at `point`; exits the process when armed."""
    if fatal_hit(point):
        crash_now(point)
