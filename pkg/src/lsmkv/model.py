"""Core data model: keys, records, table metadata, and engine configuration.

Internal keys order by (user_key ascending, seqno descending) so that for one
user key the newest record is encountered first by any ordered scan.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum

MIB = 1024 * 1024

# Sentinel seqno used when seeking to "newest record for this user key".
MAX_SEQNO = 2**64 - 1


class RecordKind(IntEnum):
    PUT = 0
    DELETE = 1


class Durability(IntEnum):
    VOLATILE = 0
    DURABLE = 1


@dataclass(slots=True)
class InternalKey:
    user_key: bytes
    seqno: int
    kind: RecordKind = RecordKind.PUT

    def sort_key(self):
        return (self.user_key, -self.seqno)

    def __lt__(self, other: "InternalKey"):
        return self.sort_key() < other.sort_key()

    def __le__(self, other: "InternalKey"):
        return self.sort_key() <= other.sort_key()


def compare_internal_keys(a: InternalKey, b: InternalKey) -> int:
    """Total order: -1, 0, or 1 for a <, ==, > b."""
    ka, kb = a.sort_key(), b.sort_key()
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0


@dataclass(slots=True)
class KVRecord:
    key: InternalKey
    value: bytes = b""


_IK_HEAD = struct.Struct("<I")
_IK_TAIL = struct.Struct("<QB")


def encode_internal_key(key: InternalKey) -> bytes:
    return _IK_HEAD.pack(len(key.user_key)) + key.user_key + _IK_TAIL.pack(
        key.seqno, key.kind
    )


def decode_internal_key(buf: bytes, offset: int = 0) -> tuple[InternalKey, int]:
    """Decode one encoded key; returns (key, offset past it)."""
    (klen,) = _IK_HEAD.unpack_from(buf, offset)
    offset += 4
    user_key = bytes(buf[offset : offset + klen])
    offset += klen
    seqno, kind = _IK_TAIL.unpack_from(buf, offset)
    return InternalKey(user_key, seqno, RecordKind(kind)), offset + 9


@dataclass(slots=True)
class SstMeta:
    file_id: int
    level: int
    smallest: InternalKey
    largest: InternalKey
    file_size: int
    durability: Durability = Durability.DURABLE
    birth_epoch: int = 0
    checksum: int = 0

    def overlaps_user_range(self, lo: bytes, hi: bytes) -> bool:
        """True when [smallest, largest] intersects user-key interval [lo, hi]."""
        return self.smallest.user_key <= hi and self.largest.user_key >= lo

    def contains_user_key(self, user_key: bytes) -> bool:
        return self.smallest.user_key <= user_key <= self.largest.user_key


def sst_filename(file_id: int) -> str:
    return f"sst-{file_id}.sst"


def wal_filename(segment_id: int) -> str:
    return f"wal-{segment_id}.log"


@dataclass
class EngineConfig:
    memtable_limit: int = 64 * MIB
    sst_target_size: int = 64 * MIB
    merge_buffer_size: int = 1 * MIB
    l0_compaction_trigger: int = 4
    level_size_ratio: int = 10
    base_level_bytes: int = 256 * MIB  # capacity of level 1
    max_levels: int = 7
    compaction_threads: int = 1
    io_backend: str = "sync"  # sync | async | sim
    sim_write_latency_us_per_mib: float = 0.0
    sim_fsync_latency_us: float = 0.0
    sim_fsync_latency_us_per_mib: float = 0.0
    wal_fsync_each_write: bool = False
    # When set, the pre-compaction check-up blocks on pending input batches
    # instead of deferring them to a later check-up or the sweep.
    checkup_blocking: bool = False
    direct_io_poll: bool = False
    max_value_size: int = 16 * MIB
    io_pool_size: int = 4
    io_max_in_flight: int = 256
    ledger_sweep_max_age: float = 30.0
    # Writers stall when pending immutables exceed 1 or L0 reaches
    # 2 x l0_compaction_trigger; derived, kept here so tests can tighten them.
    max_immutable_memtables: int = 1

    def validate(self) -> "EngineConfig":
        sizes = {
            "memtable_limit": self.memtable_limit,
            "sst_target_size": self.sst_target_size,
            "merge_buffer_size": self.merge_buffer_size,
            "base_level_bytes": self.base_level_bytes,
            "max_value_size": self.max_value_size,
        }
        for name, v in sizes.items():
            if v <= 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.merge_buffer_size > self.sst_target_size:
            raise ValueError("merge_buffer_size must be <= sst_target_size")
        if self.io_backend not in ("sync", "async", "sim"):
            raise ValueError(f"unknown io backend {self.io_backend!r}")
        if self.l0_compaction_trigger < 1:
            raise ValueError("l0_compaction_trigger must be >= 1")
        if self.level_size_ratio < 2:
            raise ValueError("level_size_ratio must be >= 2")
        return self

    @property
    def l0_stall_limit(self) -> int:
        return 2 * self.l0_compaction_trigger

    def with_overrides(self, **kw) -> "EngineConfig":
        return replace(self, **kw).validate()


# Mapping between config-file keys and EngineConfig attributes.  Dotted io.*
# names follow the external interface contract.
CONFIG_KEYS = {
    "memtable_limit": ("memtable_limit", int),
    "sst_target_size": ("sst_target_size", int),
    "merge_buffer_size": ("merge_buffer_size", int),
    "l0_compaction_trigger": ("l0_compaction_trigger", int),
    "level_size_ratio": ("level_size_ratio", int),
    "base_level_bytes": ("base_level_bytes", int),
    "compaction_threads": ("compaction_threads", int),
    "wal_fsync_each_write": ("wal_fsync_each_write", None),  # bool, parsed below
    "ledger_sweep_max_age": ("ledger_sweep_max_age", float),
    "io.backend": ("io_backend", str),
    "io.sim_write_latency_us_per_mib": ("sim_write_latency_us_per_mib", float),
    "io.sim_fsync_latency_us": ("sim_fsync_latency_us", float),
    "io.sim_fsync_latency_us_per_mib": ("sim_fsync_latency_us_per_mib", float),
    "io.direct_poll": ("direct_io_poll", None),
    "checkup_blocking": ("checkup_blocking", None),
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def config_from_file(path, base: EngineConfig | None = None) -> EngineConfig:
    """Load key=value overrides onto a base config."""
    cfg = base or EngineConfig()
    updates = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            attr, conv = CONFIG_KEYS[key]
            updates[attr] = _parse_bool(raw) if conv is None else conv(raw)
    return cfg.with_overrides(**updates)


def level_capacity(config: EngineConfig, n: int) -> int:
    """Byte capacity of level n >= 1; level 0 is file-count triggered."""
    if n < 1:
        raise ValueError("level 0 has no byte capacity; it is count-triggered")
    return config.base_level_bytes * config.level_size_ratio ** (n - 1)
