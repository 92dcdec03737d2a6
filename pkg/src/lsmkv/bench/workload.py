"""Request generation: db_bench-style and YCSB-style workloads.

A fixed seed yields a byte-identical request stream.  Key indexes are
partitioned across driver threads (thread t owns indexes congruent to t),
so the final database state is independent of thread interleaving and an
in-memory reference map can serve as an exact oracle.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field

KINDS = (
    "fillrandom",
    "fillseq",
    "overwrite",
    "readseq",
    "readrandom",
    "load",
    "ycsb_a",
    "ycsb_b",
    "ycsb_c",
    "ycsb_d",
    "ycsb_e",
    "ycsb_f",
)

DISTRIBUTIONS = ("uniform", "zipfian", "latest")

PUT, DELETE, GET, SCAN = "put", "delete", "get", "scan"

ZIPFIAN_CONSTANT = 0.99


@dataclass
class WorkloadSpec:
    kind: str
    num_ops: int
    threads: int = 1
    key_size: int = 16
    value_size: int = 100
    key_distribution: str = "uniform"
    seed: int = 0
    key_space: int | None = None  # distinct key indexes; kind-dependent default
    delete_fraction: float = 0.0  # extra deletes mixed into write workloads
    scan_length: int = 50  # ycsb_e short ranges

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.key_distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.key_distribution!r}")
        if self.key_space is None:
            # num_ops distinct keys gives uniform fillrandom ~63% coverage,
            # the classic 1 - 1/e shape for follow-up random reads.
            self.key_space = max(1, self.num_ops)

    def ops_for_thread(self, thread_id: int) -> int:
        base, extra = divmod(self.num_ops, self.threads)
        return base + (1 if thread_id < extra else 0)


_zeta_cache: dict[tuple[int, float], float] = {}


def _zeta(n: int, theta: float) -> float:
    key = (n, theta)
    z = _zeta_cache.get(key)
    if z is None:
        z = 0.0
        for i in range(1, n + 1):
            z += 1.0 / i**theta
        _zeta_cache[key] = z
    return z


class ZipfianGenerator:
    """Classic skewed generator (constant 0.99), scrambled over the space."""

    def __init__(self, n: int, rnd: random.Random, theta: float = ZIPFIAN_CONSTANT):
        if n < 1:
            raise ValueError("zipfian needs a non-empty space")
        self.n = n
        self.rnd = rnd
        self.theta = theta
        self.zetan = _zeta(n, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - _zeta(2, theta) / self.zetan)

    def next_rank(self) -> int:
        u = self.rnd.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5**self.theta:
            return 1
        return int(self.n * (self.eta * u - self.eta + 1) ** self.alpha)

    def next(self) -> int:
        # FNV-1a scramble spreads the hot ranks over the key space.
        h = 0xCBF29CE484222325
        for b in struct.pack("<Q", self.next_rank()):
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h % self.n


class LatestGenerator:
    """Skews toward the most recently inserted index."""

    def __init__(self, initial_count: int, rnd: random.Random):
        self.count = max(1, initial_count)
        self.rnd = rnd
        self._zipf = ZipfianGenerator(self.count, rnd)

    def observe_insert(self):
        self.count += 1
        if self.count > self._zipf.n * 2:
            self._zipf = ZipfianGenerator(self.count, self.rnd)

    def next(self) -> int:
        offset = self._zipf.next_rank() % self.count
        return self.count - 1 - offset


def make_key(index: int, key_size: int) -> bytes:
    # Zero-padded so lexicographic order matches numeric order.
    return (b"%d" % index).rjust(key_size, b"0")[-key_size:]


_FILLER: dict[int, bytes] = {}


def make_value(thread_id: int, op_index: int, value_size: int) -> bytes:
    head = struct.pack("<IQ", thread_id, op_index)
    if value_size <= len(head):
        return head[:value_size]
    filler = _FILLER.get(value_size)
    if filler is None:
        filler = (b"abcdefgh" * (value_size // 8 + 1))[: value_size - len(head)]
        _FILLER[value_size] = filler
    return head + filler


def _thread_rng(spec: WorkloadSpec, thread_id: int) -> random.Random:
    return random.Random((spec.seed * 1_000_003 + thread_id) & 0xFFFFFFFFFFFF)


def _index_picker(spec: WorkloadSpec, rnd: random.Random, space: int):
    if spec.key_distribution == "zipfian":
        gen = ZipfianGenerator(space, rnd)
        return gen.next
    if spec.key_distribution == "latest":
        gen = LatestGenerator(space, rnd)
        picker = gen.next
        picker.observe_insert = gen.observe_insert  # type: ignore[attr-defined]
        return picker
    return lambda: rnd.randrange(space)


def thread_ops(spec: WorkloadSpec, thread_id: int):
    """Yield (op, key, value) for one driver thread.

    Write ops touch only key indexes owned by this thread; value payloads
    encode (thread, op#) so the reference map replays exactly.
    """
    rnd = _thread_rng(spec, thread_id)
    n_ops = spec.ops_for_thread(thread_id)
    threads = spec.threads
    own_space = max(1, spec.key_space // threads)
    ksz, vsz = spec.key_size, spec.value_size

    def own_key(local_index: int) -> bytes:
        return make_key(local_index * threads + thread_id, ksz)

    def any_key(global_index: int) -> bytes:
        return make_key(global_index, ksz)

    kind = spec.kind
    if kind in ("fillrandom", "overwrite", "load"):
        pick = _index_picker(spec, rnd, own_space)
        for i in range(n_ops):
            if spec.delete_fraction and rnd.random() < spec.delete_fraction:
                yield DELETE, own_key(pick()), None
            else:
                yield PUT, own_key(pick()), make_value(thread_id, i, vsz)
    elif kind == "fillseq":
        for i in range(n_ops):
            yield PUT, own_key(i % own_space), make_value(thread_id, i, vsz)
    elif kind == "readrandom":
        pick = _index_picker(spec, rnd, spec.key_space)
        for _ in range(n_ops):
            yield GET, any_key(pick()), None
    elif kind == "readseq":
        for _ in range(n_ops):
            yield SCAN, b"", None  # full sequential pass
    elif kind in ("ycsb_a", "ycsb_b", "ycsb_c", "ycsb_d", "ycsb_f"):
        read_fraction = {
            "ycsb_a": 0.5,
            "ycsb_b": 0.95,
            "ycsb_c": 1.0,
            "ycsb_d": 0.95,
            "ycsb_f": 0.5,
        }[kind]
        if kind == "ycsb_d":
            gen = LatestGenerator(own_space, rnd)
            inserted = own_space
            for i in range(n_ops):
                if rnd.random() < read_fraction:
                    yield GET, own_key(gen.next()), None
                else:
                    yield PUT, own_key(inserted), make_value(thread_id, i, vsz)
                    inserted += 1
                    gen.observe_insert()
        else:
            pick = _index_picker(spec, rnd, own_space)
            for i in range(n_ops):
                key = own_key(pick())
                if rnd.random() < read_fraction:
                    yield GET, key, None
                    if kind == "ycsb_f" and rnd.random() < 0.5:
                        # read-modify-write: write back a new version
                        yield PUT, key, make_value(thread_id, i, vsz)
                else:
                    yield PUT, key, make_value(thread_id, i, vsz)
    elif kind == "ycsb_e":
        pick = _index_picker(spec, rnd, own_space)
        for i in range(n_ops):
            key = own_key(pick())
            if rnd.random() < 0.95:
                yield SCAN, key, None
            else:
                yield PUT, key, make_value(thread_id, i, vsz)
    else:  # pragma: no cover
        raise AssertionError(kind)


def reference_map(spec: WorkloadSpec) -> dict[bytes, bytes]:
    """Replay all write ops into a dict: the exact expected final state."""
    state: dict[bytes, bytes] = {}
    for t in range(spec.threads):
        for op, key, value in thread_ops(spec, t):
            if op == PUT:
                state[key] = value
            elif op == DELETE:
                state.pop(key, None)
    return state


def request_stream_bytes(spec: WorkloadSpec, thread_id: int) -> bytes:
    """Flatten one thread's request stream (determinism checks)."""
    parts = []
    for op, key, value in thread_ops(spec, thread_id):
        parts.append(op.encode())
        parts.append(key)
        if value is not None:
            parts.append(value)
    return b"\x00".join(parts)


@dataclass
class CrashWorkload:
    """Single-thread mixed put/delete stream for crash testing; op i (1-based)
    maps to seqno i, so a recovered seqno identifies the surviving prefix."""

    num_ops: int
    seed: int = 0
    key_space: int = 512
    key_size: int = 16
    value_size: int = 64
    delete_every: int = 9

    def ops(self):
        rnd = random.Random(self.seed)
        for i in range(1, self.num_ops + 1):
            idx = rnd.randrange(self.key_space)
            key = make_key(idx, self.key_size)
            if self.delete_every and i % self.delete_every == 0:
                yield DELETE, key, None
            else:
                yield PUT, key, make_value(0, i, self.value_size)

    def state_after(self, k: int) -> dict[bytes, bytes]:
        state: dict[bytes, bytes] = {}
        for i, (op, key, value) in enumerate(self.ops(), start=1):
            if i > k:
                break
            if op == PUT:
                state[key] = value
            else:
                state.pop(key, None)
        return state
