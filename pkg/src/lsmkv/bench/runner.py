"""Workload execution, reporting, profile calibration, and A/B comparison."""

from __future__ import annotations

import json
import shutil
import tempfile
import threading
import time
from array import array
from dataclasses import asdict, dataclass, field

from ..engine import Engine
from ..model import MIB, EngineConfig
from . import workload as wl

# NVMe-like target: fsync takes 46.0% of a synchronous compaction (compute
# 47.7%, writes 6.3%).  The calibration pins the fsync share; the write
# term uses a smaller desk-scale fraction because hiding the full 6.3%
# alongside fsync pushes the async/sync ratio past the 1.9x analytical
# ceiling for fsync removal alone.
NVME_FSYNC_SHARE = 0.460
NVME_COMPUTE_SHARE = 0.477
DESK_WRITE_FRACTION_OF_COMPUTE = 0.06


def desk_config(**overrides) -> EngineConfig:
    """Desk-scale geometry: the production 64 MiB / 64 MiB / 10x shape shrunk
    so a 2 GiB run builds 3-4 levels in minutes."""
    base = dict(
        memtable_limit=8 * MIB,
        sst_target_size=8 * MIB,
        merge_buffer_size=1 * MIB,
        base_level_bytes=32 * MIB,
        l0_compaction_trigger=4,
        # Two workers let one job's device sleeps overlap another's compute,
        # keeping the comparison compaction-bound rather than worker-bound.
        compaction_threads=2,
        io_pool_size=4,
    )
    base.update(overrides)
    return EngineConfig(**base).validate()


@dataclass
class Profile:
    """Simulated device latencies."""

    name: str
    write_us_per_mib: float
    fsync_base_us: float
    fsync_us_per_mib: float

    def apply(self, cfg: EngineConfig, backend: str) -> EngineConfig:
        return cfg.with_overrides(
            io_backend=backend,
            sim_write_latency_us_per_mib=self.write_us_per_mib,
            sim_fsync_latency_us=self.fsync_base_us,
            sim_fsync_latency_us_per_mib=self.fsync_us_per_mib,
        )


@dataclass
class RunReport:
    workload: str
    backend: str
    num_ops: int
    threads: int
    value_size: int
    total_time: float
    throughput_ops: float
    throughput_mib: float
    stall_time: float
    p99_latency_ms: float
    found: int
    not_found: int
    write_amplification: float
    compactions: int
    fallback_fraction: float
    pipelining_overlaps: int
    phase_pcts: dict = field(default_factory=dict)
    engine_metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("workload", self.workload),
            ("backend", self.backend),
            ("ops", f"{self.num_ops}"),
            ("threads", f"{self.threads}"),
            ("value size", f"{self.value_size} B"),
            ("total time", f"{self.total_time:.2f} s"),
            ("throughput", f"{self.throughput_ops:,.0f} ops/s"),
            ("bandwidth", f"{self.throughput_mib:.2f} MiB/s"),
            ("stall time", f"{self.stall_time:.2f} s"),
            ("p99 latency", f"{self.p99_latency_ms:.3f} ms"),
            ("found / not found", f"{self.found} / {self.not_found}"),
            ("write amplification", f"{self.write_amplification:.2f}"),
            ("compactions", f"{self.compactions}"),
            ("fallback fraction", f"{self.fallback_fraction:.3f}"),
            ("pipeline overlaps", f"{self.pipelining_overlaps}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


class _Driver(threading.Thread):
    def __init__(self, engine: Engine, spec: wl.WorkloadSpec, thread_id: int,
                 latencies: array):
        super().__init__(name=f"driver-{thread_id}", daemon=True)
        self.engine = engine
        self.spec = spec
        self.thread_id = thread_id
        self.latencies = latencies
        self.found = 0
        self.not_found = 0
        self.error: Exception | None = None

    def run(self):
        eng = self.engine
        lat = self.latencies
        scan_len = self.spec.scan_length
        perf = time.perf_counter
        try:
            for op, key, value in wl.thread_ops(self.spec, self.thread_id):
                t0 = perf()
                if op == wl.PUT:
                    eng.put(key, value)
                elif op == wl.GET:
                    if eng.get(key) is None:
                        self.not_found += 1
                    else:
                        self.found += 1
                elif op == wl.DELETE:
                    eng.delete(key)
                else:  # SCAN
                    if key:
                        got = eng.range_scan(key, scan_len)
                        self.found += len(got)
                    else:
                        for _ in eng.scan():
                            self.found += 1
                lat.append(perf() - t0)
        except Exception as e:  # noqa: BLE001
            self.error = e


def run_workload(
    spec: wl.WorkloadSpec,
    config: EngineConfig,
    directory: str | None = None,
    engine: Engine | None = None,
    keep_engine: bool = False,
    quiesce: bool = False,
):
    """Drive the engine with one workload; returns (report, engine|None).

    The timed window covers request completion only; post-run quiescing is
    excluded, mirroring how foreground benchmarks account service time.
    """
    own_dir = None
    if engine is None:
        if directory is None:
            directory = own_dir = tempfile.mkdtemp(prefix="lsmkv-bench-")
        engine = Engine(directory, config)

    drivers = [
        _Driver(engine, spec, t, array("d")) for t in range(spec.threads)
    ]
    t0 = time.monotonic()
    for d in drivers:
        d.start()
    for d in drivers:
        d.join()
    total_time = time.monotonic() - t0
    for d in drivers:
        if d.error is not None:
            raise d.error

    if quiesce:
        engine.wait_idle(timeout=600.0)

    all_lat = sorted(x for d in drivers for x in d.latencies)
    if all_lat:
        p99 = all_lat[min(len(all_lat) - 1, int(len(all_lat) * 0.99))]
    else:
        p99 = 0.0
    snap = engine.metrics_snapshot()
    user_bytes = spec.num_ops * (spec.key_size + spec.value_size)
    report = RunReport(
        workload=spec.kind,
        backend=config.io_backend,
        num_ops=spec.num_ops,
        threads=spec.threads,
        value_size=spec.value_size,
        total_time=total_time,
        throughput_ops=spec.num_ops / total_time if total_time else 0.0,
        throughput_mib=(user_bytes / MIB) / total_time if total_time else 0.0,
        stall_time=snap["stall_seconds"],
        p99_latency_ms=p99 * 1000.0,
        found=sum(d.found for d in drivers),
        not_found=sum(d.not_found for d in drivers),
        write_amplification=snap["write_amplification"],
        compactions=snap["compactions_count"],
        fallback_fraction=snap["fallback_fraction"],
        pipelining_overlaps=snap["pipelining_overlaps"],
        phase_pcts=snap["phase_pcts"],
        engine_metrics=snap,
    )
    if keep_engine:
        return report, engine
    engine.close()
    if own_dir:
        shutil.rmtree(own_dir, ignore_errors=True)
    return report, None


def measure_compute_rate(
    sample_mib: int = 48,
    value_size: int = 1024,
    threads: int = 4,
    seed: int = 4242,
) -> float:
    """Seconds of compaction compute per MiB of output on this host.

    Times real synchronous compactions (zero injected latency) inside a
    small fillrandom run with the same thread pressure as the target
    benchmark, so decode costs and interpreter contention are included.
    """
    ops = max(4096, (sample_mib * MIB) // (16 + value_size))
    spec = wl.WorkloadSpec(
        kind="fillrandom",
        num_ops=ops,
        threads=threads,
        value_size=value_size,
        seed=seed,
    )
    cfg = desk_config(io_backend="sync")
    report, _ = run_workload(spec, cfg, quiesce=True)
    m = report.engine_metrics
    out_mib = m["compact_write_bytes"] / MIB
    if out_mib <= 0:
        raise RuntimeError("calibration run produced no compactions")
    return m["compute_seconds"] / out_mib


def _solve_profile(name: str, compute_s_per_mib: float) -> Profile:
    write_frac = DESK_WRITE_FRACTION_OF_COMPUTE
    # share = F / (C + W + F)  =>  F = share/(1-share) * (C + W)
    fsync_odds = NVME_FSYNC_SHARE / (1.0 - NVME_FSYNC_SHARE)
    return Profile(
        name=name,
        write_us_per_mib=compute_s_per_mib * write_frac * 1e6,
        fsync_base_us=200.0,
        fsync_us_per_mib=compute_s_per_mib * fsync_odds * (1.0 + write_frac) * 1e6,
    )


def calibrate_profile(
    name: str = "nvme-sim",
    value_size: int = 1024,
    compute_s_per_mib: float | None = None,
    refine: bool = True,
    sample_mib: int = 48,
    threads: int = 4,
) -> Profile:
    """Solve device latencies so a synchronous compaction spends ~46% of its
    wall time blocked in fsync.

    First pass measures compaction compute with zero injected latency; the
    refinement re-runs the sample under the candidate profile, where stall
    dynamics match the target run, and rescales the fsync term from the
    observed share.
    """
    if compute_s_per_mib is None:
        compute_s_per_mib = measure_compute_rate(
            sample_mib=sample_mib, value_size=value_size, threads=threads
        )
    profile = _solve_profile(name, compute_s_per_mib)
    if not refine:
        return profile
    ops = max(4096, (sample_mib * MIB) // (16 + value_size))
    spec = wl.WorkloadSpec(
        kind="fillrandom", num_ops=ops, threads=threads,
        value_size=value_size, seed=2424,
    )
    report, _ = run_workload(
        spec, profile.apply(desk_config(), "sync"), quiesce=True
    )
    m = report.engine_metrics
    busy = m["compute_seconds"] + m["write_wait_seconds"]
    fsync_s = m["fsync_wait_seconds"]
    if busy > 0 and fsync_s > 0:
        measured_odds = fsync_s / busy
        target_odds = NVME_FSYNC_SHARE / (1.0 - NVME_FSYNC_SHARE)
        profile.fsync_us_per_mib *= target_odds / measured_odds
    return profile


def ab_compare(
    spec: wl.WorkloadSpec,
    config: EngineConfig | None = None,
    profile: Profile | None = None,
    verify_parity: bool = False,
) -> dict:
    """Run the same seeded workload under blocking-I/O compactions and the
    asynchronous model on one simulated device; report the ratios."""
    cfg = config or desk_config()
    if profile is None:
        profile = calibrate_profile(value_size=spec.value_size)
    reports = {}
    parity = {}
    for label, backend in (("sync", "sync"), ("async", "sim")):
        run_cfg = profile.apply(cfg, backend)
        report, engine = run_workload(
            spec, run_cfg, keep_engine=verify_parity
        )
        reports[label] = report
        if verify_parity and engine is not None:
            read_spec = wl.WorkloadSpec(
                kind="readrandom",
                num_ops=max(1, spec.num_ops // 20),
                threads=spec.threads,
                key_size=spec.key_size,
                value_size=spec.value_size,
                seed=spec.seed + 777,
                key_space=spec.key_space,
            )
            read_report, _ = run_workload(
                read_spec, run_cfg, engine=engine, quiesce=False
            )
            parity[label] = {
                "found": read_report.found,
                "not_found": read_report.not_found,
            }
            engine.close()
    sync_r, async_r = reports["sync"], reports["async"]
    result = {
        "profile": asdict(profile),
        "sync": asdict(sync_r),
        "async": asdict(async_r),
        "throughput_ratio": async_r.throughput_ops / sync_r.throughput_ops,
        "stall_ratio": (
            async_r.stall_time / sync_r.stall_time
            if sync_r.stall_time > 0
            else 0.0
        ),
        "p99_ratio": (
            async_r.p99_latency_ms / sync_r.p99_latency_ms
            if sync_r.p99_latency_ms > 0
            else 0.0
        ),
        "sync_fsync_pct": sync_r.phase_pcts.get("fsync_pct", 0.0),
        "async_blocking_io_pct": (
            async_r.phase_pcts.get("write_pct", 0.0)
            + async_r.phase_pcts.get("fsync_pct", 0.0)
        ),
    }
    if parity:
        result["read_parity"] = parity
    return result
