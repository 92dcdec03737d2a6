"""bench: workload driver, A/B comparison, crash matrix, ledger maintenance.

Examples:
    bench run --workload fillrandom --ops 100000 --value-size 1024 \\
              --threads 4 --backend async --seed 42 --out report.json
    bench ab --profile nvme-sim --ops 200000 --value-size 1024
    bench crash --points all --seeds 1,2,3
    bench ledger-dump --db /path/to/db
"""

from __future__ import annotations

import argparse
import json
import sys

from ..engine import Engine
from ..model import EngineConfig, config_from_file
from . import crash as crash_mod
from . import runner
from . import workload as wl


def _add_workload_args(p: argparse.ArgumentParser):
    p.add_argument("--workload", default="fillrandom", choices=wl.KINDS)
    p.add_argument("--ops", type=int, default=100_000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--key-size", type=int, default=16)
    p.add_argument("--value-size", type=int, default=1024)
    p.add_argument("--distribution", default="uniform", choices=wl.DISTRIBUTIONS)
    p.add_argument("--key-space", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


def _spec_from_args(args) -> wl.WorkloadSpec:
    return wl.WorkloadSpec(
        kind=args.workload,
        num_ops=args.ops,
        threads=args.threads,
        key_size=args.key_size,
        value_size=args.value_size,
        key_distribution=args.distribution,
        seed=args.seed,
        key_space=args.key_space,
    )


def _config_from_args(args, backend: str | None = None) -> EngineConfig:
    cfg = runner.desk_config()
    if getattr(args, "config", None):
        cfg = config_from_file(args.config, cfg)
    if backend:
        cfg = cfg.with_overrides(io_backend=backend)
    return cfg


def _emit(payload: dict, out_path: str | None, human: str | None = None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    if human:
        print(human)
    else:
        print(text)


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    cfg = _config_from_args(args, backend=args.backend)
    if args.backend == "sim" and args.profile:
        cfg = runner.calibrate_profile(value_size=spec.value_size).apply(
            cfg, "sim"
        )
    report, _ = runner.run_workload(spec, cfg, directory=args.db)
    _emit(json.loads(report.to_json()), args.out, report.table())
    return 0


def cmd_ab(args) -> int:
    spec = _spec_from_args(args)
    cfg = _config_from_args(args)
    profile = None
    if args.profile:
        profile = runner.calibrate_profile(
            name=args.profile, value_size=spec.value_size
        )
    result = runner.ab_compare(spec, cfg, profile=profile)
    human = (
        f"throughput ratio (async/sync): {result['throughput_ratio']:.3f}\n"
        f"stall ratio (async/sync):      {result['stall_ratio']:.3f}\n"
        f"p99 ratio (async/sync):        {result['p99_ratio']:.3f}\n"
        f"sync fsync share:              {result['sync_fsync_pct']:.1f}%"
    )
    _emit(result, args.out, human)
    return 0


def cmd_crash(args) -> int:
    if args.points == "all":
        points = None
    else:
        points = [p.strip() for p in args.points.split(",") if p.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    verdicts = crash_mod.crash_matrix(
        points,
        seeds=seeds,
        ops=args.ops,
        wal_fsync_each_write=not args.no_wal_fsync,
        progress=lambda v: print(v.line(), flush=True),
    )
    report = crash_mod.matrix_report(verdicts)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    print(f"crash matrix: {report['passed']}/{report['total']} passed")
    return 0 if report["passed"] == report["total"] else 1


def cmd_crash_child(args) -> int:
    return crash_mod.run_crash_child(
        args.db, args.ops, args.seed, args.wal_fsync, args.idle_tail
    )


def cmd_ledger_sweep(args) -> int:
    engine = Engine(args.db, _config_from_args(args))
    try:
        retired = engine.ledger_sweep(max_age=0.0)
        print(f"retired epochs: {retired or 'none'}")
    finally:
        engine.close(flush=False)
    return 0


def cmd_ledger_dump(args) -> int:
    engine = Engine(args.db, _config_from_args(args))
    try:
        entries = engine.ledger_dump()
        if not entries:
            print("ledger empty")
        for e in entries:
            print(
                f"epoch {e['epoch']:>6}  {e['state']:<8} "
                f"parents={e['parents']} offspring={e['offspring']} "
                f"age={e['age_seconds']:.1f}s"
            )
    finally:
        engine.close(flush=False)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bench", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one workload and report")
    _add_workload_args(p)
    p.add_argument("--backend", default="sync", choices=("sync", "async", "sim"))
    p.add_argument("--profile", default=None, help="e.g. nvme-sim")
    p.add_argument("--db", default=None, help="database directory (default: temp)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", default=None, help="write JSON report here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ab", help="A/B: blocking vs async compaction I/O")
    _add_workload_args(p)
    p.add_argument("--profile", default="nvme-sim")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ab)

    p = sub.add_parser("crash", help="run the crash-injection matrix")
    p.add_argument("--points", default="all")
    p.add_argument("--seeds", default="1")
    p.add_argument("--ops", type=int, default=crash_mod.DEFAULT_OPS)
    p.add_argument("--no-wal-fsync", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_crash)

    p = sub.add_parser("crash-child")  # internal: the process that dies
    p.add_argument("--db", required=True)
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--wal-fsync", action="store_true")
    p.add_argument("--idle-tail", type=float, default=0.0)
    p.set_defaults(func=cmd_crash_child)

    p = sub.add_parser("ledger-sweep", help="force a ledger outlier sweep")
    p.add_argument("--db", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ledger_sweep)

    p = sub.add_parser("ledger-dump", help="print ledger entries and states")
    p.add_argument("--db", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ledger_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
