"""Command line interface.

Verbs:
  register      index data files into a sample store
  run           execute a pipeline config in experiment mode, emit reports
  bench         loader throughput sweep (workers x prefetch x requests x threads)
  report        `report check <dir>`: re-validate emitted report files
  compare       build the cost-accuracy feasible set across run reports

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 no triggers fired.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_NO_TRIGGERS = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamtrain",
        description="continuous training pipelines over timestamped sample streams",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="index data files into a sample store")
    reg.add_argument("files", nargs="+", help="data files to register, in order")
    reg.add_argument("--store", required=True, help="store directory (created if missing)")
    reg.add_argument("--dataset-id", default=None, help="dataset id (default: store dir name)")
    reg.add_argument("--wrapper", required=True,
                     choices=["binary_fixed_record", "csv", "single_sample"])
    reg.add_argument("--record-bytes", type=int, default=None, help="binary record size")
    reg.add_argument("--label-column", type=int, default=None, help="csv label column")
    reg.add_argument("--header", action="store_true", help="csv first row is a header")
    reg.add_argument("--label", type=int, default=-1, help="single_sample label")
    reg.add_argument("--base-timestamp", type=int, default=0)
    reg.add_argument("--timestamp-step", type=int, default=0,
                     help="per-sample timestamp increment within each file")

    run = sub.add_parser("run", help="run a pipeline in experiment mode")
    run.add_argument("config", help="pipeline configuration document (YAML)")
    run.add_argument("--dataset", required=True, help="registered store directory")
    run.add_argument("--out", required=True, help="output directory for reports")
    run.add_argument("--dump-normalized", action="store_true",
                     help="print the normalized config and exit")

    bench = sub.add_parser("bench", help="loader throughput sweep")
    bench.add_argument("--dataset", required=True, help="registered store directory")
    bench.add_argument("--out", required=True, help="output CSV path")
    bench.add_argument("--workers", default="1,4", help="comma-separated worker counts")
    bench.add_argument("--prefetch", default="0,1", help="comma-separated prefetch depths")
    bench.add_argument("--parallel-requests", default="1")
    bench.add_argument("--storage-threads", default="1")
    bench.add_argument("--partition-size", type=int, default=100_000)
    bench.add_argument("--batch-size", type=int, default=8192)
    bench.add_argument("--reps", type=int, default=3)
    bench.add_argument("--no-baseline", action="store_true",
                       help="skip the sequential-read baseline row")

    report = sub.add_parser("report", help="report utilities")
    report_sub = report.add_subparsers(dest="report_command", required=True)
    check = report_sub.add_parser("check", help="validate emitted report files")
    check.add_argument("dirs", nargs="+", help="run output directories")

    compare = sub.add_parser("compare", help="feasible set across run reports")
    compare.add_argument("runs", nargs="+", help="run.json files or run directories")
    compare.add_argument("--metric", default="accuracy")
    compare.add_argument("--variant", default="currently_active",
                         choices=["currently_active", "currently_trained"])
    compare.add_argument("--cost", default="num_triggers",
                         choices=["num_triggers", "samples_trained", "wall_clock_seconds"])
    compare.add_argument("--skip-policy", default="after_first_common_trigger",
                         choices=["skip_gaps", "after_first_common_trigger"])
    compare.add_argument("--out", default=None, help="optional CSV output path")
    return parser


def _intlist(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x != ""]


def cmd_register(args) -> int:
    from .storage import FileRecordSpec, SampleStore, StorageError

    store_dir = Path(args.store)
    try:
        if (store_dir / SampleStore.MANIFEST_FILE).exists():
            store = SampleStore.open(store_dir)
        else:
            store = SampleStore.create(store_dir, args.dataset_id or store_dir.name)
        spec = FileRecordSpec(
            wrapper_kind=args.wrapper,
            record_bytes=args.record_bytes,
            label_column=args.label_column,
            has_header=args.header,
            label=args.label,
        )
    except StorageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        total = 0
        for path in args.files:
            ts = None
            if args.timestamp_step:
                from .storage import _read_mdsf_header

                if args.wrapper == "binary_fixed_record":
                    _, count = _read_mdsf_header(path)
                    ts = [i * args.timestamp_step for i in range(count)]
            keys = store.register_file(path, spec, args.base_timestamp, ts)
            total += len(keys)
            print(f"registered {path}: {len(keys)} samples (keys {keys[0]}..{keys[-1]})"
                  if len(keys) else f"registered {path}: 0 samples")
        print(f"store {store_dir} now holds {len(store)} samples ({total} new)")
        return EXIT_OK
    except StorageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_run(args) -> int:
    from .config import ConfigError, dump_config, parse_config
    from .reports import evaluate_run, write_reports
    from .storage import SampleStore, StorageError
    from .supervisor import SupervisorError, run_pipeline

    try:
        document = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        config, normalized = parse_config(document)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        print(json.dumps({"errors": exc.errors}), file=sys.stderr)
        return EXIT_VALIDATION
    if args.dump_normalized:
        print(dump_config(normalized), end="")
        return EXIT_OK
    try:
        store = SampleStore.open(args.dataset)
    except StorageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out_dir = Path(args.out)
    try:
        run = run_pipeline(config, store, out_dir / "work")
    except SupervisorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if run.status == "no_triggers":
        write_reports(out_dir, run, None, normalized)
        print("no_triggers: the policy never fired; no models were trained")
        return EXIT_NO_TRIGGERS
    evaluation = evaluate_run(run, store, config)
    written = write_reports(out_dir, run, evaluation, normalized)
    print(f"{run.num_triggers} triggers, {run.samples_trained} samples trained, "
          f"{run.wall_clock_seconds:.2f}s")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import tempfile

    from .bench import run_bench, write_bench_csv
    from .storage import SampleStore, StorageError

    try:
        store = SampleStore.open(args.dataset)
    except StorageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    with tempfile.TemporaryDirectory(prefix="streamtrain_bench_") as work:
        results = run_bench(
            store,
            work,
            workers=_intlist(args.workers),
            prefetch_partitions=_intlist(args.prefetch),
            parallel_requests=_intlist(args.parallel_requests),
            storage_threads=_intlist(args.storage_threads),
            partition_size=args.partition_size,
            batch_size=args.batch_size,
            reps=args.reps,
            include_baseline=not args.no_baseline,
        )
    path = write_bench_csv(args.out, results)
    for r in results:
        print(f"{r.mode} workers={r.workers} prefetch={r.prefetch_partitions} "
              f"requests={r.parallel_requests} threads={r.storage_threads}: "
              f"{r.samples_per_second:,.0f} samples/s")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_report_check(args) -> int:
    from .reports import check_report_dir

    failures = 0
    for d in args.dirs:
        problems = check_report_dir(d)
        if problems:
            failures += 1
            print(f"{d}: FAILED")
            for p in problems:
                print(f"  - {p}")
        else:
            print(f"{d}: ok")
    return EXIT_OK if failures == 0 else EXIT_VALIDATION


def cmd_compare(args) -> int:
    from .evaluator import EvaluatorError, feasible_set
    from .reports import ReportError, load_run_report, write_feasible_set

    try:
        runs = [load_run_report(p) for p in args.runs]
        points = feasible_set(runs, args.metric, args.cost, args.variant, args.skip_policy)
    except (ReportError, EvaluatorError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for p in points:
        star = " *pareto*" if p.pareto_optimal else ""
        print(f"{p.pipeline_id}: score={p.score:.4f} cost={p.cost:g}{star}")
    if args.out:
        path = write_feasible_set(args.out, points)
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "register":
        return cmd_register(args)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "bench":
        return cmd_bench(args)
    if args.command == "report":
        return cmd_report_check(args)
    if args.command == "compare":
        return cmd_compare(args)
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
