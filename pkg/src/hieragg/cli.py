"""Command line entry point.

Exit codes: 0 success, 1 hierarchy validation error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

from .harness import (
    ExperimentConfigError,
    SimulationConfig,
    replay_source,
    run_reliability,
    run_simulation,
    scalability_sweep,
    scaling_fit,
    synthetic_source,
    write_metrics_csv,
    write_reliability_csv,
    write_scalability_csv,
)
from .hierarchy import HierarchyError, read_hierarchy, read_membership_events
from .runtime import DEFAULT_CAPACITY, ClusterConfigError
from .topology import result_to_json
from .workload import WorkloadSpec, read_measurements, replay_by_second

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2

log = logging.getLogger("hieragg")


def parse_range(text: str) -> List[int]:
    """``"1..3"`` -> [1, 2, 3]; ``"1,3"`` -> [1, 3]."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..3 or a list like 1,2,3: {text!r}")


def _open_out(path: str):
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8", newline="")


def cmd_validate(args: argparse.Namespace) -> int:
    with open(args.hierarchy, encoding="utf-8") as fh:
        table = read_hierarchy(fh)
    print(f"ok: {len(table)} memberships, {len(table.groups())} groups, depth {table.depth()}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    with open(args.hierarchy, encoding="utf-8") as fh:
        table = read_hierarchy(fh)
    changes = []
    if args.changes:
        with open(args.changes, encoding="utf-8") as fh:
            changes = read_membership_events(fh)
    if args.input == "synthetic":
        sensors = table.leaves()
        if not sensors:
            raise ExperimentConfigError("hierarchy has no leaf sensors to simulate")
        spec = WorkloadSpec(fan_out=1, depth=1, duration=args.duration, seed=args.seed)
        source = synthetic_source(spec, sensors)
        duration = args.duration
    else:
        with open(args.input, encoding="utf-8") as fh:
            by_second = replay_by_second(read_measurements(fh))
        source = replay_source(by_second)
        duration = max(by_second, default=-1) + 1
    config = SimulationConfig(capacity=args.capacity, partitions=args.partitions)
    results_fh = open(args.results, "w", encoding="utf-8") if args.results else None
    sink = None
    if results_fh is not None:
        sink = lambda now, res: results_fh.write(json.dumps(result_to_json(res)) + "\n")  # noqa: E731
    try:
        run = run_simulation(
            table, source, duration, args.instances, config,
            seed=args.seed, membership_changes=changes, drain=True, result_sink=sink,
        )
    finally:
        if results_fh is not None:
            results_fh.close()
    out = _open_out(args.out)
    try:
        write_metrics_csv(run.rows, out)
    finally:
        if out is not sys.stdout:
            out.close()
    c = run.cluster
    log.info(
        "simulated %d s (+%d s drain); late records rejected: %d; membership events rejected: %d",
        duration, run.drained_s, c.late_rejected, len(c.rejected_memberships),
    )
    return EXIT_OK


def cmd_scalability(args: argparse.Namespace) -> int:
    config = SimulationConfig(
        capacity=args.capacity,
        partitions=args.partitions,
        warmup_s=args.warmup,
        threshold_ms=args.threshold_ms,
    )
    if args.duration <= args.warmup + 1:
        raise ExperimentConfigError("duration must exceed warm-up by at least two seconds")
    results = scalability_sweep(
        args.fanout, args.depths, args.reps, config,
        max_instances=args.max_instances, duration=args.duration, seed=args.seed,
    )
    out = _open_out(args.out)
    try:
        write_scalability_csv(results, out, args.fanout)
    finally:
        if out is not sys.stdout:
            out.close()
    for r in results:
        print(f"{r.workload} rec/s: median {r.median_required} instances (reps {r.required_instances})", file=sys.stderr)
    try:
        b, r2 = scaling_fit(results)
        print(f"through-origin fit: {b:.5f} instances per rec/s, R^2 = {r2:.4f}", file=sys.stderr)
    except ExperimentConfigError as exc:
        print(f"no fit: {exc}", file=sys.stderr)
    return EXIT_OK


def cmd_reliability(args: argparse.Namespace) -> int:
    spec = WorkloadSpec(args.fanout, args.depth, duration=args.duration, seed=args.seed)
    config = None
    if args.capacity is not None:
        config = SimulationConfig(capacity=args.capacity, partitions=args.partitions)
    elif args.partitions is not None:
        config = SimulationConfig(capacity=2.0 * spec.total_rate / args.instances, partitions=args.partitions)
    series = run_reliability(
        spec, args.instances, args.kill, args.fail_at, args.recover_at, args.window, config,
    )
    out = _open_out(args.out)
    try:
        write_reliability_csv(series, out)
    finally:
        if out is not sys.stdout:
            out.close()
    print(
        f"capacity {series.capacity:.3f} rec/s per instance; generated {sum(series.generated)}, "
        f"processed {sum(series.processed)}",
        file=sys.stderr,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hieragg", description="Hierarchical sensor stream aggregation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a hierarchy file for cycles and duplicate ids")
    v.add_argument("--hierarchy", required=True)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="simulate a deployment and write per-second metrics")
    r.add_argument("--hierarchy", required=True)
    r.add_argument("--input", default="synthetic", help="measurement file (NDJSON) or 'synthetic'")
    r.add_argument("--instances", type=int, default=1)
    r.add_argument("--partitions", type=int, default=8)
    r.add_argument("--capacity", type=float, default=DEFAULT_CAPACITY)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--duration", type=int, default=60, help="seconds of synthetic input")
    r.add_argument("--changes", help="membership change stream (NDJSON with ts)")
    r.add_argument("--results", help="write aggregation results (NDJSON) here")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("experiment", help="reproduce the scalability or reliability evaluation")
    esub = e.add_subparsers(dest="experiment", required=True)

    s = esub.add_parser("scalability")
    s.add_argument("--fanout", type=int, default=8)
    s.add_argument("--depths", type=parse_range, default=[1, 2, 3])
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--max-instances", type=int, default=128)
    s.add_argument("--threshold-ms", type=float, default=100.0)
    s.add_argument("--capacity", type=float, default=5.0)
    s.add_argument("--partitions", type=int, default=1024)
    s.add_argument("--duration", type=int, default=120)
    s.add_argument("--warmup", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_scalability)

    rel = esub.add_parser("reliability")
    rel.add_argument("--fanout", type=int, default=8)
    rel.add_argument("--depth", type=int, default=3)
    rel.add_argument("--instances", type=int, default=24)
    rel.add_argument("--kill", type=int, default=18)
    rel.add_argument("--fail-at", type=int, default=600)
    rel.add_argument("--recover-at", type=int, default=900)
    rel.add_argument("--window", type=int, default=60)
    rel.add_argument("--duration", type=int, default=1500)
    rel.add_argument("--capacity", type=float, default=None, help="default: 2x the input rate across instances")
    rel.add_argument("--partitions", type=int, default=None)
    rel.add_argument("--seed", type=int, default=0)
    rel.add_argument("--out", default="-")
    rel.set_defaults(func=cmd_reliability)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except HierarchyError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ExperimentConfigError, ClusterConfigError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
