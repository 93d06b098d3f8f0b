"""Experiment orchestration: simulation runs, scalability sweep, reliability run.

Statistics are deliberately plain: ordinary least squares for the latency
trend, a trailing moving average for throughput, and a through-origin
line fit for instance counts against input rate.
"""

from __future__ import annotations

import bisect
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple

from .hierarchy import MembershipEvent, MembershipTable
from .runtime import DEFAULT_CAPACITY, ClusterState, LatencySample, create_cluster
from .topology import AggregationResult, Measurement
from .workload import WorkloadSpec, generate_tick

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("t_sec", "records_in", "records_out", "avg_latency_ms", "running_instances")
SCALABILITY_COLUMNS = ("depth", "sensors", "workload", "rep", "seed", "required_instances", "median_required")
RELIABILITY_COLUMNS = (
    "t_sec",
    "generated",
    "processed",
    "generated_avg",
    "processed_avg",
    "running_instances",
)

EXCEEDS_MAX = None  # sentinel for "no candidate was sufficient"


class ExperimentConfigError(ValueError):
    pass


# --- statistics ------------------------------------------------------------


@dataclass(frozen=True)
class TrendResult:
    slope: float
    intercept: float
    sufficient: bool
    threshold: float = 100.0


def ols(ts: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    """Least-squares ``(slope, intercept)`` of ``ys`` against ``ts``."""
    if len(ts) != len(ys):
        raise ValueError("ts and ys differ in length")
    if len(set(ts)) < 2:
        raise ValueError("need at least two distinct t values for a trend line")
    n = len(ts)
    t_mean = math.fsum(ts) / n
    y_mean = math.fsum(ys) / n
    sxy = math.fsum((t - t_mean) * (y - y_mean) for t, y in zip(ts, ys))
    sxx = math.fsum((t - t_mean) ** 2 for t in ts)
    slope = sxy / sxx
    return slope, y_mean - slope * t_mean


def latency_trend(samples: Sequence[LatencySample], threshold: float = 100.0) -> TrendResult:
    """Trend of latency (ms) over run time (s); sufficient iff slope < threshold."""
    slope, intercept = ols([s.t for s in samples], [s.latency for s in samples])
    return TrendResult(slope, intercept, slope < threshold, threshold)


def moving_average(series: Sequence[float], window: int) -> List[float]:
    """Trailing mean; element ``i`` averages ``series[i : i + window]``.

    Each window is summed afresh with ``fsum`` rather than by a running
    total, so float inputs do not accumulate drift.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    return [math.fsum(series[i : i + window]) / window for i in range(len(series) - window + 1)]


def lower_median(values: Sequence[Optional[int]]) -> Optional[int]:
    """Median; the lower middle for even counts. ``None`` sorts above everything."""
    if not values:
        raise ValueError("median of empty sequence")
    ordered = sorted(values, key=lambda v: (v is None, v if v is not None else 0))
    return ordered[(len(ordered) - 1) // 2]


def through_origin_fit(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    """Fit ``y = b * x``; returns ``(b, r_squared)`` with R² about the mean of y."""
    sxx = math.fsum(x * x for x in xs)
    b = math.fsum(x * y for x, y in zip(xs, ys)) / sxx
    y_mean = math.fsum(ys) / len(ys)
    ss_res = math.fsum((y - b * x) ** 2 for x, y in zip(xs, ys))
    ss_tot = math.fsum((y - y_mean) ** 2 for y in ys)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return b, r2


# --- simulation runs -------------------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    capacity: float = DEFAULT_CAPACITY
    partitions: int = 64
    tick_ms: int = 100
    commit_interval_ms: int = 1000
    rebalance_delay_ms: int = 1000
    warmup_s: int = 60
    threshold_ms: float = 100.0


@dataclass
class SecondRow:
    t_sec: int
    records_in: int
    records_out: int
    avg_latency_ms: Optional[float]
    running_instances: int


@dataclass
class SimulationRun:
    rows: List[SecondRow]
    cluster: ClusterState
    drained_s: int = 0

    def latency_samples(self, warmup_s: int = 0) -> List[LatencySample]:
        return [
            LatencySample(float(r.t_sec), r.avg_latency_ms)
            for r in self.rows
            if r.t_sec >= warmup_s and r.avg_latency_ms is not None
        ]

    def trend(self, warmup_s: int = 60, threshold: float = 100.0) -> TrendResult:
        return latency_trend(self.latency_samples(warmup_s), threshold)


Source = Callable[[int], List[Measurement]]


def run_simulation(
    hierarchy: MembershipTable,
    source: Source,
    duration: int,
    instances: int,
    config: SimulationConfig,
    seed: int = 0,
    membership_changes: Sequence[MembershipEvent] = (),
    failures: Sequence[Tuple[float, str, int]] = (),
    drain: bool = False,
    result_sink: Optional[Callable[[int, AggregationResult], None]] = None,
    max_drain_s: int = 3600,
) -> SimulationRun:
    """Simulate ``duration`` seconds of input, optionally followed by a drain phase.

    ``failures`` holds ``(at_seconds, "stop" | "recover", count)`` entries.
    """
    if instances < 1:
        raise ExperimentConfigError("instances must be >= 1")
    cluster = create_cluster(
        config.partitions,
        [config.capacity] * instances,
        seed,
        tick_ms=config.tick_ms,
        commit_interval_ms=config.commit_interval_ms,
        rebalance_delay_ms=config.rebalance_delay_ms,
    )
    cluster.result_sink = result_sink
    cluster.load_hierarchy(hierarchy, 0)
    for at, action, count in failures:
        cluster.schedule(int(round(at * 1000)), action, count)
    changes = sorted(membership_changes, key=lambda e: e.timestamp)
    ci = 0
    rows: List[SecondRow] = []

    def step(t: int, records: List[Measurement]) -> None:
        nonlocal ci
        cluster.produce(records)
        # membership changes enter at tick granularity within the second
        end = (t + 1) * 1000
        while cluster.clock_ms < end:
            while ci < len(changes) and changes[ci].timestamp < cluster.clock_ms + config.tick_ms:
                cluster.produce_membership(changes[ci])
                ci += 1
            cluster.advance(config.tick_ms)
        st = cluster.per_second[t]
        rows.append(SecondRow(t, st.records_in, st.records_out, st.avg_latency_ms, st.running_instances))

    for t in range(duration):
        step(t, source(t))
    drained = 0
    if drain:
        t = duration
        while (ci < len(changes) or not cluster.is_quiescent()) and drained < max_drain_s:
            step(t, [])
            t += 1
            drained += 1
        if not cluster.is_quiescent():
            raise RuntimeError(f"cluster did not drain within {max_drain_s} s")
    return SimulationRun(rows, cluster, drained)


def synthetic_source(spec: WorkloadSpec, sensors: Optional[Sequence[str]] = None) -> Source:
    return lambda t: generate_tick(spec, t, sensors)


def replay_source(by_second: Mapping[int, List[Measurement]]) -> Source:
    return lambda t: list(by_second.get(t, ()))


def run_workload(
    spec: WorkloadSpec, instances: int, config: SimulationConfig, **kwargs
) -> SimulationRun:
    return run_simulation(
        spec.hierarchy(), synthetic_source(spec), spec.duration, instances, config, seed=spec.seed, **kwargs
    )


def evaluate_deployment(spec: WorkloadSpec, instances: int, config: SimulationConfig) -> TrendResult:
    run = run_workload(spec, instances, config)
    return run.trend(config.warmup_s, config.threshold_ms)


# --- scalability -----------------------------------------------------------


@dataclass
class ScalabilityResult:
    workload: int
    required_instances: List[Optional[int]]
    median_required: Optional[int]
    depth: int = 0
    seeds: List[int] = field(default_factory=list)
    evaluations: int = 0


def _smallest_sufficient(
    candidates: Sequence[int], is_ok: Callable[[int], bool], start: int
) -> Optional[int]:
    """Smallest candidate with ``is_ok``, assuming sufficiency is monotone in instance count.

    Gallops from ``start`` to bracket the boundary, then bisects.
    """
    cache: Dict[int, bool] = {}

    def ok(i: int) -> bool:
        if i not in cache:
            cache[i] = is_ok(candidates[i])
        return cache[i]

    n = len(candidates)
    i = min(max(start, 0), n - 1)
    if ok(i):
        hi, step = i, 1
        lo = hi - step
        while lo >= 0 and ok(lo):
            hi = lo
            step *= 2
            lo = hi - step
        lo = max(lo, -1)
    else:
        lo, step = i, 1
        hi = lo + step
        while hi < n and not ok(hi):
            lo = hi
            step *= 2
            hi = lo + step
        if hi >= n:
            hi = n - 1
            if hi == lo or not ok(hi):
                return None
    # invariant: ok(hi), and lo == -1 or not ok(lo)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return candidates[hi]


def min_sufficient_instances(
    spec: WorkloadSpec,
    candidates: Sequence[int],
    reps: int,
    config: SimulationConfig,
    seeds: Optional[Sequence[int]] = None,
    hint: Optional[int] = None,
) -> ScalabilityResult:
    """Smallest sufficient instance count per repetition, plus their median.

    Repetition ``r`` uses seed ``spec.seed + r`` unless ``seeds`` is given;
    the seed drives both the measured values and key partitioning.
    """
    if reps < 1:
        raise ExperimentConfigError("reps must be >= 1")
    if not candidates or list(candidates) != sorted(candidates):
        raise ExperimentConfigError("candidates must be a non-empty ascending list")
    if seeds is None:
        seeds = [spec.seed + r for r in range(reps)]
    elif len(seeds) != reps:
        raise ExperimentConfigError("one seed per repetition required")
    required: List[Optional[int]] = []
    evaluations = 0
    guess = hint if hint is not None else math.ceil(spec.total_rate / config.capacity)
    for seed in seeds:
        rep_spec = replace(spec, seed=seed)

        def is_ok(n: int, rep_spec=rep_spec) -> bool:
            nonlocal evaluations
            evaluations += 1
            res = evaluate_deployment(rep_spec, n, config)
            log.debug("depth=%d seed=%d n=%d slope=%.2f", spec.depth, rep_spec.seed, n, res.slope)
            return res.sufficient

        start = bisect.bisect_left(list(candidates), guess)
        found = _smallest_sufficient(candidates, is_ok, start)
        required.append(found)
        if found is not None:
            guess = found
    return ScalabilityResult(spec.total_rate, required, lower_median(required), spec.depth, list(seeds), evaluations)


def scalability_sweep(
    fan_out: int,
    depths: Sequence[int],
    reps: int,
    config: SimulationConfig,
    max_instances: int = 128,
    duration: int = 120,
    seed: int = 0,
) -> List[ScalabilityResult]:
    candidates = list(range(1, max_instances + 1))
    results = []
    hint = None
    for depth in depths:
        spec = WorkloadSpec(fan_out, depth, duration=duration, seed=seed)
        t0 = time.perf_counter()
        res = min_sufficient_instances(spec, candidates, reps, config, hint=hint)
        log.info(
            "depth %d (%d rec/s): required %s median %s [%d runs, %.1fs]",
            depth, spec.total_rate, res.required_instances, res.median_required,
            res.evaluations, time.perf_counter() - t0,
        )
        results.append(res)
        if res.median_required is not None:
            hint = res.median_required * fan_out
    return results


def scaling_fit(results: Sequence[ScalabilityResult]) -> Tuple[float, float]:
    """Through-origin fit of median required instances against workload."""
    pts = [(r.workload, r.median_required) for r in results if r.median_required is not None]
    if len(pts) != len(results):
        raise ExperimentConfigError("some workload exceeded the maximum instance count")
    return through_origin_fit([float(x) for x, _ in pts], [float(y) for _, y in pts])


# --- reliability -----------------------------------------------------------


@dataclass
class ThroughputSeries:
    generated: List[int]
    processed: List[int]
    smoothed: List[float]
    smoothed_generated: List[float]
    running: List[int]
    window: int
    input_rate: int
    fail_at: int
    recover_at: int
    capacity: float

    def smoothed_at(self, t: int) -> Optional[float]:
        """Moving average ending at second ``t``."""
        i = t - (self.window - 1)
        return self.smoothed[i] if 0 <= i < len(self.smoothed) else None


def reliability_capacity(spec: WorkloadSpec, instances: int, provisioning: float = 2.0) -> float:
    """Per-instance capacity giving the deployment ``provisioning`` x the input rate."""
    return provisioning * spec.total_rate / instances


def run_reliability(
    spec: WorkloadSpec,
    instances: int = 24,
    kill: int = 18,
    fail_at: int = 600,
    recover_at: int = 900,
    window: int = 60,
    config: Optional[SimulationConfig] = None,
    provisioning: float = 2.0,
) -> ThroughputSeries:
    """Full run with one failure window; the tail drains any remaining backlog."""
    if not 0 <= kill < instances:
        raise ExperimentConfigError("kill must be in [0, instances)")
    if not 0 <= fail_at <= recover_at <= spec.duration:
        raise ExperimentConfigError("need 0 <= fail_at <= recover_at <= duration")
    if config is None:
        config = SimulationConfig(capacity=reliability_capacity(spec, instances, provisioning), partitions=256)
    failures = []
    if kill:
        failures = [(fail_at, "stop", kill), (recover_at, "recover", 0)]
    run = run_workload(spec, instances, config, failures=failures, drain=True)
    generated = [r.records_in for r in run.rows]
    processed = [r.records_out for r in run.rows]
    return ThroughputSeries(
        generated,
        processed,
        moving_average(processed, window),
        moving_average(generated, window),
        [r.running_instances for r in run.rows],
        window,
        spec.total_rate,
        fail_at,
        recover_at,
        config.capacity,
    )


# --- CSV output --------------------------------------------------------------


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.3f}"


def write_metrics_csv(rows: Iterable[SecondRow], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow([r.t_sec, r.records_in, r.records_out, _fmt(r.avg_latency_ms), r.running_instances])


def write_scalability_csv(results: Iterable[ScalabilityResult], fh: TextIO, fan_out: int = 8) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SCALABILITY_COLUMNS)
    for res in results:
        for rep, (seed, req) in enumerate(zip(res.seeds, res.required_instances)):
            w.writerow([
                res.depth,
                fan_out**res.depth,
                res.workload,
                rep,
                seed,
                "exceeds_max" if req is None else req,
                "exceeds_max" if res.median_required is None else res.median_required,
            ])


def write_reliability_csv(series: ThroughputSeries, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RELIABILITY_COLUMNS)
    for t, (g, p, run) in enumerate(zip(series.generated, series.processed, series.running)):
        i = t - (series.window - 1)
        ga = series.smoothed_generated[i] if i >= 0 else None
        pa = series.smoothed[i] if i >= 0 else None
        w.writerow([t, g, p, _fmt(ga), _fmt(pa), run])


def to_csv_string(writer: Callable[..., None], *args) -> str:
    buf = io.StringIO()
    writer(*args, buf)
    return buf.getvalue()
