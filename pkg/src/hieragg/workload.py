"""Synthetic sensor workloads and measurement file replay."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Sequence, TextIO

import numpy as np

from .hierarchy import build_nested_hierarchy, leaf_id
from .topology import Measurement, measurement_to_json, parse_measurement


@dataclass(frozen=True)
class WorkloadSpec:
    fan_out: int = 8
    depth: int = 2
    rate: int = 1
    duration: int = 60
    seed: int = 0
    low: float = 0.0
    high: float = 100.0

    def __post_init__(self) -> None:
        if self.fan_out < 1 or self.depth < 1 or self.rate < 1 or self.duration < 0:
            raise ValueError("fan_out, depth and rate must be >= 1, duration >= 0")

    @property
    def num_sensors(self) -> int:
        return self.fan_out**self.depth

    @property
    def total_rate(self) -> int:
        """Input records per simulated second."""
        return self.num_sensors * self.rate

    def sensors(self) -> List[str]:
        return [leaf_id(i) for i in range(self.num_sensors)]

    def hierarchy(self):
        return build_nested_hierarchy(self.fan_out, self.depth)


def generate_tick(spec: WorkloadSpec, t: int, sensors: Sequence[str] | None = None) -> List[Measurement]:
    """All measurements of simulated second ``t``, in timestamp order.

    Emission k of sensor i lands at ``(k*n + i) * 1000 // (n*rate)`` ms into
    the second, spreading the load instead of bursting at the boundary.
    Values are uniform in ``[low, high)`` from a generator seeded by
    ``(seed, t)``.
    """
    if not 0 <= t < spec.duration:
        raise ValueError(f"t={t} outside [0, {spec.duration})")
    ids = list(sensors) if sensors is not None else spec.sensors()
    n = len(ids)
    per_sec = n * spec.rate
    rng = np.random.default_rng([spec.seed, t])
    values = rng.uniform(spec.low, spec.high, size=per_sec)
    base = t * 1000
    out = []
    for j in range(per_sec):
        # j = k*n + i
        out.append(Measurement(ids[j % n], float(values[j]), base + j * 1000 // per_sec))
    return out


def generate(spec: WorkloadSpec, sensors: Sequence[str] | None = None) -> Iterator[List[Measurement]]:
    for t in range(spec.duration):
        yield generate_tick(spec, t, sensors)


def read_measurements(fh: TextIO) -> List[Measurement]:
    out = []
    for line in fh:
        if not line.strip():
            continue
        # non-finite values are refused by Measurement itself
        out.append(parse_measurement(json.loads(line)))
    return out


def write_measurements(ms: Iterable[Measurement], fh: TextIO) -> None:
    for m in ms:
        fh.write(json.dumps(measurement_to_json(m)) + "\n")


def replay_by_second(ms: Iterable[Measurement]) -> Dict[int, List[Measurement]]:
    """Bucket recorded measurements by simulated second, keeping file order."""
    out: Dict[int, List[Measurement]] = {}
    for m in ms:
        out.setdefault(m.timestamp // 1000, []).append(m)
    return out
