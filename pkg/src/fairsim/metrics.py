"""Measurements: cwnd traces, window differences, retransmits, throughput, turnaround."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim_core import MS, SEC, Simulator


class MetricsError(ValueError):
    pass


@dataclass
class MetricSeries:
    name: str
    times: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add(self, t: int, value: float) -> None:
        if self.times and t <= self.times[-1]:
            raise MetricsError(f"{self.name}: timestamp {t} not after {self.times[-1]}")
        self.times.append(t)
        self.values.append(value)

    def __len__(self) -> int:
        return len(self.times)

    def scaled(self, factor: float, name: str | None = None) -> MetricSeries:
        return MetricSeries(name or self.name, list(self.times), [v * factor for v in self.values])


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    sd: float
    pct_sd: float | None
    n: int


def summarize(data) -> SummaryStats:
    """Population mean and standard deviation; %SD = 100 * SD / mean."""
    values = data.values if isinstance(data, MetricSeries) else data
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise MetricsError("cannot summarize an empty sample")
    mean = float(arr.mean())
    sd = float(arr.std())
    pct = 100.0 * sd / mean if mean != 0 else None
    return SummaryStats(mean, sd, pct, int(arr.size))


def window_difference(a: MetricSeries, b: MetricSeries) -> tuple[MetricSeries, SummaryStats]:
    if a.times != b.times:
        raise MetricsError(f"series {a.name} and {b.name} are not aligned")
    diff = MetricSeries(f"{a.name}-{b.name}", list(a.times),
                        [x - y for x, y in zip(a.values, b.values)])
    return diff, summarize(diff)


class CwndSampler:
    """Samples each connection's effective window (and their sum) on a fixed tick."""

    def __init__(self, sim: Simulator, tcbs: dict, every: int = 10 * MS, ecbs=()):
        self.sim = sim
        self.tcbs = dict(sorted(tcbs.items()))
        self.every = every
        self.ecbs = list(ecbs)
        self.series = {cid: MetricSeries(f"conn{cid}") for cid in self.tcbs}
        self.aggregate = MetricSeries("AGG")
        self.ecb_rows: list[tuple] = []
        self._event = None
        self._running = False

    def start(self) -> None:
        self._running = True
        self._event = self.sim.schedule_in(self.every, self._tick)

    def stop(self) -> None:
        self._running = False
        self.sim.cancel(self._event)
        self._event = None

    def _tick(self) -> None:
        if not self._running:
            return
        now = self.sim.now
        total = 0
        for cid, tcb in self.tcbs.items():
            w = tcb.cc.cwnd
            total += w
            self.series[cid].add(now, w)
        self.aggregate.add(now, total)
        for ecb in self.ecbs:
            self.ecb_rows.append((now, ecb.host_pair[0], ecb.snd_cwnd, ecb.snd_ssthresh,
                                  ecb.ref_cnt, ecb.srtt))
        self._event = self.sim.schedule_in(self.every, self._tick)


def sample_cwnd(sim: Simulator, tcbs: dict, every: int = 10 * MS, ecbs=()) -> CwndSampler:
    sampler = CwndSampler(sim, tcbs, every, ecbs)
    sampler.start()
    return sampler


@dataclass
class RetransmitCounts:
    fast: int
    timeout: int
    per_conn: dict

    @property
    def total(self) -> int:
        return self.fast + self.timeout


def count_retransmits(tcbs) -> RetransmitCounts:
    per = {}
    fast = timeout = 0
    for tcb in tcbs:
        key = (tcb.local, tcb.conn_id)
        per[key] = (tcb.fast_retransmits, tcb.timeout_retransmits)
        fast += tcb.fast_retransmits
        timeout += tcb.timeout_retransmits
    return RetransmitCounts(fast, timeout, per)


def throughput(payload_bytes: int, elapsed_ns: int) -> float:
    """Bytes per simulated second."""
    if elapsed_ns <= 0:
        raise MetricsError("elapsed time must be positive")
    return payload_bytes * SEC / elapsed_ns


def turnaround_stats(records, direction: str | None = None) -> SummaryStats | None:
    """Turnaround summary in milliseconds, or None if there are no matching records."""
    values = [r.turnaround / MS for r in records if direction is None or r.direction == direction]
    if not values:
        return None
    return summarize(values)


def fmt(value) -> str:
    """Stable text form for CSV cells."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.6g}"
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_cwnd_trace(path: Path, sampler: CwndSampler) -> None:
    def rows():
        for i, t in enumerate(sampler.aggregate.times):
            for cid, s in sampler.series.items():
                yield (t, cid, s.values[i])
            yield (t, "AGG", sampler.aggregate.values[i])
    write_csv(path, ["time_ns", "conn_id", "cwnd_bytes"], rows())


def write_turnaround(path: Path, records) -> None:
    write_csv(path, ["command_id", "direction", "issue_ns", "complete_ns", "conn_id"],
              ((r.command_id, r.direction, r.issue_ns, r.complete_ns, r.conn_id) for r in records))


def write_ecb_trace(path: Path, rows) -> None:
    write_csv(path, ["time_ns", "side", "ecb_cwnd_bytes", "ecb_ssthresh_bytes", "ref_cnt",
                     "ecb_srtt_ns"], rows)
