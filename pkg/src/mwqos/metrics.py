"""Metrics collection, summaries, and the flat-file datasets behind reports.

One record per request event; a single writer thread drains an ordered
queue so concurrent recorders never interleave half-written rows.
HIGH-priority served samples are forwarded to the autonomic manager as
they arrive.
"""

from __future__ import annotations

import csv
import enum
import queue
import statistics
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from mwqos.httpbase import ComponentServer, Handler
from mwqos.model import PriorityLevel

EVENTS_SCHEMA = "mwqos-events v1"
RESOURCES_SCHEMA = "mwqos-resources v1"


class Outcome(enum.Enum):
    SERVED = "SERVED"
    REJECTED = "REJECTED"
    OVERFLOWED = "OVERFLOWED"
    FAILED = "FAILED"


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    timestamp: float  # wall clock, seconds
    injector: str
    request_index: int
    priority: PriorityLevel
    outcome: Outcome
    rtt_ms: float | None = None  # present iff SERVED
    overhead_ms: float | None = None  # CMC+PEP added time, when measurable


@dataclass(frozen=True)
class ResourceSnapshot:
    timestamp: float
    component: str
    cpu_percent: float | None
    rss_bytes: int | None


class MetricsCollector:
    """Thread-safe sink for request events.

    ``on_high_served`` receives every HIGH-priority SERVED record (the
    autonomic feed). Close the collector before reading the full dataset.
    """

    def __init__(self, on_high_served: Callable[[MetricsRecord], None] | None = None):
        self._queue: queue.SimpleQueue[MetricsRecord | None] = queue.SimpleQueue()
        self._rows: list[MetricsRecord] = []
        self._rows_lock = threading.Lock()
        self._on_high_served = on_high_served
        self.forward_errors = 0
        self._writer = threading.Thread(target=self._drain, name="metrics-writer", daemon=True)
        self._writer.start()
        self._closed = False

    def record(self, record: MetricsRecord) -> None:
        self._queue.put(record)

    def _drain(self) -> None:
        while True:
            record = self._queue.get()
            if record is None:
                return
            with self._rows_lock:
                self._rows.append(record)
            if (
                self._on_high_served is not None
                and record.outcome is Outcome.SERVED
                and record.priority is PriorityLevel.HIGH
            ):
                try:
                    self._on_high_served(record)
                except Exception:
                    self.forward_errors += 1

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._queue.put(None)
            self._writer.join(timeout=10)

    def dataset(self) -> list[MetricsRecord]:
        with self._rows_lock:
            return list(self._rows)

    def __len__(self) -> int:
        with self._rows_lock:
            return len(self._rows)


def summarize(
    dataset: Sequence[MetricsRecord],
    resources: Sequence[ResourceSnapshot] = (),
    transitions: Sequence[tuple[float, str]] = (),
    truncated: bool = False,
) -> dict:
    """Deterministic per-injector and per-component summary.

    Loss fraction counts everything that was sent but not served. State
    time shares are derived from the transition log over the dataset's
    time span.
    """
    if not dataset:
        raise EmptyDataset("no records")
    per_injector: dict[str, dict] = {}
    for name in sorted({r.injector for r in dataset}):
        rows = [r for r in dataset if r.injector == name]
        rtts = [r.rtt_ms for r in rows if r.rtt_ms is not None]
        outcomes = {o: sum(1 for r in rows if r.outcome is o) for o in Outcome}
        sent = len(rows)
        lost = outcomes[Outcome.REJECTED] + outcomes[Outcome.OVERFLOWED] + outcomes[Outcome.FAILED]
        per_injector[name] = {
            "sent": sent,
            "served": outcomes[Outcome.SERVED],
            "rejected": outcomes[Outcome.REJECTED],
            "overflowed": outcomes[Outcome.OVERFLOWED],
            "failed": outcomes[Outcome.FAILED],
            "loss_fraction": lost / sent if sent else 0.0,
            "mean_rtt_ms": statistics.fmean(rtts) if rtts else None,
            "median_rtt_ms": statistics.median(rtts) if rtts else None,
            "max_rtt_ms": max(rtts) if rtts else None,
        }
    summary: dict = {"injectors": per_injector, "truncated": truncated}

    if resources:
        per_component: dict[str, dict] = {}
        for name in sorted({s.component for s in resources}):
            snaps = [s for s in resources if s.component == name]
            cpu = [s.cpu_percent for s in snaps if s.cpu_percent is not None]
            rss = [s.rss_bytes for s in snaps if s.rss_bytes is not None]
            per_component[name] = {
                "samples": len(snaps),
                "mean_cpu_percent": statistics.fmean(cpu) if cpu else None,
                "peak_rss_bytes": max(rss) if rss else None,
            }
        summary["components"] = per_component

    if transitions:
        start = min(r.timestamp for r in dataset)
        end = max(r.timestamp for r in dataset)
        summary["state_shares"] = _state_time_shares(transitions, start, end)
        summary["state_sequence"] = [state for _, state in transitions]
    return summary


def _state_time_shares(
    transitions: Sequence[tuple[float, str]], start: float, end: float
) -> dict[str, float]:
    """Fraction of the run spent in each state, from a (ts, state) log."""
    if end <= start:
        return {}
    spans: dict[str, float] = {}
    current = "NORMAL"
    cursor = start
    for ts, state in sorted(transitions):
        ts = min(max(ts, start), end)
        spans[current] = spans.get(current, 0.0) + (ts - cursor)
        current = state
        cursor = ts
    spans[current] = spans.get(current, 0.0) + (end - cursor)
    total = end - start
    return {state: span / total for state, span in sorted(spans.items())}


def rtt_slope(
    dataset: Sequence[MetricsRecord],
    injector: str,
    threshold_ms: float | None = None,
) -> float | None:
    """Least-squares slope (ms per second) of served RTTs over time.

    With a threshold, the fit starts at the first sample at or above it
    (the saturated window). None when fewer than two points qualify.
    """
    points = sorted(
        (r.timestamp, r.rtt_ms)
        for r in dataset
        if r.injector == injector and r.rtt_ms is not None
    )
    if threshold_ms is not None:
        for i, (_, rtt) in enumerate(points):
            if rtt >= threshold_ms:
                points = points[i:]
                break
        else:
            return None
    if len(points) < 2:
        return None
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_mean = statistics.fmean(xs)
    y_mean = statistics.fmean(ys)
    denom = sum((x - x_mean) ** 2 for x in xs)
    if denom == 0:
        return None
    return sum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys)) / denom


def write_events_csv(path: str | Path, dataset: Iterable[MetricsRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# {EVENTS_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["timestamp", "injector", "request_index", "priority", "outcome", "rtt_ms", "overhead_ms"]
        )
        for r in dataset:
            writer.writerow(
                [
                    f"{r.timestamp:.6f}",
                    r.injector,
                    r.request_index,
                    r.priority.name,
                    r.outcome.value,
                    "" if r.rtt_ms is None else f"{r.rtt_ms:.3f}",
                    "" if r.overhead_ms is None else f"{r.overhead_ms:.3f}",
                ]
            )


def read_events_csv(path: str | Path) -> list[MetricsRecord]:
    rows = []
    with Path(path).open(newline="") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"missing schema comment in {path}")
        for raw in csv.DictReader(fh):
            rows.append(
                MetricsRecord(
                    timestamp=float(raw["timestamp"]),
                    injector=raw["injector"],
                    request_index=int(raw["request_index"]),
                    priority=PriorityLevel[raw["priority"]],
                    outcome=Outcome(raw["outcome"]),
                    rtt_ms=float(raw["rtt_ms"]) if raw["rtt_ms"] else None,
                    overhead_ms=float(raw["overhead_ms"]) if raw["overhead_ms"] else None,
                )
            )
    return rows


def write_resources_csv(path: str | Path, snapshots: Iterable[ResourceSnapshot]) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# {RESOURCES_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "component", "cpu_percent", "rss_bytes"])
        for s in snapshots:
            writer.writerow(
                [
                    f"{s.timestamp:.6f}",
                    s.component,
                    "" if s.cpu_percent is None else f"{s.cpu_percent:.2f}",
                    "" if s.rss_bytes is None else s.rss_bytes,
                ]
            )


def read_resources_csv(path: str | Path) -> list[ResourceSnapshot]:
    rows = []
    with Path(path).open(newline="") as fh:
        fh.readline()
        for raw in csv.DictReader(fh):
            rows.append(
                ResourceSnapshot(
                    timestamp=float(raw["timestamp"]),
                    component=raw["component"],
                    cpu_percent=float(raw["cpu_percent"]) if raw["cpu_percent"] else None,
                    rss_bytes=int(raw["rss_bytes"]) if raw["rss_bytes"] else None,
                )
            )
    return rows


class ResourceSampler:
    """Periodic CPU/RSS snapshots of the pipeline processes.

    Components that cannot be inspected yield snapshots with null values;
    the run never stops because of a sampling failure.
    """

    def __init__(self, components: dict[str, int], interval_s: float = 1.0):
        self.components = dict(components)
        self.interval_s = interval_s
        self.snapshots: list[ResourceSnapshot] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._procs: dict[str, object] = {}

    def start(self) -> None:
        try:
            import psutil
        except ImportError:
            psutil = None
        if psutil is not None:
            for name, pid in self.components.items():
                try:
                    proc = psutil.Process(pid)
                    proc.cpu_percent(interval=None)  # prime the sampler
                    self._procs[name] = proc
                except Exception:
                    pass
        self._thread = threading.Thread(target=self._loop, name="resource-sampler", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_s):
            now = time.time()
            for name in self.components:
                proc = self._procs.get(name)
                cpu = rss = None
                if proc is not None:
                    try:
                        cpu = proc.cpu_percent(interval=None)
                        rss = proc.memory_info().rss
                    except Exception:
                        cpu = rss = None
                self.snapshots.append(
                    ResourceSnapshot(
                        timestamp=now, component=name, cpu_percent=cpu, rss_bytes=rss
                    )
                )

    def stop(self) -> list[ResourceSnapshot]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        return list(self.snapshots)


class MetricsAdminServer(ComponentServer):
    """``GET /admin/metrics/summary`` over the collector's live dataset."""

    name = "metrics"

    def __init__(self, collector: MetricsCollector, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.collector = collector

    def handler_class(self) -> type[Handler]:
        admin = self

        class MetricsHandler(Handler):
            def do_GET(self) -> None:
                if self.path == "/admin/metrics/summary":
                    dataset = admin.collector.dataset()
                    if not dataset:
                        self.respond_json(200, {"injectors": {}, "records": 0})
                        return
                    summary = summarize(dataset)
                    summary["records"] = len(dataset)
                    self.respond_json(200, summary)
                else:
                    self.respond(404, b"not found")

        return MetricsHandler
