"""Open-loop traffic emulation.

Each injector replays one application profile against the pipeline entry
point on its own schedule, never waiting for outstanding responses (a
closed loop could not build the queueing that degrades RTT in the first
place). Every exchange produces exactly one metrics record: served,
rejected, overflowed, or failed.
"""

from __future__ import annotations

import http.client
import random
import socket
import threading
import time
from dataclasses import dataclass
from typing import Iterator

from mwqos.httpbase import Address
from mwqos.metrics import MetricsCollector, MetricsRecord, Outcome
from mwqos.model import (
    GW_ACTION_HEADER,
    LB_ACTION_HEADER,
    OVERHEAD_MS_HEADER,
    PEP_ACTION_HEADER,
    SOURCE_HEADER,
    TOS_HEADER,
    AppProfile,
    ArrivalModel,
    InvalidPolicy,
)


class StartupFailed(Exception):
    """An injector's target was unreachable at launch."""


@dataclass(frozen=True)
class InjectorSpec:
    """One traffic source: a profile, a target, and a run bound."""

    profile: AppProfile
    target: Address
    duration_s: float | None = None
    total_requests: int | None = None
    seed: int | None = None
    source_header: str | None = None  # defaults to the profile name
    path: str | None = None  # defaults to /<profile name, lowered>/data
    request_timeout_s: float = 30.0
    body: bytes = b'{"value": 1}'
    mark_priority: bool = False  # QoS-aware source: sends TOS_HTTP itself

    def validate(self) -> "InjectorSpec":
        self.profile.validate()
        if (self.duration_s is None) == (self.total_requests is None):
            raise InvalidPolicy(
                f"injector {self.profile.name}: exactly one of duration_s/total_requests"
            )
        return self

    @property
    def source_id(self) -> str:
        return self.source_header or self.profile.name

    @property
    def request_path(self) -> str:
        return self.path or f"/{self.profile.name.lower()}/data"


def arrival_offsets(spec: InjectorSpec) -> Iterator[float]:
    """Send offsets in seconds from injector start, bounded by the spec.

    PERIODIC spaces requests exactly 1/rate apart; STOCHASTIC draws
    exponential gaps (Poisson arrivals) from the seeded generator; BURST
    emits burst_size back-to-back requests every burst_period.
    """
    profile = spec.profile
    rng = random.Random(spec.seed)
    count = 0

    def bounded(t: float) -> bool:
        if spec.total_requests is not None and count >= spec.total_requests:
            return False
        if spec.duration_s is not None and t >= spec.duration_s:
            return False
        return True

    if profile.arrival_model is ArrivalModel.BURST:
        period_s = (profile.burst_period_ms or 0) / 1000
        group = 0
        while True:
            base = group * period_s
            if not bounded(base):
                return
            for _ in range(profile.burst_size or 1):
                if not bounded(base):
                    return
                yield base
                count += 1
            group += 1
    else:
        t = 0.0
        while True:
            if profile.arrival_model is ArrivalModel.STOCHASTIC:
                t += rng.expovariate(profile.rate)
            else:
                t = count / profile.rate
            if not bounded(t):
                return
            yield t
            count += 1


def classify_outcome(status: int, headers: dict[str, str]) -> Outcome:
    """Map a response to the accounting bucket the pipeline intended."""
    lowered = {k.lower(): v for k, v in headers.items()}
    if 200 <= status < 300:
        return Outcome.SERVED
    pep_action = lowered.get(PEP_ACTION_HEADER.lower())
    if status == 503:
        if pep_action == "rejected":
            return Outcome.REJECTED
        if pep_action in ("queue-overflow", "delay-overflow"):
            return Outcome.OVERFLOWED
        if GW_ACTION_HEADER.lower() in lowered or LB_ACTION_HEADER.lower() in lowered:
            return Outcome.OVERFLOWED
    return Outcome.FAILED


class Injector:
    """Scheduler thread plus one short-lived sender thread per request."""

    def __init__(self, spec: InjectorSpec, collector: MetricsCollector):
        self.spec = spec.validate()
        self.collector = collector
        self._stop = threading.Event()
        self._scheduler: threading.Thread | None = None
        self._senders: list[threading.Thread] = []
        self.sent = 0

    def probe(self) -> None:
        """Check the target accepts TCP connections before launch."""
        try:
            with socket.create_connection(self.spec.target, timeout=5):
                pass
        except OSError as exc:
            raise StartupFailed(f"{self.spec.profile.name}: {exc}") from exc

    def start(self) -> None:
        self._scheduler = threading.Thread(
            target=self._run_schedule, name=f"inj-{self.spec.profile.name}", daemon=True
        )
        self._scheduler.start()

    def stop_scheduling(self) -> None:
        self._stop.set()

    def join(self, timeout: float | None = None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        if self._scheduler is not None:
            self._scheduler.join(timeout)
        for sender in list(self._senders):
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            sender.join(remaining)

    def _run_schedule(self) -> None:
        start = time.monotonic()
        for index, offset in enumerate(arrival_offsets(self.spec)):
            delay = start + offset - time.monotonic()
            if delay > 0 and self._stop.wait(delay):
                return
            if self._stop.is_set():
                return
            sender = threading.Thread(
                target=self._send_one,
                args=(index,),
                name=f"inj-{self.spec.profile.name}-{index}",
                daemon=True,
            )
            self.sent += 1
            self._senders.append(sender)
            sender.start()

    def _send_one(self, index: int) -> None:
        spec = self.spec
        headers = {
            SOURCE_HEADER: spec.source_id,
            "Content-Type": "application/json",
            "Connection": "close",
        }
        if spec.mark_priority:
            headers[TOS_HEADER] = spec.profile.priority_hint.wire
        t0 = time.monotonic_ns()
        outcome = Outcome.FAILED
        rtt_ms: float | None = None
        overhead_ms: float | None = None
        conn = http.client.HTTPConnection(
            spec.target[0], spec.target[1], timeout=spec.request_timeout_s
        )
        try:
            conn.request("POST", spec.request_path, body=spec.body, headers=headers)
            resp = conn.getresponse()
            resp.read()
            elapsed_ms = (time.monotonic_ns() - t0) / 1e6
            resp_headers = dict(resp.getheaders())
            outcome = classify_outcome(resp.status, resp_headers)
            if outcome is Outcome.SERVED:
                rtt_ms = elapsed_ms
            raw_overhead = resp_headers.get(OVERHEAD_MS_HEADER)
            if raw_overhead is not None:
                try:
                    overhead_ms = float(raw_overhead)
                except ValueError:
                    overhead_ms = None
        except Exception:
            outcome = Outcome.FAILED  # transport errors, timeouts, bad responses
        finally:
            conn.close()
        self.collector.record(
            MetricsRecord(
                timestamp=time.time(),
                injector=spec.profile.name,
                request_index=index,
                priority=spec.profile.priority_hint,
                outcome=outcome,
                rtt_ms=rtt_ms,
                overhead_ms=overhead_ms,
            )
        )


class ScenarioHandle:
    """Running set of injectors; await completion or abort early."""

    def __init__(self, injectors: list[Injector], collector: MetricsCollector):
        self.injectors = injectors
        self.collector = collector
        self.truncated = False

    def wait(self, drain_timeout_s: float | None = None) -> None:
        """Block until all schedules finish and outstanding senders return."""
        for injector in self.injectors:
            injector.join(drain_timeout_s)

    def abort(self) -> None:
        """Stop scheduling now; outstanding senders still record themselves."""
        self.truncated = True
        for injector in self.injectors:
            injector.stop_scheduling()
        for injector in self.injectors:
            injector.join(timeout=max(i.spec.request_timeout_s for i in self.injectors) + 5)

    @property
    def sent(self) -> dict[str, int]:
        return {inj.spec.profile.name: inj.sent for inj in self.injectors}


def run_injectors(
    specs: list[InjectorSpec], collector: MetricsCollector
) -> ScenarioHandle:
    """Probe every target, then start all injectors within one window.

    Raises StartupFailed before anything is sent if a target is down.
    """
    injectors = [Injector(spec, collector) for spec in specs]
    for injector in injectors:
        injector.probe()
    for injector in injectors:
        injector.start()
    return ScenarioHandle(injectors, collector)
