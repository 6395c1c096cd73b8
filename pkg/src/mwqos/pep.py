"""Performance-enhancing proxy: rejection, delaying, and scheduling.

Marked requests pass the enabled mechanisms in a fixed order (reject, then
delay, then schedule) and are finally proxied to the gateway. Each request
is served by its own handler thread; the scheduler hands out forwarder
slots so that upstream concurrency stays bounded while delayed or queued
requests hold no slot.
"""

from __future__ import annotations

import json
import random
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

from mwqos import model
from mwqos.httpbase import (
    Address,
    ComponentServer,
    Handler,
    UpstreamError,
    proxy_request,
)
from mwqos.model import (
    INGRESS_NS_HEADER,
    OVERHEAD_MS_HEADER,
    PEP_ACTION_HEADER,
    PRIORITY_ORDER,
    Discipline,
    Mechanism,
    PepPolicy,
    PriorityLevel,
    RejectMode,
    TaggedRequest,
    validate_policy,
)

#: Fixed application order of the mechanisms.
MECHANISM_ORDER = (Mechanism.REJECT, Mechanism.DELAY, Mechanism.SCHEDULE)


def mechanism_chain(policy: PepPolicy) -> tuple[Mechanism, ...]:
    """Ordered subset of enabled mechanisms a request will traverse."""
    return tuple(m for m in MECHANISM_ORDER if m in policy.enabled)


def effective_priority(request: TaggedRequest) -> PriorityLevel:
    """Unmarked requests are treated as LOW so marked traffic stays protected."""
    return request.priority if request.priority is not None else PriorityLevel.LOW


class QueueFull(Exception):
    pass


class Rejecter:
    """Per-priority admission decisions.

    Deterministic mode spreads rejections evenly: request k at percentage p
    is rejected exactly when floor(k*p/100) increments, so after n requests
    exactly floor(n*p/100) were rejected. Probabilistic mode draws from a
    seeded generator instead.
    """

    def __init__(self, mode: RejectMode = RejectMode.DETERMINISTIC, seed: int | None = None):
        self.mode = mode
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.seen = {level: 0 for level in PriorityLevel}
        self.rejected = {level: 0 for level in PriorityLevel}

    def decide(self, priority: PriorityLevel, percentage: int) -> bool:
        """Record one arrival and return True when it must be rejected."""
        with self._lock:
            self.seen[priority] += 1
            k = self.seen[priority]
            if self.mode is RejectMode.DETERMINISTIC:
                reject = (k * percentage) // 100 > ((k - 1) * percentage) // 100
            else:
                reject = self._rng.random() < percentage / 100
            if reject:
                self.rejected[priority] += 1
            return reject

    def reset(self) -> None:
        """Start a fresh percentage window (called on policy change)."""
        with self._lock:
            for level in PriorityLevel:
                self.seen[level] = 0
                self.rejected[level] = 0


class DelayGate:
    """Bounded count of concurrently held (delayed) requests."""

    def __init__(self, capacity: int = 1000):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._held = 0

    def try_enter(self) -> bool:
        with self._lock:
            if self._held >= self.capacity:
                return False
            self._held += 1
            return True

    def leave(self) -> None:
        with self._lock:
            self._held -= 1

    @property
    def held(self) -> int:
        with self._lock:
            return self._held


@dataclass
class QueueItem:
    """One queued request plus its scheduling bookkeeping."""

    payload: object
    priority: PriorityLevel
    finish_tag: float = 0.0
    enqueued_at: int = 0
    ready: threading.Event = field(default_factory=threading.Event)
    cancelled: bool = False


class PriorityQueues:
    """One FIFO queue per priority with pluggable dispatch discipline.

    Under WFQ each item gets a virtual finish tag on enqueue
    (``start = max(virtual_time, last_finish)``, ``finish = start + 1/weight``)
    and dispatch picks the smallest tag; the virtual clock follows the tag
    of the item most recently dispatched. Under PRIORITY_FIRST dispatch
    always drains the highest nonempty queue.
    """

    def __init__(
        self,
        capacity: int = 1000,
        discipline: Discipline = Discipline.PRIORITY_FIRST,
        weights: dict[PriorityLevel, int] | None = None,
    ):
        self.capacity = capacity
        self._lock = threading.RLock()
        self.changed = threading.Condition(self._lock)
        self._queues: dict[PriorityLevel, deque[QueueItem]] = {
            level: deque() for level in PriorityLevel
        }
        self._discipline = discipline
        self._weights = dict(weights or {level: 1 for level in PriorityLevel})
        self._virtual_time = 0.0
        self._last_finish = {level: 0.0 for level in PriorityLevel}

    @property
    def discipline(self) -> Discipline:
        with self._lock:
            return self._discipline

    def depth(self, priority: PriorityLevel) -> int:
        with self._lock:
            return len(self._queues[priority])

    def __len__(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def enqueue(self, item: QueueItem) -> None:
        """Append to the item's priority queue; raises QueueFull at capacity."""
        with self.changed:
            queue = self._queues[item.priority]
            if len(queue) >= self.capacity:
                raise QueueFull(item.priority.name)
            if self._discipline is Discipline.WFQ:
                weight = max(1, self._weights.get(item.priority, 1))
                start = max(self._virtual_time, self._last_finish[item.priority])
                item.finish_tag = start + 1.0 / weight
                self._last_finish[item.priority] = item.finish_tag
            queue.append(item)
            self.changed.notify_all()

    def dispatch(self) -> QueueItem | None:
        """Pop the next item per the active discipline, or None when empty."""
        with self._lock:
            if self._discipline is Discipline.WFQ:
                best: PriorityLevel | None = None
                best_tag = 0.0
                for level in PRIORITY_ORDER:
                    queue = self._queues[level]
                    if not queue:
                        continue
                    tag = queue[0].finish_tag
                    if best is None or tag < best_tag:
                        best, best_tag = level, tag
                if best is None:
                    return None
                item = self._queues[best].popleft()
                self._virtual_time = max(self._virtual_time, item.finish_tag)
                return item
            for level in PRIORITY_ORDER:
                queue = self._queues[level]
                if queue:
                    return queue.popleft()
            return None

    def reconfigure(
        self, discipline: Discipline, weights: dict[PriorityLevel, int]
    ) -> None:
        """Swap discipline/weights; queued items are re-tagged in FIFO order."""
        with self.changed:
            self._discipline = discipline
            self._weights = dict(weights)
            self._virtual_time = 0.0
            self._last_finish = {level: 0.0 for level in PriorityLevel}
            if discipline is Discipline.WFQ:
                for level, queue in self._queues.items():
                    weight = max(1, self._weights.get(level, 1))
                    for item in queue:
                        item.finish_tag = self._last_finish[level] + 1.0 / weight
                        self._last_finish[level] = item.finish_tag
            self.changed.notify_all()

    def drain(self) -> Iterator[QueueItem]:
        """Remove and yield everything (used at shutdown)."""
        with self._lock:
            for queue in self._queues.values():
                while queue:
                    yield queue.popleft()


class _PepStats:
    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.seen = {level: 0 for level in PriorityLevel}
        self.rejected = {level: 0 for level in PriorityLevel}
        self.delayed = {level: 0 for level in PriorityLevel}
        self.queued = {level: 0 for level in PriorityLevel}
        self.dispatched = {level: 0 for level in PriorityLevel}
        self.overflowed = {level: 0 for level in PriorityLevel}
        self.forward_errors = 0
        self.overhead_ms: deque[float] = deque(maxlen=20000)

    def bump(self, counter: dict[PriorityLevel, int], level: PriorityLevel) -> None:
        with self.lock:
            counter[level] += 1

    def record_overhead(self, value_ms: float) -> None:
        with self.lock:
            self.overhead_ms.append(value_ms)

    def snapshot(self) -> dict:
        with self.lock:
            per_priority = {
                level.name: {
                    "seen": self.seen[level],
                    "rejected": self.rejected[level],
                    "delayed": self.delayed[level],
                    "queued": self.queued[level],
                    "dispatched": self.dispatched[level],
                    "overflowed": self.overflowed[level],
                }
                for level in PRIORITY_ORDER
            }
            samples = list(self.overhead_ms)
        overhead = {
            "count": len(samples),
            "median_ms": statistics.median(samples) if samples else None,
            "mean_ms": statistics.fmean(samples) if samples else None,
        }
        return {
            "priorities": per_priority,
            "overhead": overhead,
            "forward_errors": self.forward_errors,
        }


class PepServer(ComponentServer):
    """HTTP differentiation stage in front of the gateway.

    Admin surface: ``PUT /admin/pep/policy`` swaps the whole policy
    atomically (identical policies are a no-op so duplicate pushes do not
    reset rejection counters), ``GET /admin/pep/stats`` exposes the
    counters.
    """

    name = "pep"

    def __init__(
        self,
        upstream: Address,
        policy: PepPolicy | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        reject_mode: RejectMode = RejectMode.DETERMINISTIC,
        seed: int | None = None,
        queue_capacity: int = 1000,
        delay_capacity: int = 1000,
        forwarder_concurrency: int = 4,
        upstream_timeout: float = 60.0,
    ):
        super().__init__(host, port)
        self.upstream = upstream
        self.upstream_timeout = upstream_timeout
        self._policy = validate_policy(policy or PepPolicy.passthrough())
        self._policy_lock = threading.Lock()
        self.rejecter = Rejecter(reject_mode, seed)
        self.delay_gate = DelayGate(delay_capacity)
        self.queues = PriorityQueues(
            capacity=queue_capacity,
            discipline=self._policy.discipline,
            weights=dict(self._policy.weights),
        )
        self.stats = _PepStats()
        self._slots = forwarder_concurrency
        self._slots_lock = threading.Lock()
        self._slots_free = forwarder_concurrency
        self._dispatcher: threading.Thread | None = None

    @property
    def policy(self) -> PepPolicy:
        with self._policy_lock:
            return self._policy

    def set_policy(self, policy: PepPolicy) -> bool:
        """Install a new policy; returns False when it matches the current one."""
        validate_policy(policy)
        with self._policy_lock:
            if policy == self._policy:
                return False
            self._policy = policy
        self.rejecter.reset()
        self.queues.reconfigure(policy.discipline, dict(policy.weights))
        return True

    def start(self) -> Address:
        address = super().start()
        self._dispatcher = threading.Thread(
            target=self._dispatch_loop, name="pep-dispatcher", daemon=True
        )
        self._dispatcher.start()
        return address

    def stop(self) -> None:
        self.stop_event.set()
        with self.queues.changed:
            self.queues.changed.notify_all()
        for item in self.queues.drain():
            item.cancelled = True
            item.ready.set()
        if self._dispatcher is not None:
            self._dispatcher.join(timeout=5)
            self._dispatcher = None
        super().stop()

    # Forwarder slot accounting: the dispatcher takes a slot before waking a
    # queued request; the handler gives it back when the upstream exchange
    # finishes.
    def _release_slot(self) -> None:
        with self.queues.changed:
            with self._slots_lock:
                self._slots_free += 1
            self.queues.changed.notify_all()

    def _dispatch_loop(self) -> None:
        while not self.stop_event.is_set():
            with self.queues.changed:
                while not self.stop_event.is_set():
                    with self._slots_lock:
                        free = self._slots_free
                    if free > 0 and len(self.queues):
                        break
                    self.queues.changed.wait(timeout=0.1)
                if self.stop_event.is_set():
                    return
                item = self.queues.dispatch()
                if item is None:
                    continue
                with self._slots_lock:
                    self._slots_free -= 1
            self.stats.bump(self.stats.dispatched, item.priority)
            item.ready.set()

    def handler_class(self) -> type[Handler]:
        pep = self

        class PepHandler(Handler):
            def do_GET(self) -> None:
                if self.path == "/admin/pep/stats":
                    snapshot = pep.stats.snapshot()
                    snapshot["policy"] = pep.policy.to_dict()
                    snapshot["queue_depths"] = {
                        level.name: pep.queues.depth(level) for level in PRIORITY_ORDER
                    }
                    self.respond_json(200, snapshot)
                else:
                    pep._handle_traffic(self)

            def do_PUT(self) -> None:
                if self.path == "/admin/pep/policy":
                    try:
                        raw = json.loads(self.read_body() or b"{}")
                        policy = PepPolicy.from_dict(raw)
                        changed = pep.set_policy(policy)
                    except (model.InvalidPolicy, ValueError, KeyError) as exc:
                        self.respond_json(400, {"error": str(exc)})
                        return
                    self.respond_json(200, {"changed": changed})
                else:
                    pep._handle_traffic(self)

            def do_POST(self) -> None:
                pep._handle_traffic(self)

            def do_DELETE(self) -> None:
                pep._handle_traffic(self)

        return PepHandler

    def _handle_traffic(self, handler: Handler) -> None:
        now_ns = time.monotonic_ns()
        headers = handler.header_map()
        try:
            ingress_ns = int(headers.get(INGRESS_NS_HEADER, now_ns))
        except ValueError:
            ingress_ns = now_ns
        request = TaggedRequest.from_wire(
            method=handler.command,
            target=handler.path,
            headers=headers,
            body=handler.read_body(),
            peer_address=handler.client_address[0],
            ingress_time=ingress_ns,
        )
        priority = effective_priority(request)
        policy = self.policy
        self.stats.bump(self.stats.seen, priority)
        held_ns = 0

        chain = mechanism_chain(policy)

        if Mechanism.REJECT in chain:
            percentage = policy.rejection.get(priority, 0)
            if self.rejecter.decide(priority, percentage):
                self.stats.bump(self.stats.rejected, priority)
                handler.respond(503, b"rejected", headers={PEP_ACTION_HEADER: "rejected"})
                return

        if Mechanism.DELAY in chain:
            delay_ms = policy.delay_ms.get(priority, 0)
            if delay_ms > 0:
                if not self.delay_gate.try_enter():
                    self.stats.bump(self.stats.overflowed, priority)
                    handler.respond(
                        503, b"delay overflow", headers={PEP_ACTION_HEADER: "delay-overflow"}
                    )
                    return
                try:
                    self.stats.bump(self.stats.delayed, priority)
                    t0 = time.monotonic_ns()
                    interrupted = self.stop_event.wait(delay_ms / 1000)
                    held_ns += time.monotonic_ns() - t0
                finally:
                    self.delay_gate.leave()
                if interrupted:
                    handler.respond(
                        503, b"shutting down", headers={PEP_ACTION_HEADER: "cancelled"}
                    )
                    return

        took_slot = False
        if Mechanism.SCHEDULE in chain:
            item = QueueItem(payload=None, priority=priority, enqueued_at=time.monotonic_ns())
            try:
                self.queues.enqueue(item)
            except QueueFull:
                self.stats.bump(self.stats.overflowed, priority)
                handler.respond(
                    503, b"queue overflow", headers={PEP_ACTION_HEADER: "queue-overflow"}
                )
                return
            self.stats.bump(self.stats.queued, priority)
            item.ready.wait()
            held_ns += time.monotonic_ns() - item.enqueued_at
            if item.cancelled:
                handler.respond(503, b"shutting down", headers={PEP_ACTION_HEADER: "cancelled"})
                return
            took_slot = True

        try:
            self._forward(handler, request, ingress_ns, held_ns)
        finally:
            if took_slot:
                self._release_slot()

    def _forward(
        self, handler: Handler, request: TaggedRequest, ingress_ns: int, held_ns: int
    ) -> None:
        overhead_ms = (time.monotonic_ns() - ingress_ns - held_ns) / 1e6
        self.stats.record_overhead(overhead_ms)
        out_headers = dict(request.headers)
        out_headers.pop(INGRESS_NS_HEADER, None)
        try:
            status, resp_headers, body = proxy_request(
                self.upstream,
                request.method,
                request.target,
                out_headers,
                request.body,
                timeout=self.upstream_timeout,
            )
        except UpstreamError as exc:
            with self.stats.lock:
                self.stats.forward_errors += 1
            handler.respond(502, f"upstream unreachable: {exc}".encode())
            return
        resp_headers[OVERHEAD_MS_HEADER] = f"{overhead_ms:.3f}"
        handler.relay(status, resp_headers, body)
