"""Stub middleware gateway: a sink with realistic queueing.

POST traffic waits in a FIFO accept queue for one of ``workers`` service
slots, holds the slot for the configured service time, and gets a 201
back. The worker pool is resizable at runtime: growing takes effect
immediately, shrinking as in-flight work completes.
"""

from __future__ import annotations

import itertools
import json
import random
import threading
import time
from collections import deque
from dataclasses import dataclass

from mwqos.httpbase import Address, ComponentServer, Handler
from mwqos.model import GW_ACTION_HEADER


@dataclass(frozen=True)
class GatewayConfig:
    service_time_ms: float = 50.0
    jitter_ms: float = 0.0
    workers: int = 1
    accept_queue_capacity: int = 500

    def validate(self) -> "GatewayConfig":
        if self.service_time_ms <= 0:
            raise ValueError("service_time_ms must be > 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self


class WorkerPool:
    """FIFO admission to a bounded, resizable set of service slots."""

    def __init__(self, size: int, queue_capacity: int):
        self._cv = threading.Condition()
        self._target = size
        self._in_service = 0
        self._waiting: deque[object] = deque()
        self._queue_capacity = queue_capacity

    @property
    def target(self) -> int:
        with self._cv:
            return self._target

    @property
    def in_service(self) -> int:
        with self._cv:
            return self._in_service

    @property
    def queued(self) -> int:
        with self._cv:
            return len(self._waiting)

    def acquire(self, stop: threading.Event) -> bool:
        """Block FIFO until a slot is free; False on queue overflow or stop."""
        ticket = object()
        with self._cv:
            if len(self._waiting) >= self._queue_capacity:
                return False
            self._waiting.append(ticket)
            while not (self._waiting[0] is ticket and self._in_service < self._target):
                self._cv.wait(timeout=0.1)
                if stop.is_set():
                    self._waiting.remove(ticket)
                    self._cv.notify_all()
                    return False
            self._waiting.popleft()
            self._in_service += 1
            self._cv.notify_all()
            return True

    def release(self) -> None:
        with self._cv:
            self._in_service -= 1
            self._cv.notify_all()

    def resize(self, new_size: int) -> None:
        if new_size < 1:
            raise ValueError("worker pool size must be >= 1")
        with self._cv:
            self._target = new_size
            self._cv.notify_all()


class GatewayServer(ComponentServer):
    """HTTP sink standing in for the middleware platform.

    Traffic surface: ``POST /<application>/data``. Admin surface:
    ``PUT /admin/gw/workers`` resizes the pool, ``GET /admin/gw/stats``
    exposes the counters.
    """

    name = "gateway"

    def __init__(
        self,
        config: GatewayConfig | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        seed: int | None = None,
    ):
        super().__init__(host, port)
        self.config = (config or GatewayConfig()).validate()
        self.pool = WorkerPool(self.config.workers, self.config.accept_queue_capacity)
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self.accepted = 0
        self.served = 0
        self.overflowed = 0
        self._resource_counter = itertools.count(1)

    def set_workers(self, new_size: int) -> None:
        self.pool.resize(new_size)

    def _service_time_s(self) -> float:
        base = self.config.service_time_ms
        if self.config.jitter_ms > 0:
            with self._rng_lock:
                base += self._rng.uniform(-self.config.jitter_ms, self.config.jitter_ms)
        return max(base, 0.0) / 1000

    def handler_class(self) -> type[Handler]:
        gw = self

        class GatewayHandler(Handler):
            def do_GET(self) -> None:
                if self.path == "/admin/gw/stats":
                    with gw._stats_lock:
                        payload = {
                            "accepted": gw.accepted,
                            "served": gw.served,
                            "overflowed": gw.overflowed,
                            "workers": gw.pool.target,
                            "in_service": gw.pool.in_service,
                            "queued": gw.pool.queued,
                        }
                    self.respond_json(200, payload)
                else:
                    self.respond(404, b"not found")

            def do_PUT(self) -> None:
                if self.path == "/admin/gw/workers":
                    try:
                        raw = json.loads(self.read_body() or b"{}")
                        gw.set_workers(int(raw["workers"]))
                    except (ValueError, KeyError) as exc:
                        self.respond_json(400, {"error": str(exc)})
                        return
                    self.respond_json(200, {"workers": gw.pool.target})
                else:
                    self.respond(404, b"not found")

            def do_POST(self) -> None:
                gw._serve(self)

        return GatewayHandler

    def _serve(self, handler: Handler) -> None:
        handler.read_body()
        if not self.pool.acquire(self.stop_event):
            with self._stats_lock:
                self.overflowed += 1
            handler.respond(503, b"overflow", headers={GW_ACTION_HEADER: "overflow"})
            return
        with self._stats_lock:
            self.accepted += 1
        try:
            time.sleep(self._service_time_s())
        finally:
            self.pool.release()
        resource = f"{handler.path.strip('/')}/{next(self._resource_counter)}"
        with self._stats_lock:
            self.served += 1
        handler.respond_json(201, {"stored": resource})
