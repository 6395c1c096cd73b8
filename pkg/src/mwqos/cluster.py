"""Horizontal scalability: a load balancer over gateway instances.

Three strategies: plain round robin, smooth weighted round robin (the
interleaved variant, so any window of sum-of-weights consecutive picks
contains each instance exactly weight times), and load-oriented (least
in-flight). Also the client side of the vertical analog: resizing a
gateway worker pool at runtime.

Splitting the platform itself across machines (database federation) is a
deployment action out of scope here; this balancer is the extension point
where such instances would be registered.
"""

from __future__ import annotations

import enum
import json
import threading
import time
from dataclasses import dataclass, field

from mwqos.httpbase import (
    Address,
    ComponentServer,
    Handler,
    UpstreamError,
    http_json,
    proxy_request,
)
from mwqos.model import LB_ACTION_HEADER


class Strategy(enum.Enum):
    ROUND_ROBIN = "ROUND_ROBIN"
    WEIGHTED_ROUND_ROBIN = "WEIGHTED_ROUND_ROBIN"
    LOAD_ORIENTED = "LOAD_ORIENTED"


class NoHealthyInstance(Exception):
    pass


@dataclass
class Instance:
    address: Address
    weight: int = 1
    healthy: bool = True
    in_flight: int = 0
    picks: int = 0
    current_weight: int = 0  # smooth-WRR state
    last_failure_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "address": f"{self.address[0]}:{self.address[1]}",
            "weight": self.weight,
            "healthy": self.healthy,
            "in_flight": self.in_flight,
            "picks": self.picks,
        }


class InstancePool:
    """Pick targets under a lock so cursor and gauges stay consistent."""

    def __init__(
        self,
        instances: list[Instance],
        strategy: Strategy = Strategy.ROUND_ROBIN,
        failure_cooldown_s: float = 2.0,
    ):
        if not instances:
            raise ValueError("pool needs at least one instance")
        for inst in instances:
            if inst.weight < 1:
                raise ValueError("instance weights must be >= 1")
        self.instances = instances
        self.strategy = strategy
        self.failure_cooldown_s = failure_cooldown_s
        self._lock = threading.Lock()
        self._rr_cursor = 0

    def _eligible(self) -> list[Instance]:
        now = time.monotonic()
        out = []
        for inst in self.instances:
            if inst.healthy:
                out.append(inst)
            elif (
                inst.last_failure_at is not None
                and now - inst.last_failure_at >= self.failure_cooldown_s
            ):
                out.append(inst)  # cooldown expired: give it another try
        return out

    def pick(self) -> Instance:
        """Choose an instance per the strategy; raises NoHealthyInstance."""
        with self._lock:
            eligible = self._eligible()
            if not eligible:
                raise NoHealthyInstance()
            if self.strategy is Strategy.ROUND_ROBIN:
                idx = self._rr_cursor % len(eligible)
                chosen = eligible[idx]
                self._rr_cursor = (idx + 1) % len(eligible)
            elif self.strategy is Strategy.WEIGHTED_ROUND_ROBIN:
                total = sum(inst.weight for inst in eligible)
                for inst in eligible:
                    inst.current_weight += inst.weight
                chosen = max(eligible, key=lambda inst: inst.current_weight)
                chosen.current_weight -= total
            else:  # LOAD_ORIENTED: least in-flight, list order breaking ties
                chosen = eligible[0]
                for inst in eligible[1:]:
                    if inst.in_flight < chosen.in_flight:
                        chosen = inst
            chosen.picks += 1
            return chosen

    def begin(self, inst: Instance) -> None:
        with self._lock:
            inst.in_flight += 1

    def finish(self, inst: Instance, ok: bool) -> None:
        with self._lock:
            inst.in_flight -= 1
            if ok:
                inst.healthy = True
                inst.last_failure_at = None
            else:
                inst.healthy = False
                inst.last_failure_at = time.monotonic()

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [inst.to_dict() for inst in self.instances]

    def reconfigure(self, instances: list[Instance], strategy: Strategy) -> None:
        with self._lock:
            self.instances = instances
            self.strategy = strategy
            self._rr_cursor = 0


class BalancerServer(ComponentServer):
    """HTTP proxy distributing traffic over a pool of gateway instances.

    Admin surface: ``PUT /admin/lb/pool`` replaces instances and strategy,
    ``GET /admin/lb/stats`` exposes per-instance picks and in-flight
    gauges.
    """

    name = "balancer"

    def __init__(
        self,
        pool: InstancePool,
        host: str = "127.0.0.1",
        port: int = 0,
        upstream_timeout: float = 60.0,
    ):
        super().__init__(host, port)
        self.pool = pool
        self.upstream_timeout = upstream_timeout

    def handler_class(self) -> type[Handler]:
        lb = self

        class BalancerHandler(Handler):
            def do_GET(self) -> None:
                if self.path == "/admin/lb/stats":
                    self.respond_json(
                        200,
                        {
                            "strategy": lb.pool.strategy.value,
                            "instances": lb.pool.snapshot(),
                        },
                    )
                else:
                    lb._handle_traffic(self)

            def do_PUT(self) -> None:
                if self.path == "/admin/lb/pool":
                    try:
                        raw = json.loads(self.read_body() or b"{}")
                        strategy = Strategy(str(raw.get("strategy", "ROUND_ROBIN")).upper())
                        instances = []
                        for item in raw["instances"]:
                            host, _, port = str(item["address"]).rpartition(":")
                            instances.append(
                                Instance(
                                    address=(host, int(port)),
                                    weight=int(item.get("weight", 1)),
                                )
                            )
                        lb.pool.reconfigure(instances, strategy)
                    except (ValueError, KeyError) as exc:
                        self.respond_json(400, {"error": str(exc)})
                        return
                    self.respond_json(200, {"instances": len(lb.pool.instances)})
                else:
                    lb._handle_traffic(self)

            def do_POST(self) -> None:
                lb._handle_traffic(self)

            def do_DELETE(self) -> None:
                lb._handle_traffic(self)

        return BalancerHandler

    def _handle_traffic(self, handler: Handler) -> None:
        body = handler.read_body()
        try:
            inst = self.pool.pick()
        except NoHealthyInstance:
            handler.respond(
                503, b"no healthy instance", headers={LB_ACTION_HEADER: "no-healthy"}
            )
            return
        self.pool.begin(inst)
        ok = False
        try:
            status, resp_headers, resp_body = proxy_request(
                inst.address,
                handler.command,
                handler.path,
                handler.header_map(),
                body,
                timeout=self.upstream_timeout,
            )
            ok = True
        except UpstreamError as exc:
            handler.respond(502, f"instance unreachable: {exc}".encode())
            return
        finally:
            self.pool.finish(inst, ok)
        handler.relay(status, resp_headers, resp_body)


def resize_workers(gateway_admin: Address, new_size: int, timeout: float = 10.0) -> dict:
    """Set the gateway's worker-pool target; returns the acknowledgment.

    Raises UpstreamError when the gateway cannot be reached and ValueError
    when it refuses the size.
    """
    if new_size < 1:
        raise ValueError("new_size must be >= 1")
    status, body = http_json(
        "PUT", gateway_admin, "/admin/gw/workers", {"workers": new_size}, timeout=timeout
    )
    if status != 200:
        raise ValueError(f"gateway refused resize: HTTP {status} {body}")
    return body or {}
