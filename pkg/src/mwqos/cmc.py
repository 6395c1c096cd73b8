"""Classification and marking stage.

Unmarked requests are classified (first matching rule wins) and stamped
with the TOS_HTTP priority of their class; already-marked requests skip
the classifier entirely. The stage then proxies to its next hop, or to the
bypass hop when deactivated.
"""

from __future__ import annotations

import enum
import json
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence

from mwqos.httpbase import Address, ComponentServer, Handler, UpstreamError, proxy_request
from mwqos.model import (
    CLASS_HEADER,
    DEFAULT_CLASS,
    DEFAULT_RULE,
    INGRESS_NS_HEADER,
    ClassificationRule,
    MarkingPolicy,
    TaggedRequest,
    rules_from_list,
)


class Route(enum.Enum):
    TO_CLASSIFIER = "TO_CLASSIFIER"
    TO_FORWARDER = "TO_FORWARDER"


@dataclass(frozen=True)
class CmcState:
    """Activation flag plus the (rules, marking) pair, swapped atomically."""

    activated: bool
    rules: tuple[ClassificationRule, ...]
    marking: MarkingPolicy
    next_hop: Address
    bypass_hop: Address | None = None  # used when deactivated; defaults to next_hop

    @property
    def forward_target(self) -> Address:
        if self.activated or self.bypass_hop is None:
            return self.next_hop
        return self.bypass_hop


def receive(request: TaggedRequest, state: CmcState) -> Route:
    """Route marked traffic (or everything, when deactivated) straight to
    the forwarder; only unmarked requests visit the classifier."""
    if request.priority is not None or not state.activated:
        return Route.TO_FORWARDER
    return Route.TO_CLASSIFIER


def classify(request: TaggedRequest, rules: Sequence[ClassificationRule]) -> str:
    """Class of the first matching rule; total thanks to the terminal default."""
    host = ""
    for key, value in request.headers.items():
        if key.lower() == "host":
            host = value
            break
    for rule in tuple(rules) + (DEFAULT_RULE,):
        if rule.matches(request.source_id, host, request.target):
            return rule.class_name
    return DEFAULT_CLASS


def mark(request: TaggedRequest, class_name: str, marking: MarkingPolicy) -> TaggedRequest:
    """Stamp the priority of ``class_name``; every other field is untouched."""
    return request.with_priority(marking.priority_for(class_name))


class CmcServer(ComponentServer):
    """HTTP ingress stage.

    Admin surface: ``PUT /admin/cmc/policy`` replaces the (rules, marking)
    pair atomically, ``POST /admin/cmc/activate`` / ``deactivate`` toggle the
    stage, ``GET /admin/cmc/stats`` exposes counters and the stage's own
    added-latency samples.
    """

    name = "cmc"

    def __init__(
        self,
        next_hop: Address,
        rules: Sequence[ClassificationRule] = (),
        marking: MarkingPolicy | None = None,
        bypass_hop: Address | None = None,
        activated: bool = True,
        host: str = "127.0.0.1",
        port: int = 0,
        upstream_timeout: float = 60.0,
    ):
        super().__init__(host, port)
        self._state = CmcState(
            activated=activated,
            rules=tuple(rules),
            marking=marking or MarkingPolicy({}),
            next_hop=next_hop,
            bypass_hop=bypass_hop,
        )
        self._state_lock = threading.Lock()
        self.upstream_timeout = upstream_timeout
        self._counters_lock = threading.Lock()
        self.classified = 0
        self.passed_through = 0
        self.forward_errors = 0
        self.added_latency_ms: deque[float] = deque(maxlen=20000)

    @property
    def state(self) -> CmcState:
        with self._state_lock:
            return self._state

    def set_state(self, **changes) -> CmcState:
        with self._state_lock:
            self._state = replace(self._state, **changes)
            return self._state

    def handler_class(self) -> type[Handler]:
        cmc = self

        class CmcHandler(Handler):
            def do_GET(self) -> None:
                if self.path == "/admin/cmc/stats":
                    with cmc._counters_lock:
                        samples = list(cmc.added_latency_ms)
                        payload = {
                            "activated": cmc.state.activated,
                            "classified": cmc.classified,
                            "passed_through": cmc.passed_through,
                            "forward_errors": cmc.forward_errors,
                            "added_latency": {
                                "count": len(samples),
                                "median_ms": statistics.median(samples) if samples else None,
                            },
                        }
                    self.respond_json(200, payload)
                else:
                    cmc._handle_traffic(self)

            def do_PUT(self) -> None:
                if self.path == "/admin/cmc/policy":
                    try:
                        raw = json.loads(self.read_body() or b"{}")
                        rules = rules_from_list(raw.get("rules") or [])
                        marking = MarkingPolicy.from_dict(raw.get("marking") or {})
                    except (ValueError, KeyError) as exc:
                        self.respond_json(400, {"error": str(exc)})
                        return
                    cmc.set_state(rules=rules, marking=marking)
                    self.respond_json(200, {"rules": len(rules)})
                else:
                    cmc._handle_traffic(self)

            def do_POST(self) -> None:
                if self.path == "/admin/cmc/activate":
                    cmc.set_state(activated=True)
                    self.respond_json(200, {"activated": True})
                elif self.path == "/admin/cmc/deactivate":
                    cmc.set_state(activated=False)
                    self.respond_json(200, {"activated": False})
                else:
                    cmc._handle_traffic(self)

            def do_DELETE(self) -> None:
                cmc._handle_traffic(self)

        return CmcHandler

    def _handle_traffic(self, handler: Handler) -> None:
        ingress_ns = time.monotonic_ns()
        state = self.state
        request = TaggedRequest.from_wire(
            method=handler.command,
            target=handler.path,
            headers=handler.header_map(),
            body=handler.read_body(),
            peer_address=handler.client_address[0],
            ingress_time=ingress_ns,
        )

        out_headers = dict(request.headers)
        if receive(request, state) is Route.TO_CLASSIFIER:
            class_name = classify(request, state.rules)
            request = mark(request, class_name, state.marking)
            out_headers = dict(request.headers)
            out_headers[CLASS_HEADER] = class_name
            with self._counters_lock:
                self.classified += 1
        else:
            with self._counters_lock:
                self.passed_through += 1

        if state.activated:
            out_headers[INGRESS_NS_HEADER] = str(ingress_ns)
            with self._counters_lock:
                self.added_latency_ms.append((time.monotonic_ns() - ingress_ns) / 1e6)

        try:
            status, resp_headers, body = proxy_request(
                state.forward_target,
                request.method,
                request.target,
                out_headers,
                request.body,
                timeout=self.upstream_timeout,
            )
        except UpstreamError as exc:
            with self._counters_lock:
                self.forward_errors += 1
            handler.respond(502, f"upstream unreachable: {exc}".encode())
            return
        handler.relay(status, resp_headers, body)
