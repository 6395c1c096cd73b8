"""RTT-driven policy controller.

Watches the round-trip times of the protected (HIGH) flow, classifies each
sample into a state band, and swaps the differentiation policy when a
state change survives the hysteresis rule: a degraded state needs
``enter_streak`` consecutive in-band samples, recovery to NORMAL needs
``recover_streak``. Every sample, transition, and executed action is
appended to a line-delimited knowledge log.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from mwqos.httpbase import Address, ComponentServer, Handler, UpstreamError, http_json
from mwqos.model import (
    AdaptationRule,
    InvalidPolicy,
    PepPolicy,
    PriorityLevel,
    Mechanism,
    RttState,
    state_for_rtt,
    validate_adaptation_rules,
)


class UnknownState(InvalidPolicy):
    """No adaptation rule covers the requested state."""


class ExecutionFailed(Exception):
    """The policy push did not reach the differentiation stage."""


@dataclass(frozen=True)
class RttSample:
    request_id: str
    priority: PriorityLevel
    rtt_ms: float
    completed_at: int  # monotonic ns

    def __post_init__(self) -> None:
        if self.rtt_ms < 0:
            raise ValueError("rtt must be >= 0")


@dataclass(frozen=True)
class Transition:
    state: RttState
    at_sample: int


class StateMachine:
    """Streak-based hysteresis over the RTT bands.

    A sample that lands outside a candidate state's band resets that
    state's streak; reaching the required streak switches the current
    state. Not thread safe: callers serialize observation in arrival
    order.
    """

    def __init__(
        self,
        rules: Sequence[AdaptationRule],
        enter_streak: int = 5,
        recover_streak: int = 12,
        initial: RttState = RttState.NORMAL,
    ):
        self.rules = validate_adaptation_rules(rules)
        self.enter_streak = enter_streak
        self.recover_streak = recover_streak
        self.current = initial
        self.samples_seen = 0
        self._streaks = {rule.state: 0 for rule in self.rules}

    def required_streak(self, state: RttState) -> int:
        return self.recover_streak if state is RttState.NORMAL else self.enter_streak

    def observe(self, sample: RttSample) -> Transition | None:
        """Feed one sample; returns a Transition when the state flips."""
        self.samples_seen += 1
        band_state = state_for_rtt(self.rules, sample.rtt_ms).state
        for state in self._streaks:
            self._streaks[state] = self._streaks[state] + 1 if state is band_state else 0
        if band_state is self.current:
            return None
        if self._streaks[band_state] >= self.required_streak(band_state):
            self.current = band_state
            self._streaks = {state: 0 for state in self._streaks}
            return Transition(state=band_state, at_sample=self.samples_seen)
        return None


def plan(
    state: RttState, rules: Sequence[AdaptationRule], baseline: PepPolicy
) -> PepPolicy:
    """Rejection policy for ``state``: HIGH never rejected, MEDIUM/LOW per
    the matching rule, everything else carried over from the baseline."""
    for rule in rules:
        if rule.state is state:
            return replace(
                baseline,
                enabled=frozenset({Mechanism.REJECT}),
                rejection={
                    PriorityLevel.HIGH: 0,
                    PriorityLevel.MEDIUM: rule.med_rejection,
                    PriorityLevel.LOW: rule.low_rejection,
                },
            )
    raise UnknownState(f"no rule for state {state.value}")


def execute(
    policy: PepPolicy,
    pep_admin: Address,
    retries: int = 3,
    backoff_s: float = 0.1,
) -> dict:
    """Push the policy to the differentiation stage, retrying with bounded
    backoff. Raises ExecutionFailed when every attempt fails."""
    last_error: Exception | None = None
    for attempt in range(retries):
        try:
            status, body = http_json("PUT", pep_admin, "/admin/pep/policy", policy.to_dict())
            if status == 200:
                return body or {}
            last_error = ExecutionFailed(f"policy push got HTTP {status}: {body}")
        except UpstreamError as exc:
            last_error = exc
        time.sleep(backoff_s * (2**attempt))
    raise ExecutionFailed(str(last_error))


class KnowledgeLog:
    """Append-only line-delimited JSON record of what the manager saw and did."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.entries: list[dict] = []

    def append(self, kind: str, **payload) -> None:
        entry = {"ts": time.time(), "kind": kind, **payload}
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with self.path.open("a") as fh:
                    fh.write(json.dumps(entry) + "\n")

    def transitions(self) -> list[str]:
        with self._lock:
            return [e["state"] for e in self.entries if e["kind"] == "transition"]


def read_knowledge_log(path: str | Path) -> list[dict]:
    entries = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


class AutonomicManager:
    """Single control loop: samples in, policy pushes out.

    Sample ingestion is thread safe; observation happens on a dedicated
    thread in arrival order. Only HIGH-priority samples drive the state
    machine.
    """

    def __init__(
        self,
        rules: Sequence[AdaptationRule],
        pep_admin: Address | None,
        baseline: PepPolicy,
        knowledge_log: str | Path | None = None,
        enter_streak: int = 5,
        recover_streak: int = 12,
        executor: Callable[[PepPolicy], object] | None = None,
        log_samples: bool = True,
    ):
        self.machine = StateMachine(rules, enter_streak, recover_streak)
        self.pep_admin = pep_admin
        self.baseline = baseline
        self.log = KnowledgeLog(knowledge_log)
        self.log_samples = log_samples
        self.transitions: list[Transition] = []
        self._executor = executor
        self._queue: queue.SimpleQueue[RttSample | None] = queue.SimpleQueue()
        self._thread: threading.Thread | None = None
        self.execution_failures = 0

    @property
    def state(self) -> RttState:
        return self.machine.current

    def start(self) -> None:
        self.log.append("start", state=self.machine.current.value)
        self._thread = threading.Thread(target=self._loop, name="autonomic", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._queue.put(None)
        if self._thread is not None:
            self._thread.join(timeout=10)
            self._thread = None

    def submit(self, sample: RttSample) -> None:
        """Queue a sample for observation (non-blocking, any thread)."""
        self._queue.put(sample)

    def _loop(self) -> None:
        while True:
            sample = self._queue.get()
            if sample is None:
                return
            self.observe_now(sample)

    def observe_now(self, sample: RttSample) -> Transition | None:
        """Synchronously run one sample through the loop (used by tests and
        by the background thread)."""
        if sample.priority is not PriorityLevel.HIGH:
            return None
        transition = self.machine.observe(sample)
        if self.log_samples:
            self.log.append(
                "sample",
                rtt_ms=round(sample.rtt_ms, 3),
                state=self.machine.current.value,
                request_id=sample.request_id,
            )
        if transition is None:
            return None
        self.transitions.append(transition)
        policy = plan(transition.state, self.machine.rules, self.baseline)
        self.log.append("transition", state=transition.state.value, at_sample=transition.at_sample)
        self._push(policy, transition)
        return transition

    def _push(self, policy: PepPolicy, transition: Transition) -> None:
        try:
            if self._executor is not None:
                result = self._executor(policy)
            elif self.pep_admin is not None:
                result = execute(policy, self.pep_admin)
            else:
                result = {"skipped": True}
            self.log.append(
                "action",
                state=transition.state.value,
                policy=policy.to_dict(),
                result=result if isinstance(result, (dict, str, int, bool)) else str(result),
            )
        except ExecutionFailed as exc:
            self.execution_failures += 1
            self.log.append("action_failed", state=transition.state.value, error=str(exc))


class AmServer(ComponentServer):
    """HTTP front for a manager running in its own process.

    ``POST /admin/am/sample`` feeds a sample, ``GET /admin/am/state``
    reports the current state and transition count.
    """

    name = "autonomic-manager"

    def __init__(self, manager: AutonomicManager, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.manager = manager

    def start(self) -> Address:
        self.manager.start()
        return super().start()

    def stop(self) -> None:
        super().stop()
        self.manager.stop()

    def handler_class(self) -> type[Handler]:
        am = self

        class AmHandler(Handler):
            def do_POST(self) -> None:
                if self.path == "/admin/am/sample":
                    try:
                        raw = json.loads(self.read_body() or b"{}")
                        sample = RttSample(
                            request_id=str(raw.get("request_id", "")),
                            priority=PriorityLevel[str(raw["priority"]).upper()],
                            rtt_ms=float(raw["rtt_ms"]),
                            completed_at=int(raw.get("completed_at", time.monotonic_ns())),
                        )
                    except (ValueError, KeyError) as exc:
                        self.respond_json(400, {"error": str(exc)})
                        return
                    am.manager.submit(sample)
                    self.respond_json(200, {"state": am.manager.state.value})
                else:
                    self.respond(404, b"not found")

            def do_GET(self) -> None:
                if self.path == "/admin/am/state":
                    self.respond_json(
                        200,
                        {
                            "state": am.manager.state.value,
                            "transitions": [t.state.value for t in am.manager.transitions],
                            "samples_seen": am.manager.machine.samples_seen,
                        },
                    )
                else:
                    self.respond(404, b"not found")

        return AmHandler
