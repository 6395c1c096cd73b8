"""Domain types shared by every pipeline stage.

Everything here is immutable after construction and safe to hand across
threads: the proxy stages swap whole policy objects atomically instead of
mutating them in place.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

# Header carrying the application-layer type-of-service mark.
TOS_HEADER = "TOS_HTTP"
# Injector identity; falls back to the peer IP when absent.
SOURCE_HEADER = "X-Source-Id"
# Observability headers added along the managed path.
CLASS_HEADER = "X-CMC-Class"
PEP_ACTION_HEADER = "X-PEP-Action"
GW_ACTION_HEADER = "X-GW-Action"
LB_ACTION_HEADER = "X-LB-Action"
INGRESS_NS_HEADER = "X-QoS-Ingress-Ns"
OVERHEAD_MS_HEADER = "X-QoS-Overhead-Ms"


class ModelError(ValueError):
    """Base class for domain validation failures."""


class MalformedPriority(ModelError):
    """The TOS_HTTP value is not one of the three wire strings."""


class InvalidPolicy(ModelError):
    """A policy document violates an invariant; the message names the field."""


class PriorityLevel(enum.IntEnum):
    """Three-valued request priority, totally ordered HIGH > MEDIUM > LOW."""

    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def wire(self) -> str:
        return "PRIORITY_" + self.name


_WIRE_TO_LEVEL = {level.wire: level for level in PriorityLevel}

#: Priorities from most to least important, the order used for queue scans.
PRIORITY_ORDER: tuple[PriorityLevel, ...] = (
    PriorityLevel.HIGH,
    PriorityLevel.MEDIUM,
    PriorityLevel.LOW,
)


def parse_priority(header_value: str) -> PriorityLevel:
    """Map a TOS_HTTP wire string to its level.

    Raises MalformedPriority for anything that is not an exact match; the
    caller then treats the request as unmarked.
    """
    try:
        return _WIRE_TO_LEVEL[header_value]
    except KeyError:
        raise MalformedPriority(f"not a priority mark: {header_value!r}") from None


def _level_map(raw: Mapping[Any, Any] | None, default: int) -> dict[PriorityLevel, int]:
    """Normalize a {level: value} mapping keyed by enum or name string."""
    out = {level: default for level in PriorityLevel}
    for key, value in (raw or {}).items():
        level = key if isinstance(key, PriorityLevel) else PriorityLevel[str(key).upper()]
        out[level] = int(value)
    return out


def _level_map_dict(m: Mapping[PriorityLevel, int], default: int = 0) -> dict[str, int]:
    return {level.name: int(m.get(level, default)) for level in PRIORITY_ORDER}


@dataclass(frozen=True)
class TaggedRequest:
    """An HTTP request plus its priority mark and timing metadata.

    ``priority`` is None exactly when the TOS_HTTP header is absent.
    ``ingress_time`` is a monotonic nanosecond stamp set once, at first
    receipt by the pipeline.
    """

    method: str
    target: str
    headers: Mapping[str, str]
    body: bytes
    source_id: str
    ingress_time: int
    priority: PriorityLevel | None = None

    @classmethod
    def from_wire(
        cls,
        method: str,
        target: str,
        headers: Mapping[str, str],
        body: bytes,
        peer_address: str,
        ingress_time: int,
    ) -> "TaggedRequest":
        """Build a request from raw HTTP pieces.

        A malformed TOS_HTTP value is stripped so the request re-enters the
        pipeline as unmarked.
        """
        headers = dict(headers)
        priority = None
        tos = _header_get(headers, TOS_HEADER)
        if tos is not None:
            try:
                priority = parse_priority(tos)
            except MalformedPriority:
                _header_del(headers, TOS_HEADER)
        source = _header_get(headers, SOURCE_HEADER) or peer_address
        return cls(
            method=method,
            target=target,
            headers=headers,
            body=body,
            source_id=source,
            ingress_time=ingress_time,
            priority=priority,
        )

    def with_priority(self, level: PriorityLevel) -> "TaggedRequest":
        """Return a copy carrying the TOS_HTTP mark for ``level``."""
        headers = dict(self.headers)
        _header_del(headers, TOS_HEADER)
        headers[TOS_HEADER] = level.wire
        return replace(self, headers=headers, priority=level)


def _header_get(headers: Mapping[str, str], name: str) -> str | None:
    lower = name.lower()
    for key, value in headers.items():
        if key.lower() == lower:
            return value
    return None


def _header_del(headers: dict[str, str], name: str) -> None:
    lower = name.lower()
    for key in [k for k in headers if k.lower() == lower]:
        del headers[key]


@dataclass(frozen=True)
class ClassificationRule:
    """First-match classification predicate.

    Each criterion is exact-match unless it ends with ``*``, which makes it
    a prefix match. Absent criteria match anything, so a rule with no
    criteria is the terminal default.
    """

    class_name: str
    source: str | None = None
    destination: str | None = None
    path: str | None = None

    def matches(self, source_id: str, destination: str, path: str) -> bool:
        return (
            _criterion_matches(self.source, source_id)
            and _criterion_matches(self.destination, destination)
            and _criterion_matches(self.path, path)
        )

    def to_dict(self) -> dict[str, Any]:
        match: dict[str, str] = {}
        if self.source is not None:
            match["source"] = self.source
        if self.destination is not None:
            match["destination"] = self.destination
        if self.path is not None:
            match["path"] = self.path
        return {"match": match, "class": self.class_name}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ClassificationRule":
        match = raw.get("match") or {}
        return cls(
            class_name=str(raw["class"]),
            source=match.get("source"),
            destination=match.get("destination"),
            path=match.get("path"),
        )


DEFAULT_CLASS = "default"

#: Terminal rule appended to every rule list so classification is total.
DEFAULT_RULE = ClassificationRule(class_name=DEFAULT_CLASS)


def _criterion_matches(pattern: str | None, value: str) -> bool:
    if pattern is None:
        return True
    if pattern.endswith("*"):
        return value.startswith(pattern[:-1])
    return value == pattern


@dataclass(frozen=True)
class MarkingPolicy:
    """Class name to priority mapping with a mandatory default."""

    class_to_priority: Mapping[str, PriorityLevel]
    default_priority: PriorityLevel = PriorityLevel.LOW

    def priority_for(self, class_name: str) -> PriorityLevel:
        return self.class_to_priority.get(class_name, self.default_priority)

    def to_dict(self) -> dict[str, Any]:
        return {
            "classes": {name: level.name for name, level in self.class_to_priority.items()},
            "default": self.default_priority.name,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "MarkingPolicy":
        classes = {
            str(name): PriorityLevel[str(level).upper()]
            for name, level in (raw.get("classes") or {}).items()
        }
        return cls(
            class_to_priority=classes,
            default_priority=PriorityLevel[str(raw.get("default", "LOW")).upper()],
        )


class Mechanism(enum.Enum):
    """Differentiation mechanisms, in their fixed application order."""

    REJECT = "REJECT"
    DELAY = "DELAY"
    SCHEDULE = "SCHEDULE"


class Discipline(enum.Enum):
    PRIORITY_FIRST = "PRIORITY_FIRST"
    WFQ = "WFQ"


class RejectMode(enum.Enum):
    DETERMINISTIC = "DETERMINISTIC"
    PROBABILISTIC = "PROBABILISTIC"


@dataclass(frozen=True)
class PepPolicy:
    """Active mechanism set and its per-priority parameters."""

    rejection: Mapping[PriorityLevel, int] = field(
        default_factory=lambda: {level: 0 for level in PriorityLevel}
    )
    delay_ms: Mapping[PriorityLevel, int] = field(
        default_factory=lambda: {level: 0 for level in PriorityLevel}
    )
    discipline: Discipline = Discipline.PRIORITY_FIRST
    weights: Mapping[PriorityLevel, int] = field(
        default_factory=lambda: {
            PriorityLevel.HIGH: 4,
            PriorityLevel.MEDIUM: 2,
            PriorityLevel.LOW: 1,
        }
    )
    enabled: frozenset[Mechanism] = frozenset()

    @classmethod
    def passthrough(cls) -> "PepPolicy":
        """Policy with no mechanism enabled."""
        return cls()

    def to_dict(self) -> dict[str, Any]:
        return {
            "enabled": sorted(m.value for m in self.enabled),
            "rejection": _level_map_dict(self.rejection),
            "delay_ms": _level_map_dict(self.delay_ms),
            "scheduling": {
                "discipline": self.discipline.value,
                "weights": _level_map_dict(self.weights, 1),
            },
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PepPolicy":
        scheduling = raw.get("scheduling") or {}
        try:
            enabled = frozenset(Mechanism(str(m).upper()) for m in raw.get("enabled") or ())
        except ValueError as exc:
            raise InvalidPolicy(f"enabled: {exc}") from None
        try:
            discipline = Discipline(str(scheduling.get("discipline", "PRIORITY_FIRST")).upper())
        except ValueError as exc:
            raise InvalidPolicy(f"scheduling.discipline: {exc}") from None
        return cls(
            rejection=_level_map(raw.get("rejection"), 0),
            delay_ms=_level_map(raw.get("delay_ms"), 0),
            discipline=discipline,
            weights=_level_map(scheduling.get("weights"), 1),
            enabled=enabled,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PepPolicy):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def validate_policy(policy: PepPolicy) -> PepPolicy:
    """Return ``policy`` unchanged if every invariant holds.

    Raises InvalidPolicy naming the violated field.
    """
    for level in PriorityLevel:
        pct = policy.rejection.get(level, 0)
        if not 0 <= pct <= 100:
            raise InvalidPolicy(f"rejection[{level.name}] out of range: {pct}")
        delay = policy.delay_ms.get(level, 0)
        if delay < 0:
            raise InvalidPolicy(f"delay_ms[{level.name}] negative: {delay}")
        weight = policy.weights.get(level, 1)
        if weight < 1:
            raise InvalidPolicy(f"weights[{level.name}] non-positive: {weight}")
    if not isinstance(policy.discipline, Discipline):
        raise InvalidPolicy(f"discipline unknown: {policy.discipline!r}")
    for mech in policy.enabled:
        if not isinstance(mech, Mechanism):
            raise InvalidPolicy(f"enabled mechanism unknown: {mech!r}")
    return policy


class RttState(enum.Enum):
    NORMAL = "NORMAL"
    WARNING = "WARNING"
    CRITICAL = "CRITICAL"


@dataclass(frozen=True)
class AdaptationRule:
    """One adaptation row: an RTT band, its state label, and the rejection
    percentages applied to the two non-protected priorities."""

    lower_ms: float
    upper_ms: float | None  # None = unbounded
    state: RttState
    med_rejection: int
    low_rejection: int

    def contains(self, rtt_ms: float) -> bool:
        if rtt_ms < self.lower_ms:
            return False
        return self.upper_ms is None or rtt_ms < self.upper_ms

    def to_dict(self) -> dict[str, Any]:
        return {
            "band": [self.lower_ms, self.upper_ms],
            "state": self.state.value,
            "medium_rejection": self.med_rejection,
            "low_rejection": self.low_rejection,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "AdaptationRule":
        band = raw["band"]
        upper = band[1]
        return cls(
            lower_ms=float(band[0]),
            upper_ms=None if upper is None else float(upper),
            state=RttState(str(raw["state"]).upper()),
            med_rejection=int(raw.get("medium_rejection", 0)),
            low_rejection=int(raw.get("low_rejection", 0)),
        )


def default_adaptation_rules() -> tuple[AdaptationRule, ...]:
    """Shipped defaults: reject nothing while healthy, shed 30/70 in the
    warning band and 40/80 past 400 ms. HIGH traffic is never rejected."""
    return (
        AdaptationRule(0, 300, RttState.NORMAL, 0, 0),
        AdaptationRule(300, 400, RttState.WARNING, 30, 70),
        AdaptationRule(400, None, RttState.CRITICAL, 40, 80),
    )


def validate_adaptation_rules(rules: Sequence[AdaptationRule]) -> tuple[AdaptationRule, ...]:
    """Check that the bands partition [0, inf) and states are unique."""
    if not rules:
        raise InvalidPolicy("adaptation rules empty")
    ordered = sorted(rules, key=lambda r: r.lower_ms)
    if ordered[0].lower_ms != 0:
        raise InvalidPolicy(f"first band starts at {ordered[0].lower_ms}, not 0")
    for prev, nxt in zip(ordered, ordered[1:]):
        if prev.upper_ms is None:
            raise InvalidPolicy(f"band for {prev.state.value} is unbounded but not last")
        if prev.upper_ms != nxt.lower_ms:
            raise InvalidPolicy(
                f"bands not contiguous at {prev.upper_ms} vs {nxt.lower_ms}"
            )
    if ordered[-1].upper_ms is not None:
        raise InvalidPolicy("last band must be unbounded")
    states = [r.state for r in ordered]
    if len(set(states)) != len(states):
        raise InvalidPolicy("duplicate state in adaptation rules")
    return tuple(ordered)


def state_for_rtt(rules: Sequence[AdaptationRule], rtt_ms: float) -> AdaptationRule:
    for rule in rules:
        if rule.contains(rtt_ms):
            return rule
    raise InvalidPolicy(f"no band covers rtt {rtt_ms}")


class ArrivalModel(enum.Enum):
    PERIODIC = "PERIODIC"
    STOCHASTIC = "STOCHASTIC"
    BURST = "BURST"


@dataclass(frozen=True)
class AppProfile:
    """Traffic shape and QoS requirements of one emulated application."""

    name: str
    rate: float  # requests per second
    arrival_model: ArrivalModel = ArrivalModel.PERIODIC
    priority_hint: PriorityLevel = PriorityLevel.LOW
    burst_size: int | None = None
    burst_period_ms: int | None = None
    acceptable_rtt_ms: float | None = None
    acceptable_loss: float | None = None

    def validate(self) -> "AppProfile":
        if self.rate <= 0:
            raise InvalidPolicy(f"profile {self.name}: rate must be > 0")
        if self.arrival_model is ArrivalModel.BURST:
            if not self.burst_size or self.burst_size < 1:
                raise InvalidPolicy(f"profile {self.name}: burst_size must be >= 1")
            if not self.burst_period_ms or self.burst_period_ms <= 0:
                raise InvalidPolicy(f"profile {self.name}: burst_period_ms must be > 0")
        if self.acceptable_loss is not None and not 0 <= self.acceptable_loss <= 1:
            raise InvalidPolicy(f"profile {self.name}: acceptable_loss outside [0,1]")
        return self

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "rate": self.rate,
            "arrival": self.arrival_model.value,
            "priority": self.priority_hint.name,
        }
        if self.arrival_model is ArrivalModel.BURST:
            out["burst_size"] = self.burst_size
            out["burst_period_ms"] = self.burst_period_ms
        if self.acceptable_rtt_ms is not None:
            out["acceptable_rtt_ms"] = self.acceptable_rtt_ms
        if self.acceptable_loss is not None:
            out["acceptable_loss"] = self.acceptable_loss
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "AppProfile":
        return cls(
            name=str(raw["name"]),
            rate=float(raw["rate"]),
            arrival_model=ArrivalModel(str(raw.get("arrival", "PERIODIC")).upper()),
            priority_hint=PriorityLevel[str(raw.get("priority", "LOW")).upper()],
            burst_size=int(raw["burst_size"]) if raw.get("burst_size") is not None else None,
            burst_period_ms=(
                int(raw["burst_period_ms"]) if raw.get("burst_period_ms") is not None else None
            ),
            acceptable_rtt_ms=(
                float(raw["acceptable_rtt_ms"])
                if raw.get("acceptable_rtt_ms") is not None
                else None
            ),
            acceptable_loss=(
                float(raw["acceptable_loss"]) if raw.get("acceptable_loss") is not None else None
            ),
        ).validate()


def rules_to_list(rules: Iterable[ClassificationRule]) -> list[dict[str, Any]]:
    return [rule.to_dict() for rule in rules]


def rules_from_list(raw: Iterable[Mapping[str, Any]]) -> tuple[ClassificationRule, ...]:
    return tuple(ClassificationRule.from_dict(item) for item in raw)
