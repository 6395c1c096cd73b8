"""Middleware-level QoS management toolkit.

Pipeline stages (classification/marking proxy, differentiation proxy, stub
gateway, load balancer), an RTT-driven autonomic controller, a traffic
emulator, and the metrics/report machinery that ties a scenario run
together.
"""

from mwqos.model import (
    AdaptationRule,
    AppProfile,
    ArrivalModel,
    ClassificationRule,
    Discipline,
    InvalidPolicy,
    MalformedPriority,
    MarkingPolicy,
    Mechanism,
    PepPolicy,
    PriorityLevel,
    RejectMode,
    RttState,
    TaggedRequest,
    default_adaptation_rules,
    parse_priority,
    validate_policy,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptationRule",
    "AppProfile",
    "ArrivalModel",
    "ClassificationRule",
    "Discipline",
    "InvalidPolicy",
    "MalformedPriority",
    "MarkingPolicy",
    "Mechanism",
    "PepPolicy",
    "PriorityLevel",
    "RejectMode",
    "RttState",
    "TaggedRequest",
    "default_adaptation_rules",
    "parse_priority",
    "validate_policy",
]
