import pytest
from hypothesis import given
from hypothesis import strategies as st

from mwqos.model import (
    TOS_HEADER,
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
    RttState,
    TaggedRequest,
    default_adaptation_rules,
    parse_priority,
    rules_from_list,
    rules_to_list,
    state_for_rtt,
    validate_adaptation_rules,
    validate_policy,
)


def test_parse_priority_wire_strings():
    assert parse_priority("PRIORITY_HIGH") is PriorityLevel.HIGH
    assert parse_priority("PRIORITY_MEDIUM") is PriorityLevel.MEDIUM
    assert parse_priority("PRIORITY_LOW") is PriorityLevel.LOW


@pytest.mark.parametrize("bad", ["urgent", "priority_high", "PRIORITY_HIGH ", "", "HIGH"])
def test_parse_priority_rejects_non_members(bad):
    with pytest.raises(MalformedPriority):
        parse_priority(bad)


def test_priority_total_order():
    assert PriorityLevel.HIGH > PriorityLevel.MEDIUM > PriorityLevel.LOW
    assert len(PriorityLevel) == 3
    assert {p.wire for p in PriorityLevel} == {
        "PRIORITY_HIGH",
        "PRIORITY_MEDIUM",
        "PRIORITY_LOW",
    }


def test_validate_policy_accepts_critical_row():
    policy = PepPolicy(
        rejection={PriorityLevel.HIGH: 0, PriorityLevel.MEDIUM: 40, PriorityLevel.LOW: 80},
        weights={PriorityLevel.HIGH: 4, PriorityLevel.MEDIUM: 2, PriorityLevel.LOW: 1},
        enabled=frozenset({Mechanism.REJECT}),
    )
    assert validate_policy(policy) is policy


def test_validate_policy_rejection_out_of_range():
    policy = PepPolicy(rejection={PriorityLevel.MEDIUM: 140})
    with pytest.raises(InvalidPolicy, match="rejection"):
        validate_policy(policy)


def test_validate_policy_non_positive_weight():
    policy = PepPolicy(weights={PriorityLevel.HIGH: 0})
    with pytest.raises(InvalidPolicy, match="weight"):
        validate_policy(policy)


def test_validate_policy_negative_delay():
    policy = PepPolicy(delay_ms={PriorityLevel.LOW: -5})
    with pytest.raises(InvalidPolicy, match="delay"):
        validate_policy(policy)


def test_default_adaptation_rules_match_shipped_table():
    rules = default_adaptation_rules()
    as_tuples = [
        (r.lower_ms, r.upper_ms, r.state, r.med_rejection, r.low_rejection) for r in rules
    ]
    assert as_tuples == [
        (0, 300, RttState.NORMAL, 0, 0),
        (300, 400, RttState.WARNING, 30, 70),
        (400, None, RttState.CRITICAL, 40, 80),
    ]
    validate_adaptation_rules(rules)


def test_adaptation_band_edges():
    rules = default_adaptation_rules()
    assert state_for_rtt(rules, 0).state is RttState.NORMAL
    assert state_for_rtt(rules, 299.999).state is RttState.NORMAL
    assert state_for_rtt(rules, 300).state is RttState.WARNING
    assert state_for_rtt(rules, 399.999).state is RttState.WARNING
    assert state_for_rtt(rules, 400).state is RttState.CRITICAL
    assert state_for_rtt(rules, 1e9).state is RttState.CRITICAL


def test_adaptation_rules_must_partition():
    with pytest.raises(InvalidPolicy):
        validate_adaptation_rules(
            [
                AdaptationRule(0, 300, RttState.NORMAL, 0, 0),
                AdaptationRule(350, None, RttState.CRITICAL, 40, 80),
            ]
        )
    with pytest.raises(InvalidPolicy):
        validate_adaptation_rules([AdaptationRule(0, 300, RttState.NORMAL, 0, 0)])


def _request(headers=None):
    return TaggedRequest.from_wire(
        method="POST",
        target="/postop/data",
        headers=headers or {},
        body=b"{}",
        peer_address="10.0.0.9",
        ingress_time=123,
    )


def test_tagged_request_priority_iff_header():
    unmarked = _request()
    assert unmarked.priority is None
    marked = _request({TOS_HEADER: "PRIORITY_MEDIUM"})
    assert marked.priority is PriorityLevel.MEDIUM


def test_tagged_request_strips_malformed_mark():
    req = _request({TOS_HEADER: "urgent"})
    assert req.priority is None
    assert TOS_HEADER not in req.headers


def test_tagged_request_source_header_over_peer():
    assert _request({"X-Source-Id": "PostOp_Inj"}).source_id == "PostOp_Inj"
    assert _request().source_id == "10.0.0.9"


def test_with_priority_sets_header_and_keeps_rest():
    req = _request({"X-Custom": "v"})
    marked = req.with_priority(PriorityLevel.HIGH)
    assert marked.headers[TOS_HEADER] == "PRIORITY_HIGH"
    assert marked.headers["X-Custom"] == "v"
    assert marked.body == req.body
    assert marked.ingress_time == req.ingress_time
    assert marked.priority is PriorityLevel.HIGH


percentages = st.integers(min_value=0, max_value=100)
level_maps = st.fixed_dictionaries({level: percentages for level in PriorityLevel})
weight_maps = st.fixed_dictionaries(
    {level: st.integers(min_value=1, max_value=64) for level in PriorityLevel}
)


@given(
    rejection=level_maps,
    delay=level_maps,
    weights=weight_maps,
    discipline=st.sampled_from(list(Discipline)),
    enabled=st.sets(st.sampled_from(list(Mechanism))),
)
def test_pep_policy_round_trip(rejection, delay, weights, discipline, enabled):
    policy = PepPolicy(
        rejection=rejection,
        delay_ms=delay,
        discipline=discipline,
        weights=weights,
        enabled=frozenset(enabled),
    )
    assert PepPolicy.from_dict(policy.to_dict()) == policy


@given(
    rate=st.floats(min_value=0.1, max_value=1000, allow_nan=False),
    arrival=st.sampled_from(list(ArrivalModel)),
    priority=st.sampled_from(list(PriorityLevel)),
    burst=st.integers(min_value=1, max_value=50),
)
def test_profile_round_trip(rate, arrival, priority, burst):
    profile = AppProfile(
        name="p",
        rate=rate,
        arrival_model=arrival,
        priority_hint=priority,
        burst_size=burst if arrival is ArrivalModel.BURST else None,
        burst_period_ms=1000 if arrival is ArrivalModel.BURST else None,
        acceptable_rtt_ms=350.0,
        acceptable_loss=0.5,
    )
    assert AppProfile.from_dict(profile.to_dict()) == profile


def test_adaptation_rule_round_trip():
    for rule in default_adaptation_rules():
        assert AdaptationRule.from_dict(rule.to_dict()) == rule


def test_classification_rules_round_trip():
    rules = (
        ClassificationRule(class_name="postop", source="PostOp_Inj"),
        ClassificationRule(class_name="api", path="/api/*"),
        ClassificationRule(class_name="default"),
    )
    assert rules_from_list(rules_to_list(rules)) == rules


def test_marking_policy_round_trip():
    marking = MarkingPolicy(
        class_to_priority={"postop": PriorityLevel.HIGH, "loc": PriorityLevel.MEDIUM},
        default_priority=PriorityLevel.LOW,
    )
    assert MarkingPolicy.from_dict(marking.to_dict()) == marking


def test_profile_validation():
    with pytest.raises(InvalidPolicy, match="rate"):
        AppProfile(name="x", rate=0).validate()
    with pytest.raises(InvalidPolicy, match="burst_size"):
        AppProfile(name="x", rate=1, arrival_model=ArrivalModel.BURST).validate()
