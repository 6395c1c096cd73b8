"""Pure scheduling and admission logic, checked against independent oracles."""

import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mwqos.model import Discipline, Mechanism, PepPolicy, PriorityLevel, RejectMode
from mwqos.pep import (
    MECHANISM_ORDER,
    PriorityQueues,
    QueueFull,
    QueueItem,
    Rejecter,
    mechanism_chain,
)

H, M, L = PriorityLevel.HIGH, PriorityLevel.MEDIUM, PriorityLevel.LOW


# --- mechanism chain -------------------------------------------------------


def test_chain_reject_only():
    policy = PepPolicy(enabled=frozenset({Mechanism.REJECT}))
    assert mechanism_chain(policy) == (Mechanism.REJECT,)


def test_chain_empty_is_passthrough():
    assert mechanism_chain(PepPolicy.passthrough()) == ()


def test_chain_reject_then_schedule():
    policy = PepPolicy(enabled=frozenset({Mechanism.SCHEDULE, Mechanism.REJECT}))
    assert mechanism_chain(policy) == (Mechanism.REJECT, Mechanism.SCHEDULE)


def test_chain_full_order():
    policy = PepPolicy(enabled=frozenset(Mechanism))
    assert mechanism_chain(policy) == MECHANISM_ORDER


# --- deterministic rejection ----------------------------------------------


def _rejected_positions(percentage, n):
    rej = Rejecter(RejectMode.DETERMINISTIC)
    return [k for k in range(1, n + 1) if rej.decide(M, percentage)]


def test_percentage_zero_never_rejects():
    assert _rejected_positions(0, 500) == []


def test_percentage_hundred_always_rejects():
    assert _rejected_positions(100, 50) == list(range(1, 51))


def test_thirty_percent_over_ten():
    # Hand enumeration of floor(k*30/100): increments at k = 4, 7, 10.
    assert _rejected_positions(30, 10) == [4, 7, 10]


def test_forty_percent_over_hundred_exact():
    assert len(_rejected_positions(40, 100)) == 40


@given(
    n=st.integers(min_value=0, max_value=2000),
    p=st.integers(min_value=0, max_value=100),
)
def test_deterministic_rejection_floor_exactness(n, p):
    rejected = len(_rejected_positions(p, n))
    assert rejected == (n * p) // 100


def test_counters_track_per_priority():
    rej = Rejecter(RejectMode.DETERMINISTIC)
    for _ in range(10):
        rej.decide(H, 0)
        rej.decide(L, 100)
    assert rej.seen[H] == 10 and rej.rejected[H] == 0
    assert rej.seen[L] == 10 and rej.rejected[L] == 10
    rej.reset()
    assert rej.seen[L] == 0 and rej.rejected[L] == 0


def test_probabilistic_mode_seeded_and_within_tolerance():
    rej = Rejecter(RejectMode.PROBABILISTIC, seed=7)
    outcomes = [rej.decide(M, 40) for _ in range(10000)]
    rate = sum(outcomes) / len(outcomes)
    assert abs(rate - 0.40) < 0.03
    replay = Rejecter(RejectMode.PROBABILISTIC, seed=7)
    assert [replay.decide(M, 40) for _ in range(10000)] == outcomes


# --- queues: FIFO, capacity, strict priority --------------------------------


def _item(priority, tag=None):
    return QueueItem(payload=tag, priority=priority)


def test_single_enqueue_depths():
    q = PriorityQueues(capacity=10)
    q.enqueue(_item(H))
    assert (q.depth(H), q.depth(M), q.depth(L)) == (1, 0, 0)


def test_enqueue_beyond_capacity():
    q = PriorityQueues(capacity=2)
    q.enqueue(_item(M))
    q.enqueue(_item(M))
    with pytest.raises(QueueFull):
        q.enqueue(_item(M))
    q.enqueue(_item(L))  # other queues unaffected


def test_fifo_within_priority():
    q = PriorityQueues(capacity=10)
    q.enqueue(_item(M, "a"))
    q.enqueue(_item(M, "b"))
    assert q.dispatch().payload == "a"
    assert q.dispatch().payload == "b"


@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), max_size=40))
def test_fifo_property_per_priority(tags):
    q = PriorityQueues(capacity=100)
    for tag in tags:
        q.enqueue(_item(M, tag))
    assert [q.dispatch().payload for _ in tags] == tags


def test_priority_first_order():
    q = PriorityQueues(capacity=10, discipline=Discipline.PRIORITY_FIRST)
    q.enqueue(_item(H, "a"))
    q.enqueue(_item(M, "b"))
    q.enqueue(_item(L, "c"))
    assert [q.dispatch().payload for _ in range(3)] == ["a", "b", "c"]
    assert q.dispatch() is None


def test_priority_first_low_alone():
    q = PriorityQueues(capacity=10)
    q.enqueue(_item(L, "only"))
    assert q.dispatch().payload == "only"


def test_priority_first_no_dominance_violation_on_random_trace():
    rng = random.Random(42)
    q = PriorityQueues(capacity=100000, discipline=Discipline.PRIORITY_FIRST)
    depths = {H: 0, M: 0, L: 0}
    for _ in range(5000):
        if rng.random() < 0.6 or not sum(depths.values()):
            level = rng.choice([H, M, L])
            q.enqueue(_item(level))
            depths[level] += 1
        else:
            nonempty = [lvl for lvl in (H, M, L) if depths[lvl]]
            item = q.dispatch()
            assert item.priority == max(nonempty)
            depths[item.priority] -= 1


# --- WFQ against a brute-force fluid-fairness oracle ------------------------


def _gps_order(counts, weights, n_dispatch):
    """Fluid fair-queueing oracle: each backlogged class drains at its
    weight per unit of virtual time; completions happen in virtual-time
    order, ties broken by priority. Exact Fraction arithmetic."""
    left = dict(counts)
    remaining = {}
    for level in (H, M, L):
        if left[level] > 0:
            remaining[level] = Fraction(1)
            left[level] -= 1
    order = []
    while remaining and len(order) < n_dispatch:
        step = min(remaining[lvl] / weights[lvl] for lvl in remaining)
        finished = []
        for lvl in list(remaining):
            remaining[lvl] -= step * weights[lvl]
            if remaining[lvl] == 0:
                finished.append(lvl)
        for lvl in sorted(finished, reverse=True):
            order.append(lvl)
            if left[lvl] > 0:
                remaining[lvl] = Fraction(1)
                left[lvl] -= 1
            else:
                del remaining[lvl]
    return order


WEIGHTS_421 = {H: 4, M: 2, L: 1}


def _run_wfq(counts, weights, n_dispatch):
    q = PriorityQueues(capacity=max(counts.values()) + 1, discipline=Discipline.WFQ, weights=weights)
    for level, count in counts.items():
        for _ in range(count):
            q.enqueue(_item(level))
    order = []
    for _ in range(n_dispatch):
        item = q.dispatch()
        assert item is not None
        order.append(item.priority)
    return order


def test_wfq_saturated_shares_match_oracle():
    n = 7000
    counts = {H: n, M: n, L: n}
    impl = _run_wfq(counts, WEIGHTS_421, n)
    oracle = _gps_order(counts, WEIGHTS_421, n)
    impl_counts = {lvl: impl.count(lvl) for lvl in (H, M, L)}
    oracle_counts = {lvl: oracle.count(lvl) for lvl in (H, M, L)}
    expected = {H: 4000, M: 2000, L: 1000}
    for lvl in (H, M, L):
        assert abs(impl_counts[lvl] - expected[lvl]) <= 0.01 * n
        assert abs(oracle_counts[lvl] - expected[lvl]) <= 0.01 * n
        assert abs(impl_counts[lvl] - oracle_counts[lvl]) <= 4


def test_wfq_share_error_under_two_percent_windows():
    n = 7000
    impl = _run_wfq({H: n, M: n, L: n}, WEIGHTS_421, n)
    total_w = sum(WEIGHTS_421.values())
    for lvl in (H, M, L):
        share = impl.count(lvl) / n
        assert abs(share - WEIGHTS_421[lvl] / total_w) < 0.02


def test_wfq_respects_fifo_within_class():
    q = PriorityQueues(capacity=100, discipline=Discipline.WFQ, weights=WEIGHTS_421)
    for tag in ("m1", "m2", "m3"):
        q.enqueue(_item(M, tag))
    seen = []
    for _ in range(3):
        seen.append(q.dispatch().payload)
    assert seen == ["m1", "m2", "m3"]


def test_wfq_idle_queue_gains_no_credit():
    # A queue that was empty must not burst ahead of the virtual clock when
    # it becomes backlogged again.
    q = PriorityQueues(capacity=1000, discipline=Discipline.WFQ, weights={H: 1, M: 1, L: 1})
    for _ in range(50):
        q.enqueue(_item(M))
    for _ in range(40):
        assert q.dispatch().priority is M
    for _ in range(50):
        q.enqueue(_item(L))
    # Equal weights from here on: service should alternate roughly 1:1, not
    # let L catch up for the 40 dispatches it missed.
    window = [q.dispatch().priority for _ in range(20)]
    assert 7 <= window.count(L) <= 13


def test_reconfigure_retags_queued_items():
    q = PriorityQueues(capacity=10, discipline=Discipline.PRIORITY_FIRST)
    q.enqueue(_item(L, "l1"))
    q.enqueue(_item(H, "h1"))
    q.reconfigure(Discipline.WFQ, {H: 1, M: 1, L: 1})
    first = q.dispatch()
    assert first.payload in ("l1", "h1")
    assert q.dispatch() is not None
    assert q.dispatch() is None
