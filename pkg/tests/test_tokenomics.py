"""Reward math: pinned values, an independent high-precision oracle, and
property tests for normalization, shift invariance, and conservation."""

import math
from decimal import Decimal, getcontext
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from computepool.tokenomics import (
    EpochConfig,
    NodeActivity,
    NodeRegistry,
    NoEligibleNodesError,
    UnknownDeedError,
    alive_fraction,
    alloc_share,
    clamp_power,
    distribute_epoch_rewards,
    node_power_index,
    total_protocol_time,
)

getcontext().prec = 50


def decimal_shares(powers: list[float], alive: list[float]) -> list[float]:
    # Independent oracle: same formula evaluated in 50-digit decimal.
    indexes = [Decimal(repr(p)).exp() * Decimal(repr(a)) for p, a in zip(powers, alive)]
    total = sum(indexes)
    return [float(i / total) for i in indexes]


def make_active(powers, alive_seconds, epoch=4):
    return [
        NodeActivity(f"n{i:02d}", total_alive_seconds=s, power_by_epoch={epoch: p})
        for i, (p, s) in enumerate(zip(powers, alive_seconds))
    ]


def test_protocol_time_is_epoch_length_times_count():
    assert total_protocol_time(EpochConfig(86400, current_epoch=1)) == 86400
    assert total_protocol_time(EpochConfig(100, current_epoch=7)) == 700
    with pytest.raises(ValueError):
        total_protocol_time(EpochConfig(100, current_epoch=0))


def test_alive_fraction_clamps_to_unit_interval():
    assert alive_fraction(50, 100) == 0.5
    assert alive_fraction(100, 100) == 1.0
    assert alive_fraction(140, 100) == 1.0  # clock skew cannot mint extra claim
    assert alive_fraction(0, 100) == 0.0
    with pytest.raises(ValueError):
        alive_fraction(10, 0)
    with pytest.raises(ValueError):
        alive_fraction(-1, 100)


def test_power_index_pinned_value():
    assert node_power_index(-1.0, 0.5) == 0.18393972058572117
    assert node_power_index(0.0, 1.0) == 1.0
    assert node_power_index(0.0, 0.0) == 0.0


def test_power_index_clamps_extreme_powers():
    assert node_power_index(1000.0, 1.0) == math.exp(50)
    assert node_power_index(-1000.0, 1.0) == math.exp(-50)
    with pytest.raises(ValueError):
        node_power_index(0.0, 1.5)


def test_clamp_power_bounds():
    assert clamp_power(-1e9) == -50.0
    assert clamp_power(1e9) == 50.0
    assert clamp_power(3.25) == 3.25


def test_three_node_shares_pinned():
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    active = make_active([1.0, 0.0, -1.0], [400, 200, 100])
    assert alloc_share("n00", active, cfg) == 0.8211707398853239
    assert alloc_share("n01", active, cfg) == 0.15104591644767637
    assert alloc_share("n02", active, cfg) == 0.027783343666999777
    with pytest.raises(UnknownDeedError):
        alloc_share("ghost", active, cfg)


def test_three_node_distribution_exact_total():
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    active = make_active([1.0, 0.0, -1.0], [400, 200, 100])
    alloc = distribute_epoch_rewards(Fraction(100), active, cfg)
    assert alloc.total_amount() == Fraction(100)
    amounts = {e.deed_id: float(e.amount) for e in alloc.entries}
    assert amounts["n00"] == pytest.approx(82.11707398853238, abs=1e-9)
    assert amounts["n01"] == pytest.approx(15.104591644767638, abs=1e-9)
    assert amounts["n02"] == pytest.approx(2.7783343666999776, abs=1e-9)


def test_zero_alive_node_gets_nothing_and_no_residue():
    cfg = EpochConfig(epoch_seconds=100, current_epoch=2)
    active = make_active([5.0, 0.0], [0, 200], epoch=2)
    alloc = distribute_epoch_rewards(Fraction(60), active, cfg)
    by_id = {e.deed_id: e for e in alloc.entries}
    assert by_id["n00"].share == 0.0
    assert by_id["n00"].amount == 0
    assert by_id["n01"].amount == Fraction(60)


def test_no_eligible_nodes_raises():
    cfg = EpochConfig(epoch_seconds=100, current_epoch=1)
    active = make_active([1.0, 2.0], [0, 0], epoch=1)
    with pytest.raises(NoEligibleNodesError):
        distribute_epoch_rewards(Fraction(10), active, cfg)
    with pytest.raises(NoEligibleNodesError):
        distribute_epoch_rewards(Fraction(10), [], cfg)


def test_residue_goes_to_highest_share_lowest_id_on_tie():
    cfg = EpochConfig(epoch_seconds=100, current_epoch=1)
    active = make_active([0.0, 0.0, 0.0], [100, 100, 50], epoch=1)
    alloc = distribute_epoch_rewards(Fraction(1), active, cfg)
    by_id = {e.deed_id: e.amount for e in alloc.entries}
    # n00 and n01 tie for highest share; the residue lands on n00.
    plain = {d: Fraction(alloc.pool) * Fraction(s.share) for d, s in
             ((e.deed_id, e) for e in alloc.entries)}
    residue = Fraction(1) - sum(plain.values())
    assert by_id["n00"] == plain["n00"] + residue
    assert by_id["n01"] == plain["n01"]
    assert alloc.total_amount() == Fraction(1)


finite_power = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
alive_secs = st.integers(min_value=0, max_value=400)


@given(st.lists(st.tuples(finite_power, alive_secs), min_size=1, max_size=12))
@settings(max_examples=200, deadline=None)
def test_shares_normalize_to_one(rows):
    if not any(s > 0 for _, s in rows):
        rows = rows + [(0.0, 100)]
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    active = make_active([p for p, _ in rows], [s for _, s in rows])
    alloc = distribute_epoch_rewards(Fraction(1000), active, cfg)
    assert abs(sum(e.share for e in alloc.entries) - 1.0) <= 1e-9
    assert alloc.total_amount() == Fraction(1000)


@given(
    st.lists(st.tuples(finite_power, st.integers(min_value=1, max_value=400)),
             min_size=2, max_size=8),
    st.sampled_from([-3.0, 0.0, 7.0]),
)
@settings(max_examples=200, deadline=None)
def test_share_shift_invariance(rows, shift):
    # exp(p + c) scales every index by exp(c), which cancels in the ratio.
    powers = [max(-40.0, min(40.0, p)) for p, _ in rows]  # keep p + c inside clamp
    alive = [s for _, s in rows]
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    base = distribute_epoch_rewards(Fraction(500), make_active(powers, alive), cfg)
    shifted = distribute_epoch_rewards(
        Fraction(500), make_active([p + shift for p in powers], alive), cfg
    )
    for a, b in zip(base.entries, shifted.entries):
        assert abs(a.share - b.share) <= 1e-9


@given(
    st.lists(st.tuples(finite_power, st.integers(min_value=1, max_value=400)),
             min_size=1, max_size=8),
)
@settings(max_examples=150, deadline=None)
def test_shares_match_decimal_oracle(rows):
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    active = make_active([p for p, _ in rows], [s for _, s in rows])
    impl = [
        alloc_share(a.deed_id, active, cfg) for a in sorted(active, key=lambda a: a.deed_id)
    ]
    t_p = total_protocol_time(cfg)
    oracle = decimal_shares(
        [p for p, _ in rows], [min(1.0, s / t_p) for _, s in rows]
    )
    for i, o in zip(impl, oracle):
        assert abs(i - o) <= 1e-12


@given(
    finite_power,
    finite_power,
    st.integers(min_value=1, max_value=400),
)
@settings(max_examples=200, deadline=None)
def test_more_power_never_means_smaller_share(p_low, p_high, secs):
    if p_low > p_high:
        p_low, p_high = p_high, p_low
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    active = make_active([p_low, p_high, 0.5], [secs, secs, 200])
    low = alloc_share("n00", active, cfg)
    high = alloc_share("n01", active, cfg)
    assert high >= low


@given(st.lists(st.tuples(finite_power, alive_secs), min_size=1, max_size=10),
       st.integers(min_value=0, max_value=10**9))
@settings(max_examples=200, deadline=None)
def test_distribution_conserves_any_pool(rows, pool_int):
    if not any(s > 0 for _, s in rows):
        rows = rows + [(1.0, 50)]
    pool = Fraction(pool_int, 7)
    cfg = EpochConfig(epoch_seconds=100, current_epoch=4)
    active = make_active([p for p, _ in rows], [s for _, s in rows])
    alloc = distribute_epoch_rewards(pool, active, cfg)
    assert alloc.total_amount() == pool


def test_registry_balance_and_penalty_flow():
    reg = NodeRegistry()
    reg.register("a", b"k" * 32, Fraction(100), registered_epoch=1)
    reg.register("b", b"j" * 32, Fraction(0), registered_epoch=1)
    with pytest.raises(ValueError):
        reg.register("a", b"k" * 32)
    reg.credit("b", Fraction(25))
    reg.debit("a", Fraction(40))
    assert reg.deed("a").balance == 60
    assert reg.deed("b").balance == 25
    assert reg.total_balance() == 85
    with pytest.raises(ValueError):
        reg.debit("b", Fraction(26))
    with pytest.raises(UnknownDeedError):
        reg.deed("ghost")

    reg.set_power("a", 3, 2.0)
    assert reg.apply_penalty("a", 3, 0.5, current_epoch=3) == 1.5
    assert reg.activity("a").power_at(3) == 1.5
    with pytest.raises(ValueError):
        reg.apply_penalty("a", 2, 0.5, current_epoch=3)
    # penalties saturate at the clamp floor
    assert reg.apply_penalty("a", 3, 1000.0, current_epoch=3) == -50.0


def test_accrue_alive_accumulates_across_epochs():
    reg = NodeRegistry()
    reg.register("a", b"k" * 32)
    reg.accrue_alive("a", 1, 60)
    reg.accrue_alive("a", 1, 60)
    reg.accrue_alive("a", 2, 30)
    act = reg.activity("a")
    assert act.total_alive_seconds == 150
    assert act.alive_by_epoch == {1: 120, 2: 30}
