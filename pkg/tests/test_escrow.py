"""Escrow bank: job lifecycle, review locks, challenges, conservation."""

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from computepool.escrow import (
    REVIEW_LOCK_SECONDS,
    ChallengeError,
    ChallengeVerdict,
    EscrowBank,
    EscrowError,
    InsufficientFundsError,
    JobLifecycleError,
    JobStatus,
    ReviewVerdict,
    UnknownJobError,
    job_key,
    parse_job_key,
)
from computepool.tokenomics import NodeRegistry


def make_bank(balances=None):
    reg = NodeRegistry()
    defaults = {f"n{i}": 1000 for i in range(1, 9)}
    for deed, bal in (balances or defaults).items():
        reg.register(deed, deed.encode().ljust(32, b"\0"), Fraction(bal))
    return EscrowBank(reg)


def test_job_key_roundtrip():
    assert job_key(("alice", 3)) == "alice:3"
    assert parse_job_key("alice:3") == ("alice", 3)
    with pytest.raises(ValueError):
        parse_job_key("no-separator")
    with pytest.raises(ValueError):
        parse_job_key("alice:zero")


def test_submit_funds_escrow_and_sequences_ids():
    bank = make_bank()
    j1 = bank.submit_job("n1", Fraction(100), "p", 2)
    j2 = bank.submit_job("n1", Fraction(50), "p", 1)
    j3 = bank.submit_job("n2", Fraction(10), "p", 1)
    assert (j1.job_id, j2.job_id, j3.job_id) == (("n1", 1), ("n1", 2), ("n2", 1))
    assert bank.registry.deed("n1").balance == 850
    assert bank.pools.escrow_pool == 160
    assert j1.status == JobStatus.PENDING


def test_submit_rejections_leave_state_untouched():
    bank = make_bank({"poor": 30})
    with pytest.raises(InsufficientFundsError):
        bank.submit_job("poor", Fraction(31), "p", 1)
    with pytest.raises(EscrowError):
        bank.submit_job("poor", Fraction(0), "p", 1)
    with pytest.raises(EscrowError):
        bank.submit_job("poor", Fraction(5), "p", 0)
    assert bank.registry.deed("poor").balance == 30
    assert bank.pools.escrow_pool == 0
    assert bank.jobs == {}


def test_lifecycle_graph_is_enforced():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(100), "p", 1)
    with pytest.raises(JobLifecycleError):
        job.advance(JobStatus.DONE)  # must go through IN_PROGRESS
    bank.activate(job.job_id, ["n2"])
    assert job.status == JobStatus.IN_PROGRESS
    assert job.workers == ["n2"]
    with pytest.raises(JobLifecycleError):
        bank.activate(job.job_id, ["n3"])
    with pytest.raises(UnknownJobError):
        bank.activate(("ghost", 1), ["n2"])


def test_settle_done_feeds_reward_pool():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(100), "p", 1)
    bank.activate(job.job_id, ["n2"])
    bank.settle_job(job.job_id, JobStatus.DONE, now=500, epoch=2)
    assert job.status == JobStatus.SETTLED
    assert job.settled_epoch == 2
    assert bank.pools.escrow_pool == 0
    assert bank.pools.reward_pool == 100
    assert bank.pools.settled_rewards_total == 100
    with pytest.raises(JobLifecycleError, match="already settled"):
        bank.settle_job(job.job_id, JobStatus.DONE, now=501)


def test_settle_rejects_non_final_status():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(100), "p", 1)
    bank.activate(job.job_id, ["n2"])
    with pytest.raises(JobLifecycleError):
        bank.settle_job(job.job_id, JobStatus.SETTLED, now=0)


def test_cancel_locks_for_review_and_early_resolve_fails():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(100), "p", 1)
    bank.activate(job.job_id, ["n2"])
    bank.settle_job(job.job_id, JobStatus.CANCELLED, now=1000)
    assert job.status == JobStatus.LOCKED_FOR_REVIEW
    fund = bank.pools.locked[job.job_id]
    assert fund.amount == 100
    assert fund.unlock_time == 1000 + REVIEW_LOCK_SECONDS
    with pytest.raises(EscrowError, match="cannot resolve before"):
        bank.resolve_review(job.job_id, ReviewVerdict.WORK_VALID, now=1000)
    with pytest.raises(EscrowError):
        bank.resolve_review(job.job_id, ReviewVerdict.WORK_VALID,
                            now=fund.unlock_time - 1)


def test_review_valid_pays_pool_invalid_refunds_sender():
    bank = make_bank()
    j1 = bank.submit_job("n1", Fraction(100), "p", 1)
    j2 = bank.submit_job("n1", Fraction(40), "p", 1)
    for j in (j1, j2):
        bank.activate(j.job_id, ["n2"])
        bank.settle_job(j.job_id, JobStatus.CANCELLED, now=0)
    unlock = REVIEW_LOCK_SECONDS
    bank.resolve_review(j1.job_id, ReviewVerdict.WORK_VALID, now=unlock, epoch=3)
    assert j1.status == JobStatus.SETTLED
    assert bank.pools.reward_pool == 100
    bank.resolve_review(j2.job_id, ReviewVerdict.WORK_INVALID, now=unlock)
    assert j2.status == JobStatus.REFUNDED
    assert bank.registry.deed("n1").balance == 1000 - 100  # only j1 stayed spent
    assert bank.pools.locked == {}
    with pytest.raises(UnknownJobError):
        bank.resolve_review(j2.job_id, ReviewVerdict.WORK_VALID, now=unlock)


def locked_job(bank, sender="n1", reward=90, workers=("n2",)):
    job = bank.submit_job(sender, Fraction(reward), "p", len(workers))
    bank.activate(job.job_id, list(workers))
    bank.settle_job(job.job_id, JobStatus.CANCELLED, now=0)
    return job


def test_jury_draw_matches_seeded_lottery_and_excludes_parties():
    bank = make_bank()
    job = locked_job(bank, sender="n1", workers=("n2", "n3"))
    active = [f"n{i}" for i in range(1, 9)]
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"seed-a", active)
    eligible = sorted(set(active) - {"n1", "n2", "n3", "n4"})
    assert ch.jury == random.Random(b"seed-a").sample(eligible, 3)
    assert not {"n1", "n2", "n3", "n4"} & set(ch.jury)
    assert bank.registry.deed("n4").balance == 1000 - 9
    assert bank.pools.bonds[ch.challenge_id] == 9

    # same seed, same jury; the draw has no hidden state
    bank2 = make_bank()
    job2 = locked_job(bank2, sender="n1", workers=("n2", "n3"))
    ch2 = bank2.open_challenge("n4", job2.job_id, Fraction(9), b"seed-a", active)
    assert ch2.jury == ch.jury
    bank3 = make_bank()
    job3 = locked_job(bank3, sender="n1", workers=("n2", "n3"))
    ch3 = bank3.open_challenge("n4", job3.job_id, Fraction(9), b"seed-b", active)
    assert ch3.jury == random.Random(b"seed-b").sample(eligible, 3)


def test_challenge_rejections():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(90), "p", 1)
    active = [f"n{i}" for i in range(1, 9)]
    with pytest.raises(ChallengeError, match="not challengeable"):
        bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active)
    bank.activate(job.job_id, ["n2"])
    bank.settle_job(job.job_id, JobStatus.CANCELLED, now=0)
    with pytest.raises(ChallengeError, match="bond must be positive"):
        bank.open_challenge("n4", job.job_id, Fraction(0), b"s", active)
    with pytest.raises(InsufficientFundsError):
        bank.open_challenge("n4", job.job_id, Fraction(2000), b"s", active)
    with pytest.raises(ChallengeError, match="eligible jurors"):
        bank.open_challenge("n4", job.job_id, Fraction(9), b"s",
                            ["n1", "n2", "n4", "n5", "n6"])


def test_challenge_window_closes_after_settlement_epoch():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(90), "p", 1)
    bank.activate(job.job_id, ["n2"])
    bank.settle_job(job.job_id, JobStatus.DONE, now=0, epoch=2)
    active = [f"n{i}" for i in range(1, 9)]
    with pytest.raises(ChallengeError, match="window closed"):
        bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active, epoch=3)
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active, epoch=2)
    assert ch.verdict == ChallengeVerdict.PENDING


def test_upheld_challenge_on_locked_job_refunds_sender_and_bond():
    bank = make_bank()
    job = locked_job(bank, reward=90)
    active = [f"n{i}" for i in range(1, 9)]
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active)
    votes = {ch.jury[0]: True, ch.jury[1]: True, ch.jury[2]: False}
    resolved, pools = bank.resolve_challenge(ch.challenge_id, votes)
    assert resolved.verdict == ChallengeVerdict.UPHELD
    assert job.status == JobStatus.REFUNDED
    assert bank.registry.deed("n1").balance == 1000  # reward refunded
    assert bank.registry.deed("n4").balance == 1000  # bond returned
    assert pools.locked == {} and pools.bonds == {}
    assert pools.reward_pool == 0


def test_rejected_challenge_forfeits_bond_to_pool():
    bank = make_bank()
    job = locked_job(bank, reward=90)
    active = [f"n{i}" for i in range(1, 9)]
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active)
    votes = {j: (i == 2) for i, j in enumerate(ch.jury)}
    resolved, pools = bank.resolve_challenge(ch.challenge_id, votes)
    assert resolved.verdict == ChallengeVerdict.REJECTED
    assert bank.registry.deed("n4").balance == 991
    assert pools.reward_pool == 9
    assert pools.rejected_bonds_total == 9
    # the job is still locked; the ordinary review can now run at unlock time
    assert job.status == JobStatus.LOCKED_FOR_REVIEW
    bank.resolve_review(job.job_id, ReviewVerdict.WORK_VALID, now=REVIEW_LOCK_SECONDS)
    assert pools.reward_pool == 99


def test_rejected_verdict_allows_early_review_release():
    bank = make_bank()
    job = locked_job(bank, reward=90)
    active = [f"n{i}" for i in range(1, 9)]
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active)
    bank.resolve_challenge(ch.challenge_id, {j: False for j in ch.jury})
    # a recorded verdict unlocks the review before the 24h timer
    bank.resolve_review(job.job_id, ReviewVerdict.WORK_VALID, now=10)
    assert job.status == JobStatus.SETTLED


def test_upheld_challenge_on_settled_job_claws_back_reward():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(90), "p", 1)
    bank.activate(job.job_id, ["n2"])
    bank.settle_job(job.job_id, JobStatus.DONE, now=0, epoch=1)
    active = [f"n{i}" for i in range(1, 9)]
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active, epoch=1)
    resolved, pools = bank.resolve_challenge(ch.challenge_id,
                                             {j: True for j in ch.jury})
    assert resolved.verdict == ChallengeVerdict.UPHELD
    assert job.status == JobStatus.SETTLED  # no settled -> refunded edge
    assert pools.reward_pool == 0
    assert pools.clawback_total == 90
    assert pools.settled_rewards_total == 0
    assert bank.registry.deed("n1").balance == 1000
    assert bank.registry.deed("n4").balance == 1000


def test_challenge_vote_bookkeeping():
    bank = make_bank()
    job = locked_job(bank)
    active = [f"n{i}" for i in range(1, 9)]
    ch = bank.open_challenge("n4", job.job_id, Fraction(9), b"s", active)
    with pytest.raises(ChallengeError, match="unknown challenge"):
        bank.resolve_challenge("ch99", {})
    with pytest.raises(ChallengeError, match="one vote per juror"):
        bank.resolve_challenge(ch.challenge_id, {ch.jury[0]: True})
    with pytest.raises(ChallengeError, match="one vote per juror"):
        votes = {j: True for j in ch.jury}
        votes["n1"] = True
        bank.resolve_challenge(ch.challenge_id, votes)
    bank.resolve_challenge(ch.challenge_id, {j: False for j in ch.jury})
    with pytest.raises(ChallengeError, match="already resolved"):
        bank.resolve_challenge(ch.challenge_id, {j: False for j in ch.jury})


def test_pay_reward_guards_pool():
    bank = make_bank()
    job = bank.submit_job("n1", Fraction(50), "p", 1)
    bank.activate(job.job_id, ["n2"])
    bank.settle_job(job.job_id, JobStatus.DONE, now=0)
    bank.pay_reward("n3", Fraction(20))
    assert bank.registry.deed("n3").balance == 1020
    assert bank.pools.distributed_total == 20
    with pytest.raises(EscrowError, match="underflow"):
        bank.pay_reward("n3", Fraction(31))
    with pytest.raises(EscrowError):
        bank.pay_reward("n3", Fraction(-1))


verdict_choice = st.sampled_from(["done", "valid", "invalid"])


@given(st.lists(st.tuples(st.integers(min_value=1, max_value=200), verdict_choice),
                min_size=1, max_size=12))
@settings(max_examples=100, deadline=None)
def test_conservation_holds_across_any_job_history(steps):
    bank = make_bank({"s": 10**6, "w": 0, "x": 0})
    start = bank.conservation_total()
    for reward, outcome in steps:
        job = bank.submit_job("s", Fraction(reward), "p", 1)
        assert bank.conservation_total() == start
        bank.activate(job.job_id, ["w"])
        if outcome == "done":
            bank.settle_job(job.job_id, JobStatus.DONE, now=0)
        else:
            bank.settle_job(job.job_id, JobStatus.CANCELLED, now=0)
            assert bank.conservation_total() == start
            verdict = (ReviewVerdict.WORK_VALID if outcome == "valid"
                       else ReviewVerdict.WORK_INVALID)
            bank.resolve_review(job.job_id, verdict, now=REVIEW_LOCK_SECONDS)
        assert bank.conservation_total() == start
    # drain whatever reached the reward pool and check one last time
    bank.pay_reward("x", bank.pools.reward_pool)
    assert bank.conservation_total() == start
