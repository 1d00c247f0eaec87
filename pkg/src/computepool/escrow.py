"""Job funding, escrow release, review locks, and the challenge mechanism.

Funds move along a fixed lifecycle: a sender's balance funds the escrow pool
at submission; completion moves the job's reward from escrow to the reward
pool; cancellation parks it in a time-locked review bucket that defaults to
releasing toward the reward pool, or refunds the sender if the work is found
invalid. Challenges escrow a bond from the challenger that is returned on an
upheld verdict and forfeited to the reward pool otherwise.

Every mutation is atomic per call and the class never creates or destroys
tokens: balances + escrow + reward pool + locked funds + bonds is constant.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable

from .tokenomics import NodeRegistry, RewardAllocation

JobId = tuple[str, int]

REVIEW_LOCK_SECONDS = 86400  # 24 hours of simulation time


def job_key(job_id: JobId) -> str:
    return f"{job_id[0]}:{job_id[1]}"


def parse_job_key(text: str) -> JobId:
    sender, _, seq = text.rpartition(":")
    if not sender or not seq.isdigit():
        raise ValueError(f"bad job key: {text!r} (expected SENDER:SEQ)")
    return sender, int(seq)


class EscrowError(Exception):
    pass


class InsufficientFundsError(EscrowError):
    pass


class JobLifecycleError(EscrowError):
    pass


class UnknownJobError(EscrowError):
    pass


class ChallengeError(EscrowError):
    pass


class JobStatus(Enum):
    PENDING = "PENDING"
    IN_PROGRESS = "IN_PROGRESS"
    DONE = "DONE"
    CANCELLED = "CANCELLED"
    LOCKED_FOR_REVIEW = "LOCKED_FOR_REVIEW"
    SETTLED = "SETTLED"
    REFUNDED = "REFUNDED"


_TRANSITIONS: dict[JobStatus, set[JobStatus]] = {
    JobStatus.PENDING: {JobStatus.IN_PROGRESS},
    JobStatus.IN_PROGRESS: {JobStatus.DONE, JobStatus.CANCELLED},
    JobStatus.DONE: {JobStatus.SETTLED},
    JobStatus.CANCELLED: {JobStatus.LOCKED_FOR_REVIEW},
    JobStatus.LOCKED_FOR_REVIEW: {JobStatus.SETTLED, JobStatus.REFUNDED},
    JobStatus.SETTLED: set(),
    JobStatus.REFUNDED: set(),
}


class ReviewVerdict(Enum):
    WORK_VALID = "WORK_VALID"
    WORK_INVALID = "WORK_INVALID"


class ChallengeVerdict(Enum):
    PENDING = "PENDING"
    UPHELD = "UPHELD"
    REJECTED = "REJECTED"


@dataclass
class Job:
    job_id: JobId
    sender: str
    reward: Fraction
    spec_name: str
    n_workers: int
    status: JobStatus = JobStatus.PENDING
    workers: list[str] = field(default_factory=list)
    created_at: int = 0
    settled_epoch: int | None = None

    def advance(self, new_status: JobStatus) -> None:
        if new_status not in _TRANSITIONS[self.status]:
            raise JobLifecycleError(
                f"job {job_key(self.job_id)}: illegal transition "
                f"{self.status.value} -> {new_status.value}"
            )
        self.status = new_status


@dataclass
class LockedFund:
    job_id: JobId
    amount: Fraction
    unlock_time: int


@dataclass
class Challenge:
    challenge_id: str
    job_id: JobId
    challenger: str
    bond: Fraction
    jury: list[str]
    verdict: ChallengeVerdict = ChallengeVerdict.PENDING
    votes: dict[str, bool] = field(default_factory=dict)


@dataclass
class PoolState:
    escrow_pool: Fraction = Fraction(0)
    reward_pool: Fraction = Fraction(0)
    locked: dict[JobId, LockedFund] = field(default_factory=dict)
    bonds: dict[str, Fraction] = field(default_factory=dict)
    # Bookkeeping only; not part of the conservation identity.
    distributed_total: Fraction = Fraction(0)
    settled_rewards_total: Fraction = Fraction(0)
    rejected_bonds_total: Fraction = Fraction(0)
    clawback_total: Fraction = Fraction(0)

    def locked_total(self) -> Fraction:
        return sum((f.amount for f in self.locked.values()), Fraction(0))

    def bonds_total(self) -> Fraction:
        return sum(self.bonds.values(), Fraction(0))

    def to_payload(self) -> dict:
        return {
            "escrow_pool": str(self.escrow_pool),
            "reward_pool": str(self.reward_pool),
            "locked": [
                [job_key(f.job_id), str(f.amount), f.unlock_time]
                for f in sorted(self.locked.values(), key=lambda f: f.job_id)
            ],
            "bonds": [
                [cid, str(amount)] for cid, amount in sorted(self.bonds.items())
            ],
            "distributed_total": str(self.distributed_total),
        }


class EscrowBank:
    """The public-chain pool machine: escrow, reward pool, locks, and bonds."""

    def __init__(
        self,
        registry: NodeRegistry,
        review_lock_seconds: int = REVIEW_LOCK_SECONDS,
        jury_size: int = 3,
    ):
        self.registry = registry
        self.pools = PoolState()
        self.review_lock_seconds = review_lock_seconds
        self.jury_size = jury_size
        self.jobs: dict[JobId, Job] = {}
        self.job_count: dict[str, int] = {}
        self.challenges: dict[str, Challenge] = {}
        self._challenge_seq = 0
        self._challenge_verdicts_by_job: dict[JobId, ChallengeVerdict] = {}

    # -- job lifecycle -----------------------------------------------------

    def submit_job(
        self, sender: str, reward: Fraction, spec_name: str, n_workers: int, now: int = 0
    ) -> Job:
        """Fund a new job from the sender's balance into escrow.

        Rejection (insufficient balance, non-positive reward) leaves every
        pool and balance untouched.
        """
        reward = Fraction(reward)
        if reward <= 0:
            raise EscrowError("job reward must be positive")
        if n_workers < 1:
            raise EscrowError("n_workers must be at least 1")
        deed = self.registry.deed(sender)
        if deed.balance < reward:
            raise InsufficientFundsError(
                f"{sender} balance {deed.balance} cannot fund reward {reward}"
            )
        self.registry.debit(sender, reward)
        self.pools.escrow_pool += reward
        seq = self.job_count.get(sender, 0) + 1
        self.job_count[sender] = seq
        job = Job(
            job_id=(sender, seq),
            sender=sender,
            reward=reward,
            spec_name=spec_name,
            n_workers=n_workers,
            created_at=now,
        )
        self.jobs[job.job_id] = job
        return job

    def job(self, job_id: JobId) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJobError(f"unknown job {job_key(job_id)}") from None

    def activate(self, job_id: JobId, workers: list[str]) -> Job:
        """Mark a funded job as running once its workers are assigned."""
        job = self.job(job_id)
        job.advance(JobStatus.IN_PROGRESS)
        job.workers = list(workers)
        return job

    def settle_job(
        self, job_id: JobId, final_status: JobStatus, now: int, epoch: int = 0
    ) -> PoolState:
        """Release a running job's escrowed reward.

        DONE moves the reward straight to the reward pool. CANCELLED parks it
        in the review lock for 24 hours of simulation time.
        """
        job = self.job(job_id)
        if final_status not in (JobStatus.DONE, JobStatus.CANCELLED):
            raise JobLifecycleError(f"cannot settle to {final_status.value}")
        if job.status != JobStatus.IN_PROGRESS:
            raise JobLifecycleError(
                f"job {job_key(job_id)} already settled (status {job.status.value})"
            )
        job.advance(final_status)
        self.pools.escrow_pool -= job.reward
        if final_status == JobStatus.DONE:
            self.pools.reward_pool += job.reward
            self.pools.settled_rewards_total += job.reward
            job.advance(JobStatus.SETTLED)
            job.settled_epoch = epoch
        else:
            self.pools.locked[job_id] = LockedFund(
                job_id, job.reward, now + self.review_lock_seconds
            )
            job.advance(JobStatus.LOCKED_FOR_REVIEW)
        return self.pools

    def resolve_review(
        self, job_id: JobId, verdict: ReviewVerdict, now: int, epoch: int = 0
    ) -> PoolState:
        """Release a review lock: valid work feeds the reward pool, invalid
        work refunds the sender. Early release requires a challenge verdict."""
        if job_id not in self.pools.locked:
            raise UnknownJobError(f"no locked funds for job {job_key(job_id)}")
        fund = self.pools.locked[job_id]
        if now < fund.unlock_time and job_id not in self._challenge_verdicts_by_job:
            raise EscrowError(
                f"review for {job_key(job_id)} cannot resolve before "
                f"t={fund.unlock_time} without a challenge verdict"
            )
        job = self.job(job_id)
        del self.pools.locked[job_id]
        if verdict == ReviewVerdict.WORK_VALID:
            self.pools.reward_pool += fund.amount
            self.pools.settled_rewards_total += fund.amount
            job.advance(JobStatus.SETTLED)
            job.settled_epoch = epoch
        else:
            self.registry.credit(job.sender, fund.amount)
            job.advance(JobStatus.REFUNDED)
        return self.pools

    # -- challenges ----------------------------------------------------------

    def open_challenge(
        self,
        challenger: str,
        job_id: JobId,
        bond: Fraction,
        rng_seed: bytes,
        active_ids: Iterable[str],
        epoch: int = 0,
    ) -> Challenge:
        """Escrow a challenger bond and draw a jury by seeded lottery.

        The jury excludes the challenger, the job sender, and the job's
        workers; the draw is a pure function of the seed, so replays pick the
        same jury.
        """
        bond = Fraction(bond)
        job = self.job(job_id)
        if job.status not in (JobStatus.LOCKED_FOR_REVIEW, JobStatus.SETTLED):
            raise ChallengeError(
                f"job {job_key(job_id)} is not challengeable (status {job.status.value})"
            )
        if job.status == JobStatus.SETTLED and job.settled_epoch != epoch:
            raise ChallengeError(
                f"job {job_key(job_id)} settled in epoch {job.settled_epoch}; "
                f"challenge window closed"
            )
        if bond <= 0:
            raise ChallengeError("challenge bond must be positive")
        deed = self.registry.deed(challenger)
        if deed.balance < bond:
            raise InsufficientFundsError(
                f"{challenger} balance {deed.balance} cannot post bond {bond}"
            )
        excluded = {challenger, job.sender, *job.workers}
        eligible = sorted(set(active_ids) - excluded)
        if len(eligible) < self.jury_size:
            raise ChallengeError(
                f"only {len(eligible)} eligible jurors, need {self.jury_size}"
            )
        jury = random.Random(rng_seed).sample(eligible, self.jury_size)

        self.registry.debit(challenger, bond)
        self._challenge_seq += 1
        challenge = Challenge(
            challenge_id=f"ch{self._challenge_seq}",
            job_id=job_id,
            challenger=challenger,
            bond=bond,
            jury=jury,
        )
        self.challenges[challenge.challenge_id] = challenge
        self.pools.bonds[challenge.challenge_id] = bond
        return challenge

    def resolve_challenge(
        self, challenge_id: str, votes: dict[str, bool], now: int = 0
    ) -> tuple[Challenge, PoolState]:
        """Apply jury votes (True = uphold). Majority uphold returns the bond
        and refunds the challenged job's reward to its sender; otherwise the
        bond is forfeited to the reward pool."""
        try:
            challenge = self.challenges[challenge_id]
        except KeyError:
            raise ChallengeError(f"unknown challenge {challenge_id}") from None
        if challenge.verdict != ChallengeVerdict.PENDING:
            raise ChallengeError(f"challenge {challenge_id} already resolved")
        if set(votes) != set(challenge.jury):
            raise ChallengeError(
                "need exactly one vote per juror: "
                f"expected {sorted(challenge.jury)}, got {sorted(votes)}"
            )
        upheld = sum(1 for v in votes.values() if v) * 2 > len(challenge.jury)
        challenge.votes = dict(votes)
        challenge.verdict = (
            ChallengeVerdict.UPHELD if upheld else ChallengeVerdict.REJECTED
        )

        bond = self.pools.bonds.pop(challenge.challenge_id)
        job = self.job(challenge.job_id)
        if upheld:
            self.registry.credit(challenge.challenger, bond)
            self._challenge_verdicts_by_job[job.job_id] = ChallengeVerdict.UPHELD
            if job.status == JobStatus.LOCKED_FOR_REVIEW:
                self.resolve_review(job.job_id, ReviewVerdict.WORK_INVALID, now)
            elif job.status == JobStatus.SETTLED:
                # Funds already sit in the reward pool (same epoch, so not yet
                # distributed); claw them back to the sender. The status graph
                # has no SETTLED -> REFUNDED edge, so the job stays SETTLED.
                self.pools.reward_pool -= job.reward
                self.pools.settled_rewards_total -= job.reward
                self.pools.clawback_total += job.reward
                self.registry.credit(job.sender, job.reward)
        else:
            self.pools.reward_pool += bond
            self.pools.rejected_bonds_total += bond
            self._challenge_verdicts_by_job[job.job_id] = ChallengeVerdict.REJECTED
        return challenge, self.pools

    # -- epoch distribution and audit ----------------------------------------

    def pay_reward(self, deed_id: str, amount: Fraction) -> None:
        """Move one allocation entry's amount from the reward pool to a deed."""
        if amount < 0:
            raise EscrowError("reward amount must be non-negative")
        if self.pools.reward_pool < amount:
            raise EscrowError("reward pool underflow")
        self.pools.reward_pool -= amount
        self.registry.credit(deed_id, amount)
        self.pools.distributed_total += amount

    def pay_allocation(self, allocation: RewardAllocation) -> None:
        for entry in allocation.entries:
            if entry.amount:
                self.pay_reward(entry.deed_id, entry.amount)

    def conservation_total(self) -> Fraction:
        """Tokens visible anywhere in the system; constant across every event."""
        return (
            self.registry.total_balance()
            + self.pools.escrow_pool
            + self.pools.reward_pool
            + self.pools.locked_total()
            + self.pools.bonds_total()
        )
