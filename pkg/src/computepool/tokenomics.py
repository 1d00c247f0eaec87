"""Epoch reward allocation: alive time, power scores, and pool shares.

A node's unnormalized claim on an epoch's reward pool is
``exp(power) * alive_fraction`` (its power index). Shares are power indexes
normalized by the plain sum of all power indexes over the active set, so they
always sum to 1; the normalizing total deliberately carries no extra division
by protocol time, which would break that normalization.

Token amounts are exact rationals so conservation can be asserted with ``==``;
share fractions are floats and carry explicit tolerances instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

# Power scores are kept in a bounded band so exp() stays finite and penalty
# arithmetic cannot run away.
POWER_MIN = -50.0
POWER_MAX = 50.0

DEFAULT_JURY_SIZE = 3


class NoEligibleNodesError(Exception):
    """Raised when every node in the active set has a zero power index."""


class UnknownDeedError(KeyError):
    pass


def clamp_power(power: float) -> float:
    return min(POWER_MAX, max(POWER_MIN, power))


@dataclass
class EpochConfig:
    """Protocol clock: epoch length and the number of closed epochs."""

    epoch_seconds: int
    genesis_time: int = 0
    current_epoch: int = 0

    def __post_init__(self):
        if self.epoch_seconds <= 0:
            raise ValueError("epoch_seconds must be positive")
        if self.current_epoch < 0:
            raise ValueError("current_epoch must be non-negative")


@dataclass(frozen=True)
class CapabilityWeights:
    cpu: float = 1.0
    gpu: float = 4.0
    memory: float = 0.25


@dataclass(frozen=True)
class Capability:
    """Declared hardware profile: CPU units, GPU flag/units, memory units."""

    cpu: float = 1.0
    gpu: bool = False
    gpu_units: float = 0.0
    memory: float = 0.0

    def covers(self, required: "Capability") -> bool:
        """Component-wise dominance over a requirement descriptor."""
        if self.cpu < required.cpu or self.memory < required.memory:
            return False
        if required.gpu and not (self.gpu and self.gpu_units >= required.gpu_units):
            return False
        return True

    def score(self, weights: CapabilityWeights = CapabilityWeights()) -> float:
        gpu_part = weights.gpu * self.gpu_units if self.gpu else 0.0
        return weights.cpu * self.cpu + gpu_part + weights.memory * self.memory

    def to_payload(self) -> dict:
        return {
            "cpu": float(self.cpu),
            "gpu": self.gpu,
            "gpu_units": float(self.gpu_units),
            "memory": float(self.memory),
        }

    @classmethod
    def from_payload(cls, data: dict) -> "Capability":
        return cls(
            cpu=float(data.get("cpu", 1.0)),
            gpu=bool(data.get("gpu", False)),
            gpu_units=float(data.get("gpu_units", 0.0)),
            memory=float(data.get("memory", 0.0)),
        )


@dataclass
class NodeDeed:
    """A node's non-fungible identity record and its token balance."""

    deed_id: str
    owner_key: bytes
    balance: Fraction = Fraction(0)
    registered_epoch: int = 0

    def __post_init__(self):
        self.balance = Fraction(self.balance)
        if self.balance < 0:
            raise ValueError("deed balance must be non-negative")


@dataclass
class NodeActivity:
    """Per-node accounting: cumulative alive time and per-epoch power scores."""

    deed_id: str
    declared: Capability = field(default_factory=Capability)
    total_alive_seconds: int = 0
    power_by_epoch: dict[int, float] = field(default_factory=dict)
    alive_by_epoch: dict[int, int] = field(default_factory=dict)

    def power_at(self, epoch: int) -> float:
        return self.power_by_epoch.get(epoch, 0.0)


@dataclass(frozen=True)
class RewardShare:
    deed_id: str
    share: float
    amount: Fraction
    power: float
    alive_fraction: float


@dataclass
class RewardAllocation:
    """One epoch's full distribution of the reward-pool snapshot."""

    epoch: int
    pool: Fraction
    entries: list[RewardShare]

    def total_amount(self) -> Fraction:
        return sum((e.amount for e in self.entries), Fraction(0))


def total_protocol_time(cfg: EpochConfig) -> int:
    """Seconds elapsed over all closed epochs (epoch length times epoch count)."""
    if cfg.current_epoch < 1:
        raise ValueError("genesis epoch has no protocol time")
    return cfg.epoch_seconds * cfg.current_epoch


def alive_fraction(total_alive_seconds: float, protocol_seconds: float) -> float:
    """Cumulative alive time over total protocol time, clamped to [0, 1].

    The clamp guards against clock skew minting a claim above a full-uptime
    node's; callers that care should audit ``total_alive_seconds > protocol_seconds``
    before clamping hides it.
    """
    if protocol_seconds <= 0:
        raise ValueError("protocol time must be positive")
    if total_alive_seconds < 0:
        raise ValueError("alive time must be non-negative")
    return min(1.0, total_alive_seconds / protocol_seconds)


def node_power_index(power: float, live_fraction: float) -> float:
    """Unnormalized claim on the epoch pool: exp(power) * alive fraction.

    Negative powers are legal; a penalized node's index decays exponentially
    but never reaches zero while the node stays alive.
    """
    if not 0.0 <= live_fraction <= 1.0:
        raise ValueError("alive fraction must lie in [0, 1]")
    return math.exp(clamp_power(power)) * live_fraction


def _power_indexes(
    active: list[NodeActivity], cfg: EpochConfig
) -> tuple[dict[str, float], dict[str, float]]:
    t_p = total_protocol_time(cfg)
    fractions = {
        a.deed_id: alive_fraction(a.total_alive_seconds, t_p) for a in active
    }
    indexes = {
        a.deed_id: node_power_index(a.power_at(cfg.current_epoch), fractions[a.deed_id])
        for a in active
    }
    return indexes, fractions


def alloc_share(target: str, active: list[NodeActivity], cfg: EpochConfig) -> float:
    """The target node's fraction of the epoch pool among ``active`` nodes."""
    indexes, _ = _power_indexes(active, cfg)
    if target not in indexes:
        raise UnknownDeedError(target)
    total = sum(indexes.values())
    if total == 0.0:
        raise NoEligibleNodesError("no eligible nodes: all power indexes are zero")
    return indexes[target] / total


def distribute_epoch_rewards(
    pool_snapshot: Fraction, active: list[NodeActivity], cfg: EpochConfig
) -> RewardAllocation:
    """Split an epoch-close pool snapshot across the active set.

    All shares are computed against the same snapshot and paid in one pass.
    Because shares are floats, the rational amounts cannot sum to the snapshot
    bit-exactly on their own; the residue is assigned to the highest-share
    node (ties broken by lowest deed id) so conservation holds with ``==``.
    Zero-alive nodes keep a zero share and never receive the residue.
    """
    pool_snapshot = Fraction(pool_snapshot)
    if pool_snapshot < 0:
        raise ValueError("pool snapshot must be non-negative")
    if not active:
        raise NoEligibleNodesError("no active nodes")
    indexes, fractions = _power_indexes(active, cfg)
    total = sum(indexes.values())
    if total == 0.0:
        raise NoEligibleNodesError("no eligible nodes: all power indexes are zero")

    shares = {deed: idx / total for deed, idx in indexes.items()}
    amounts = {
        deed: pool_snapshot * Fraction(share) if share > 0.0 else Fraction(0)
        for deed, share in shares.items()
    }
    residue = pool_snapshot - sum(amounts.values(), Fraction(0))
    if residue:
        sink = min(shares, key=lambda d: (-shares[d], d))
        amounts[sink] += residue

    entries = [
        RewardShare(
            deed_id=a.deed_id,
            share=shares[a.deed_id],
            amount=amounts[a.deed_id],
            power=a.power_at(cfg.current_epoch),
            alive_fraction=fractions[a.deed_id],
        )
        for a in sorted(active, key=lambda a: a.deed_id)
    ]
    return RewardAllocation(epoch=cfg.current_epoch, pool=pool_snapshot, entries=entries)


class NodeRegistry:
    """All deeds and their activity records; the single balance authority."""

    def __init__(self):
        self.deeds: dict[str, NodeDeed] = {}
        self.activities: dict[str, NodeActivity] = {}

    def register(
        self,
        deed_id: str,
        owner_key: bytes,
        balance: Fraction = Fraction(0),
        capability: Capability = Capability(),
        registered_epoch: int = 0,
    ) -> NodeDeed:
        if deed_id in self.deeds:
            raise ValueError(f"deed id already registered: {deed_id}")
        deed = NodeDeed(deed_id, owner_key, Fraction(balance), registered_epoch)
        self.deeds[deed_id] = deed
        self.activities[deed_id] = NodeActivity(deed_id, declared=capability)
        return deed

    def deed(self, deed_id: str) -> NodeDeed:
        try:
            return self.deeds[deed_id]
        except KeyError:
            raise UnknownDeedError(deed_id) from None

    def activity(self, deed_id: str) -> NodeActivity:
        try:
            return self.activities[deed_id]
        except KeyError:
            raise UnknownDeedError(deed_id) from None

    def credit(self, deed_id: str, amount: Fraction) -> None:
        if amount < 0:
            raise ValueError("credit amount must be non-negative")
        self.deed(deed_id).balance += amount

    def debit(self, deed_id: str, amount: Fraction) -> None:
        deed = self.deed(deed_id)
        if amount < 0:
            raise ValueError("debit amount must be non-negative")
        if deed.balance < amount:
            raise ValueError(f"insufficient balance on {deed_id}")
        deed.balance -= amount

    def total_balance(self) -> Fraction:
        return sum((d.balance for d in self.deeds.values()), Fraction(0))

    def accrue_alive(self, deed_id: str, epoch: int, seconds: int) -> None:
        activity = self.activity(deed_id)
        activity.total_alive_seconds += seconds
        activity.alive_by_epoch[epoch] = activity.alive_by_epoch.get(epoch, 0) + seconds

    def set_power(self, deed_id: str, epoch: int, power: float) -> None:
        self.activity(deed_id).power_by_epoch[epoch] = clamp_power(power)

    def apply_penalty(
        self, deed_id: str, epoch: int, delta: float, *, current_epoch: int
    ) -> float:
        """Lower a node's power score for the running epoch; returns the new score.

        The score floor is the clamp bound, so repeated penalties saturate
        instead of diverging.
        """
        if epoch != current_epoch:
            raise ValueError(
                f"penalties apply only to the current epoch ({current_epoch}), got {epoch}"
            )
        activity = self.activity(deed_id)
        new_power = clamp_power(activity.power_at(epoch) - delta)
        activity.power_by_epoch[epoch] = new_power
        return new_power
