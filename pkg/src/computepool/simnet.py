"""Deterministic discrete-event simulation of the full protocol network.

The engine runs a scenario on a logical clock (integer milliseconds) with a
single priority-ordered event heap. Everything that looks random (message
drops, jury seeds) comes from labeled substreams of the run seed, and nothing
reads the wall clock, so one (scenario, seed) pair always produces the same
ledger bytes and the same reports.

Ordering at equal timestamps is fixed by an explicit priority tier per event
kind, with epoch closes last, so state observed by a close includes every
same-tick heartbeat, delivery, and unlock.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from fractions import Fraction

from .crypto import Signer, derive_signer, digest
from .distribution import (
    Assignment,
    GatherError,
    InsufficientWorkersError,
    ProgressProof,
    ProgressTracker,
    ResultShard,
    assign_workers,
    chain_genesis,
    make_capability_commitment,
    make_result_shard,
    next_commitment,
    reduce_gather,
)
from .encoding import encode
from .escrow import (
    ChallengeError,
    EscrowBank,
    InsufficientFundsError,
    JobId,
    JobStatus,
    ReviewVerdict,
    UnknownJobError,
    job_key,
)
from .ledger import (
    CreditCommand,
    EntryKind,
    Ledger,
    LedgerEntry,
    OpenChallengeCommand,
    ResolveChallengeCommand,
    SettleCommand,
    oracle_mirror,
    sign_entry,
)
from .pipeline import PipelineRun, PluginCode, hash_sign_recheck, make_plugin_code, safety_check
from .scenario import ChallengeSpec, JobSpec, NodeSpec, Scenario
from .tokenomics import (
    Capability,
    EpochConfig,
    NodeRegistry,
    NoEligibleNodesError,
    RewardAllocation,
    distribute_epoch_rewards,
)

COORDINATOR_ID = "coord"
PENALTY_POWER = 1.0  # declared power lost per rejected progress proof


class SimulationError(Exception):
    pass


# Priority tiers at equal timestamps; lower runs first. Epoch closes run last
# so same-tick heartbeats, deliveries, and unlocks land inside the epoch.
PRI_DELIVER = 0
PRI_NODE_FLIP = 1
PRI_HEARTBEAT = 2
PRI_ACTION = 4
PRI_REVIEW = 6
PRI_EPOCH_CLOSE = 9


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT-style match: '+' spans one level, trailing '#' spans the rest."""
    p_parts = pattern.split("/")
    t_parts = topic.split("/")
    for i, p in enumerate(p_parts):
        if p == "#":
            return i == len(p_parts) - 1
        if i >= len(t_parts):
            return False
        if p != "+" and p != t_parts[i]:
            return False
    return len(p_parts) == len(t_parts)


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: dict
    sender: str
    reliable: bool


@dataclass
class MessageAudit:
    published: int = 0
    delivered: int = 0
    dropped: int = 0
    rejected: int = 0
    pending_at_end: int = 0

    def consistent(self) -> bool:
        return self.published == (
            self.delivered + self.dropped + self.rejected + self.pending_at_end
        )


@dataclass
class _WorkerTask:
    """One worker's side of a running job."""

    job: JobId
    worker: str
    worker_index: int
    steps_total: int
    run: PipelineRun
    head: bytes  # worker's own chain head
    link: int = 0
    pending_proofs: list[ProgressProof] = field(default_factory=list)
    last_sent: ProgressProof | None = None
    cancelled: bool = False
    result_sent: bool = False


@dataclass
class _JobRuntime:
    """Coordinator's view of a running job."""

    spec: JobSpec
    job: JobId
    assignments: list[Assignment]
    shards: dict[int, ResultShard] = field(default_factory=dict)
    settled: bool = False


@dataclass
class ChallengeOutcome:
    challenge_id: str
    job: str
    challenger: str
    jury: tuple[str, ...]
    verdict: str


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    ledger: Ledger
    bank: EscrowBank
    registry: NodeRegistry
    allocations: list[RewardAllocation]
    pool_timeline: list[dict]
    challenge_outcomes: list[ChallengeOutcome]
    audit: dict
    messages: MessageAudit
    conservation_ok: bool
    initial_total: Fraction
    final_total: Fraction


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.epoch_ms = scenario.epoch_seconds * 1000
        self.horizon_ms = scenario.epochs * self.epoch_ms
        self.heartbeat_ms = scenario.heartbeat_seconds * 1000

        self.registry = NodeRegistry()
        self.bank = EscrowBank(
            self.registry,
            review_lock_seconds=scenario.review_lock_seconds,
        )
        self.ledger = Ledger(genesis_timestamp=0)

        self._heap: list[tuple[int, int, int, str, dict]] = []
        self._seq = 0
        self._now = 0
        self._pending_entries: list[LedgerEntry] = []

        self._signers: dict[str, Signer] = {}
        self._node_specs: dict[str, NodeSpec] = {n.node_id: n for n in scenario.nodes}
        self._up: dict[str, bool] = {}
        self._subs: list[tuple[str, str]] = []  # (pattern, subscriber node)

        self._net_rng = random.Random(
            int.from_bytes(digest(self._seed_bytes() + b"|net"), "big")
        )

        self._tracker = ProgressTracker()
        self._proof_buffer: dict[tuple[str, str], dict[int, ProgressProof]] = {}
        self._jobs: dict[JobId, _JobRuntime] = {}
        self._tasks: dict[tuple[JobId, str], _WorkerTask] = {}
        self._job_specs_by_key: dict[str, JobSpec] = {}

        self.allocations: list[RewardAllocation] = []
        self.pool_timeline: list[dict] = []
        self.challenge_outcomes: list[ChallengeOutcome] = []
        self._challenge_votes: dict[str, tuple[bool, ...]] = {}
        self.audit: dict = {
            "proofs_accepted": 0,
            "proofs_rejected": 0,
            "penalties": 0,
            "jobs_submitted": 0,
            "jobs_rejected": 0,
            "jobs_done": 0,
            "jobs_cancelled": 0,
            "reviews_resolved": 0,
            "challenges_opened": 0,
            "challenges_failed": 0,
            "code_rechecks": 0,
            "plugins_vetted": 0,
            "closes_skipped": 0,
        }
        self.messages = MessageAudit()
        self._initial_total = Fraction(0)
        self._conservation_ok = True

    # -- plumbing ---------------------------------------------------------

    def _seed_bytes(self) -> bytes:
        return f"{self.scenario.name}|{self.seed}".encode()

    def _signer(self, node_id: str) -> Signer:
        if node_id not in self._signers:
            self._signers[node_id] = derive_signer(str(self.seed), node_id)
        return self._signers[node_id]

    def _schedule(self, at: int, priority: int, kind: str, data: dict) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, priority, self._seq, kind, data))

    def _epoch_of(self, at_ms: int) -> int:
        if at_ms <= 0:
            return 1
        return -(-at_ms // self.epoch_ms)

    def _record(self, kind: EntryKind, author: str, payload: dict) -> LedgerEntry:
        entry = sign_entry(kind, author, payload, self._signer(author))
        self._pending_entries.append(entry)
        return entry

    def _seal_tick(self) -> None:
        if self._pending_entries:
            self.ledger.append_entries(self._pending_entries, timestamp=self._now)
            self._pending_entries = []

    def _check_conservation(self) -> None:
        if self.bank.conservation_total() != self._initial_total:
            self._conservation_ok = False
            raise SimulationError(
                f"token conservation broken at t={self._now}ms: "
                f"{self.bank.conservation_total()} != {self._initial_total}"
            )

    # -- message fabric -----------------------------------------------------

    def _subscribe(self, pattern: str, node_id: str) -> None:
        self._subs.append((pattern, node_id))

    def _publish(self, topic: str, payload: dict, sender: str, reliable: bool) -> None:
        """One transmission attempt per matching subscriber, one drop draw each."""
        matched = [node for pattern, node in self._subs if topic_matches(pattern, topic)]
        if not matched:
            self.messages.published += 1
            self.messages.rejected += 1
            return
        env = Envelope(topic=topic, payload=payload, sender=sender, reliable=reliable)
        src = self._region_of(sender)
        for node in matched:
            self.messages.published += 1
            dst = self._region_of(node)
            p_src = self.scenario.regions[src].drop_rate
            p_dst = self.scenario.regions[dst].drop_rate
            p = 1.0 - (1.0 - p_src) * (1.0 - p_dst)
            if self._net_rng.random() < p:
                self.messages.dropped += 1
                if reliable and self._now + self.heartbeat_ms <= self.horizon_ms:
                    self._schedule(
                        self._now + self.heartbeat_ms,
                        PRI_ACTION,
                        "RESEND",
                        {"topic": topic, "payload": payload, "sender": sender},
                    )
                continue
            latency = self._latency_ms(src, dst)
            self._schedule(
                self._now + latency,
                PRI_DELIVER,
                "DELIVER",
                {"env": env, "to": node},
            )

    def _region_of(self, node_id: str) -> str:
        if node_id == COORDINATOR_ID:
            return self._coord_region
        return self._node_specs[node_id].region

    def _latency_ms(self, src: str, dst: str) -> int:
        a = self.scenario.regions[src]
        if src == dst:
            return max(1, a.intra_latency_ms)
        b = self.scenario.regions[dst]
        return max(1, a.intra_latency_ms + a.inter_latency_ms + b.intra_latency_ms)

    # -- setup ------------------------------------------------------------------

    def _setup(self) -> None:
        scenario = self.scenario
        self._coord_region = sorted(scenario.regions)[0]

        coord_key = self._signer(COORDINATOR_ID).verify_key
        self.registry.register(
            COORDINATOR_ID, coord_key, Fraction(0), Capability(), registered_epoch=1
        )
        self._record(
            EntryKind.NODE_SPEC,
            COORDINATOR_ID,
            {
                "deed_id": COORDINATOR_ID,
                "verify_key": coord_key.hex(),
                "region": self._coord_region,
                "role": "coordinator",
            },
        )
        self._up[COORDINATOR_ID] = True
        self._subscribe("jobs/#", COORDINATOR_ID)
        self._subscribe("proofs/#", COORDINATOR_ID)
        self._subscribe("results/#", COORDINATOR_ID)

        for node in scenario.nodes:
            key = self._signer(node.node_id).verify_key
            self.registry.register(
                node.node_id, key, node.balance, node.capability, registered_epoch=1
            )
            self.registry.set_power(node.node_id, 1, node.power_for_epoch(1))
            self._up[node.node_id] = True
            self._subscribe(f"work/{node.node_id}/#", node.node_id)
            self._record(
                EntryKind.NODE_SPEC,
                node.node_id,
                {
                    "deed_id": node.node_id,
                    "verify_key": key.hex(),
                    "region": node.region,
                    "capability": node.capability.to_payload(),
                    "balance": str(node.balance),
                },
            )
            for window in node.downtime:
                self._schedule(window.start * 1000, PRI_NODE_FLIP, "NODE_DOWN", {"node": node.node_id})
                self._schedule(window.end * 1000, PRI_NODE_FLIP, "NODE_UP", {"node": node.node_id})
            t = self.heartbeat_ms
            while t <= self.horizon_ms:
                self._schedule(t, PRI_HEARTBEAT, "HEARTBEAT", {"node": node.node_id})
                t += self.heartbeat_ms

        for epoch in range(1, scenario.epochs + 1):
            self._schedule(epoch * self.epoch_ms, PRI_EPOCH_CLOSE, "EPOCH_CLOSE", {"epoch": epoch})

        seq_by_sender: dict[str, int] = {}
        for index, job in enumerate(scenario.jobs):
            seq = seq_by_sender.get(job.sender, 0) + 1
            seq_by_sender[job.sender] = seq
            key_str = f"{job.sender}:{seq}"
            self._job_specs_by_key[key_str] = job
            self._schedule(
                job.at * 1000, PRI_ACTION, "JOB_ARRIVAL", {"index": index, "key": key_str}
            )
            if job.cancel_at is not None:
                self._schedule(
                    job.cancel_at * 1000, PRI_ACTION, "JOB_CANCEL", {"job_key": key_str}
                )

        for index, ch in enumerate(scenario.challenges):
            self._schedule(ch.at * 1000, PRI_ACTION, "CHALLENGE_OPEN", {"index": index})

        self._now = 0
        self._seal_tick()
        self._initial_total = self.bank.conservation_total()

    # -- event handlers --------------------------------------------------------

    def _on_heartbeat(self, data: dict) -> None:
        node = data["node"]
        if self._up[node]:
            self.registry.accrue_alive(
                node, self._epoch_of(self._now), self.scenario.heartbeat_seconds
            )

    def _on_node_flip(self, data: dict, up: bool) -> None:
        self._up[data["node"]] = up

    def _on_job_arrival(self, data: dict) -> None:
        spec = self.scenario.jobs[data["index"]]
        now_s = self._now // 1000
        self.audit["jobs_submitted"] += 1

        # User code is vetted before any funds move, so a rejected plugin
        # never strands tokens in escrow.
        if spec.pipeline.business.kind == "expr":
            self.audit["plugins_vetted"] += 1
            for params in spec.pipeline.business.per_worker_params:
                code = make_plugin_code(params["expr"], spec.sender, self._signer(spec.sender))
                verdict = safety_check(code.source, self.scenario.safety_policy)
                if not verdict.safe:
                    self.audit["jobs_rejected"] += 1
                    self._burn_job_seq(spec.sender, data["key"])
                    self._record(
                        EntryKind.POOL_EVENT,
                        COORDINATOR_ID,
                        {
                            "event": "plugin_rejected",
                            "job": data["key"],
                            "sender": spec.sender,
                            "pipeline": spec.pipeline_name,
                            "reasons": list(verdict.reasons),
                        },
                    )
                    return
                ok, reason = hash_sign_recheck(code, self._signer(spec.sender).verify_key)
                self.audit["code_rechecks"] += 1
                if not ok:
                    raise SimulationError(f"plugin recheck failed at submit: {reason}")

        try:
            job = self.bank.submit_job(
                spec.sender, spec.reward, spec.pipeline_name, spec.n_workers, now_s
            )
        except InsufficientFundsError:
            self.audit["jobs_rejected"] += 1
            self._burn_job_seq(spec.sender, data["key"])
            self._record(
                EntryKind.POOL_EVENT,
                COORDINATOR_ID,
                {
                    "event": "job_rejected",
                    "job": data["key"],
                    "sender": spec.sender,
                    "reason": "insufficient funds",
                },
            )
            return
        if job_key(job.job_id) != data["key"]:
            raise SimulationError(
                f"job sequence drift: expected {data['key']}, bank issued "
                f"{job_key(job.job_id)}"
            )
        self._check_conservation()
        self._try_assign(job.job_id)

    def _burn_job_seq(self, sender: str, expected_key: str) -> None:
        # A rejected submission still consumes its sender sequence number, so
        # later jobs keep the keys the scenario assigned them at parse time.
        seq = self.bank.job_count.get(sender, 0) + 1
        self.bank.job_count[sender] = seq
        if job_key((sender, seq)) != expected_key:
            raise SimulationError(
                f"job sequence drift: expected {expected_key}, "
                f"next for {sender} is {job_key((sender, seq))}"
            )

    def _try_assign(self, job_id: JobId) -> None:
        job = self.bank.job(job_id)
        spec = self._job_specs_by_key[job_key(job_id)]
        candidates = {
            node_id: ns.capability
            for node_id, ns in self._node_specs.items()
            if self._up[node_id] and node_id != job.sender
        }
        params = [{"worker_index": i, "steps": spec.steps} for i in range(spec.n_workers)]
        try:
            assignments = assign_workers(
                job_key(job_id),
                spec.requirement,
                candidates,
                params,
                self.scenario.capability_weights,
            )
        except InsufficientWorkersError:
            # Job stays PENDING; try again next tick if the horizon allows.
            retry = self._now + self.heartbeat_ms
            if retry <= self.horizon_ms:
                self._schedule(retry, PRI_ACTION, "ASSIGN_RETRY", {"job_key": job_key(job_id)})
            return

        commitments = {}
        for a in assignments:
            cap = self._node_specs[a.worker].capability
            commitments[a.worker] = make_capability_commitment(
                a.job, a.worker, cap, self._signer(a.worker)
            ).hex()
        self._record(
            EntryKind.JOB_ASSIGN,
            COORDINATOR_ID,
            {
                "job": job_key(job_id),
                "pipeline": spec.pipeline_name,
                "steps": spec.steps,
                "epoch": self._epoch_of(self._now),
                "workers": [[a.worker, a.worker_index] for a in assignments],
                "commitments": commitments,
            },
        )
        self.bank.activate(job_id, [a.worker for a in assignments])
        self._jobs[job_id] = _JobRuntime(spec=spec, job=job_id, assignments=assignments)
        for a in assignments:
            self._tracker.start(a.job, a.worker)
            payload = {
                "job": a.job,
                "worker": a.worker,
                "worker_index": a.worker_index,
                "steps": spec.steps,
                "pipeline": spec.pipeline_name,
            }
            if spec.pipeline.business.kind == "expr":
                expr = spec.pipeline.business.params_for(a.worker_index)["expr"]
                code = make_plugin_code(expr, spec.sender, self._signer(spec.sender))
                payload["code"] = {
                    "source": code.source,
                    "hash": code.code_hash.hex(),
                    "author": code.author,
                    "signature": code.signature.hex(),
                }
            self._publish(f"work/{a.worker}/assign", payload, COORDINATOR_ID, reliable=True)

    def _on_assign_retry(self, data: dict) -> None:
        job_id = self._parse_key(data["job_key"])
        if self.bank.job(job_id).status == JobStatus.PENDING:
            self._try_assign(job_id)

    @staticmethod
    def _parse_key(text: str) -> JobId:
        sender, _, seq = text.rpartition(":")
        return sender, int(seq)

    # -- worker side -----------------------------------------------------------

    def _on_assign_delivered(self, to: str, payload: dict) -> None:
        job_id = self._parse_key(payload["job"])
        task_key = (job_id, to)
        if task_key in self._tasks:
            return  # duplicate delivery after a retransmit
        if "code" in payload:
            c = payload["code"]
            code = PluginCode(
                source=c["source"],
                code_hash=bytes.fromhex(c["hash"]),
                author=c["author"],
                signature=bytes.fromhex(c["signature"]),
            )
            ok, reason = hash_sign_recheck(code, self._signer(c["author"]).verify_key)
            self.audit["code_rechecks"] += 1
            if not ok:
                self._record(
                    EntryKind.POOL_EVENT,
                    COORDINATOR_ID,
                    {"event": "code_recheck_failed", "job": payload["job"], "reason": reason},
                )
                return
        spec = self._job_specs_by_key[payload["job"]]
        run = PipelineRun(spec.pipeline, payload["worker_index"])
        self._tasks[task_key] = _WorkerTask(
            job=job_id,
            worker=to,
            worker_index=payload["worker_index"],
            steps_total=payload["steps"],
            run=run,
            head=chain_genesis(payload["job"], to),
        )
        self._schedule(
            self._now + self.heartbeat_ms,
            PRI_ACTION,
            "WORKER_STEP",
            {"job_key": payload["job"], "worker": to},
        )

    def _on_worker_step(self, data: dict) -> None:
        task = self._tasks.get((self._parse_key(data["job_key"]), data["worker"]))
        if task is None or task.cancelled or task.result_sent:
            return
        if not self._up[task.worker]:
            retry = self._now + self.heartbeat_ms
            if retry <= self.horizon_ms:
                self._schedule(retry, PRI_ACTION, "WORKER_STEP", data)
            return
        step = task.run.step()
        task.link += 1
        commitment = next_commitment(task.head, step.nonce)
        proof = ProgressProof(
            job=data["job_key"],
            worker=task.worker,
            link_index=task.link,
            commitment=commitment,
            nonce=step.nonce,
        )
        task.head = commitment
        task.pending_proofs.append(proof)

        spec = self._job_specs_by_key[data["job_key"]]
        fault = next(
            (
                f
                for f in spec.faults
                if f.worker_index == task.worker_index and f.step == step.step
            ),
            None,
        )
        if fault is not None:
            bad = self._make_faulty_proof(task, fault.kind)
            if bad is not None:
                self._publish(
                    f"proofs/{data['job_key']}", bad.to_payload(), task.worker, reliable=True
                )
        else:
            for pending in task.pending_proofs:
                self._publish(
                    f"proofs/{data['job_key']}", pending.to_payload(), task.worker, reliable=True
                )
                task.last_sent = pending
            task.pending_proofs = []

        if step.step < task.steps_total:
            nxt = self._now + self.heartbeat_ms
            self._schedule(nxt, PRI_ACTION, "WORKER_STEP", data)
        else:
            # Flush any withheld links before the result ships.
            for pending in task.pending_proofs:
                self._publish(
                    f"proofs/{data['job_key']}", pending.to_payload(), task.worker, reliable=True
                )
                task.last_sent = pending
            task.pending_proofs = []
            shard = make_result_shard(
                data["job_key"],
                task.worker,
                task.worker_index,
                task.run.result_payload(),
                self._signer(task.worker),
            )
            self._publish(
                f"results/{data['job_key']}",
                {
                    "job": data["job_key"],
                    "worker": task.worker,
                    "worker_index": task.worker_index,
                    "payload": shard.payload.hex(),
                    "digest": shard.payload_digest.hex(),
                    "signature": shard.signature.hex(),
                },
                task.worker,
                reliable=True,
            )
            task.result_sent = True

    def _make_faulty_proof(self, task: _WorkerTask, kind: str) -> ProgressProof | None:
        job = job_key(task.job)
        if kind == "replay":
            if task.last_sent is not None:
                return task.last_sent
            return ProgressProof(
                job=job,
                worker=task.worker,
                link_index=0,
                commitment=task.head,
                nonce=b"\x00" * 32,
            )
        forged_nonce = digest(encode(["forged", job, task.worker, task.link]))
        return ProgressProof(
            job=job,
            worker=task.worker,
            link_index=task.link,
            commitment=digest(b"forged" + forged_nonce),
            nonce=forged_nonce,
        )

    # -- coordinator side ----------------------------------------------------------

    def _on_proof_delivered(self, payload: dict) -> None:
        proof = ProgressProof.from_payload(payload)
        job_id = self._parse_key(proof.job)
        runtime = self._jobs.get(job_id)
        if runtime is None or runtime.settled:
            return
        key = (proof.job, proof.worker)
        _, prior = self._tracker.head(proof.job, proof.worker)
        if proof.link_index > prior + 1:
            # Links can arrive out of order on a lossy fabric; reordering is
            # not cheating, so hold the proof until its predecessor lands.
            self._proof_buffer.setdefault(key, {})[proof.link_index] = proof
            return
        self._judge_proof(proof)
        buffered = self._proof_buffer.get(key, {})
        while True:
            _, prior = self._tracker.head(proof.job, proof.worker)
            queued = buffered.pop(prior + 1, None)
            if queued is None:
                break
            self._judge_proof(queued)

    def _judge_proof(self, proof: ProgressProof) -> None:
        ok, reason = self._tracker.observe(proof)
        epoch = self._epoch_of(self._now)
        if ok:
            self.audit["proofs_accepted"] += 1
            self._record(
                EntryKind.PROGRESS_PROOF,
                proof.worker,
                dict(proof.to_payload(), epoch=epoch, verdict="accepted"),
            )
        else:
            self.audit["proofs_rejected"] += 1
            self.audit["penalties"] += 1
            new_power = self.registry.apply_penalty(
                proof.worker, epoch, PENALTY_POWER, current_epoch=epoch
            )
            self._record(
                EntryKind.POOL_EVENT,
                COORDINATOR_ID,
                {
                    "event": "proof_rejected",
                    "job": proof.job,
                    "worker": proof.worker,
                    "link": proof.link_index,
                    "reason": reason,
                    "penalty": PENALTY_POWER,
                    "power_after": new_power,
                    "epoch": epoch,
                },
            )

    def _on_result_delivered(self, payload: dict) -> None:
        job_id = self._parse_key(payload["job"])
        runtime = self._jobs.get(job_id)
        if runtime is None or runtime.settled:
            return
        shard = ResultShard(
            job=payload["job"],
            worker=payload["worker"],
            worker_index=payload["worker_index"],
            payload=bytes.fromhex(payload["payload"]),
            payload_digest=bytes.fromhex(payload["digest"]),
            signature=bytes.fromhex(payload["signature"]),
        )
        runtime.shards[shard.worker_index] = shard
        if len(runtime.shards) < len(runtime.assignments):
            return
        try:
            aggregate, agg_digest = reduce_gather(
                payload["job"],
                runtime.assignments,
                list(runtime.shards.values()),
                {a.worker: self._signer(a.worker).verify_key for a in runtime.assignments},
            )
        except GatherError as exc:
            self._record(
                EntryKind.POOL_EVENT,
                COORDINATOR_ID,
                {"event": "gather_failed", "job": payload["job"], "reason": str(exc)},
            )
            return
        runtime.settled = True
        now_s = self._now // 1000
        entry = self._record(
            EntryKind.JOB_STATUS,
            COORDINATOR_ID,
            {
                "job": payload["job"],
                "status": "DONE",
                "at": now_s,
                "epoch": self._epoch_of(self._now),
                "aggregate": agg_digest.hex(),
                "aggregate_size": len(aggregate),
            },
        )
        self._apply_entry(entry)
        self.audit["jobs_done"] += 1

    def _on_job_cancel(self, data: dict) -> None:
        job_id = self._parse_key(data["job_key"])
        job = self.bank.job(job_id)
        if job.status != JobStatus.IN_PROGRESS:
            return  # finished before the scripted cancellation fired
        runtime = self._jobs.get(job_id)
        if runtime is not None:
            runtime.settled = True
        now_s = self._now // 1000
        entry = self._record(
            EntryKind.JOB_STATUS,
            COORDINATOR_ID,
            {
                "job": data["job_key"],
                "status": "CANCELLED",
                "at": now_s,
                "epoch": self._epoch_of(self._now),
                "reason": "scripted_cancel",
            },
        )
        self._apply_entry(entry)
        self.audit["jobs_cancelled"] += 1
        for a in runtime.assignments if runtime else []:
            self._publish(
                f"work/{a.worker}/cancel", {"job": data["job_key"]}, COORDINATOR_ID, reliable=True
            )

    def _on_cancel_delivered(self, to: str, payload: dict) -> None:
        task = self._tasks.get((self._parse_key(payload["job"]), to))
        if task is not None:
            task.cancelled = True

    def _on_review_unlock(self, data: dict) -> None:
        job_id = self._parse_key(data["job_key"])
        if job_id not in self.bank.pools.locked:
            return  # a challenge verdict resolved it early
        spec = self._job_specs_by_key[data["job_key"]]
        verdict = (
            ReviewVerdict.WORK_VALID if spec.review_verdict == "valid" else ReviewVerdict.WORK_INVALID
        )
        now_s = self._now // 1000
        self.bank.resolve_review(job_id, verdict, now_s, epoch=self._epoch_of(self._now))
        self.audit["reviews_resolved"] += 1
        self._record(
            EntryKind.POOL_EVENT,
            COORDINATOR_ID,
            {
                "event": "review_resolved",
                "job": data["job_key"],
                "verdict": verdict.value,
                "at": now_s,
            },
        )
        self._check_conservation()

    def _on_challenge_open(self, data: dict) -> None:
        spec: ChallengeSpec = self.scenario.challenges[data["index"]]
        job_id = self._parse_key(spec.job_key)
        try:
            job = self.bank.job(job_id)
        except UnknownJobError:
            self.audit["challenges_failed"] += 1
            return
        bond = spec.bond if spec.bond is not None else job.reward * self.scenario.bond_fraction
        seed = digest(self._seed_bytes() + b"|jury|" + spec.job_key.encode() + spec.challenger.encode())
        entry = self._record(
            EntryKind.CHALLENGE,
            spec.challenger,
            {
                "phase": "opened",
                "job": spec.job_key,
                "challenger": spec.challenger,
                "bond": str(bond),
                "seed": seed.hex(),
                "epoch": self._epoch_of(self._now),
                "at": self._now // 1000,
            },
        )
        challenge = self._apply_entry(entry)
        if challenge is None:
            self.audit["challenges_failed"] += 1
            return
        self.audit["challenges_opened"] += 1
        self._challenge_votes[challenge.challenge_id] = spec.votes
        self._record(
            EntryKind.POOL_EVENT,
            COORDINATOR_ID,
            {
                "event": "jury_drawn",
                "challenge": challenge.challenge_id,
                "job": spec.job_key,
                "jury": list(challenge.jury),
            },
        )
        self._schedule(
            self._now + self.heartbeat_ms,
            PRI_ACTION,
            "CHALLENGE_RESOLVE",
            {"challenge_id": challenge.challenge_id},
        )

    def _on_challenge_resolve(self, data: dict) -> None:
        challenge = self.bank.challenges[data["challenge_id"]]
        votes_aligned = self._challenge_votes[challenge.challenge_id]
        if len(votes_aligned) != len(challenge.jury):
            raise SimulationError(
                f"challenge {challenge.challenge_id}: scenario provides "
                f"{len(votes_aligned)} votes for a jury of {len(challenge.jury)}"
            )
        votes = {juror: votes_aligned[i] for i, juror in enumerate(challenge.jury)}
        entry = self._record(
            EntryKind.CHALLENGE,
            COORDINATOR_ID,
            {
                "phase": "resolved",
                "challenge": challenge.challenge_id,
                "job": job_key(challenge.job_id),
                "votes": votes,
                "at": self._now // 1000,
            },
        )
        self._apply_entry(entry)

    def _on_epoch_close(self, data: dict) -> None:
        epoch = data["epoch"]
        cfg = EpochConfig(self.scenario.epoch_seconds, current_epoch=epoch)
        active = [self.registry.activity(n.node_id) for n in self.scenario.nodes]
        pool = self.bank.pools.reward_pool
        if pool > 0:
            try:
                allocation = distribute_epoch_rewards(pool, active, cfg)
            except NoEligibleNodesError:
                self.audit["closes_skipped"] += 1
                allocation = None
            if allocation is not None:
                self.allocations.append(allocation)
                entry = self._record(
                    EntryKind.REWARD_RECORD,
                    COORDINATOR_ID,
                    {
                        "epoch": epoch,
                        "pool": str(pool),
                        "entries": [
                            [e.deed_id, str(e.amount), e.share] for e in allocation.entries
                        ],
                    },
                )
                self._apply_entry(entry)
        else:
            self.audit["closes_skipped"] += 1
        if epoch < self.scenario.epochs:
            for node in self.scenario.nodes:
                self.registry.set_power(
                    node.node_id, epoch + 1, node.power_for_epoch(epoch + 1)
                )
        self.pool_timeline.append(dict(self.bank.pools.to_payload(), epoch=epoch))
        self._check_conservation()

    # -- command application ---------------------------------------------------------

    def _apply_entry(self, entry: LedgerEntry):
        """Run the oracle mirror over a fresh entry and apply its commands."""
        last_result = None
        for cmd in oracle_mirror(entry):
            if isinstance(cmd, SettleCommand):
                self.bank.settle_job(
                    cmd.job_id, JobStatus(cmd.final_status), cmd.at, epoch=cmd.epoch
                )
                if cmd.final_status == "CANCELLED":
                    unlock_s = cmd.at + self.scenario.review_lock_seconds
                    self._schedule(
                        unlock_s * 1000,
                        PRI_REVIEW,
                        "REVIEW_UNLOCK",
                        {"job_key": job_key(cmd.job_id)},
                    )
            elif isinstance(cmd, CreditCommand):
                self.bank.pay_reward(cmd.deed_id, cmd.amount)
            elif isinstance(cmd, OpenChallengeCommand):
                active_ids = [n for n, up in self._up.items() if up and n != COORDINATOR_ID]
                try:
                    last_result = self.bank.open_challenge(
                        cmd.challenger,
                        cmd.job_id,
                        cmd.bond,
                        cmd.seed,
                        active_ids,
                        epoch=cmd.epoch,
                    )
                except (ChallengeError, InsufficientFundsError) as exc:
                    self._record(
                        EntryKind.POOL_EVENT,
                        COORDINATOR_ID,
                        {
                            "event": "challenge_rejected",
                            "job": job_key(cmd.job_id),
                            "reason": str(exc),
                        },
                    )
                    last_result = None
            elif isinstance(cmd, ResolveChallengeCommand):
                challenge, _ = self.bank.resolve_challenge(cmd.challenge_id, cmd.votes, cmd.at)
                self.challenge_outcomes.append(
                    ChallengeOutcome(
                        challenge_id=challenge.challenge_id,
                        job=job_key(challenge.job_id),
                        challenger=challenge.challenger,
                        jury=tuple(challenge.jury),
                        verdict=challenge.verdict.value,
                    )
                )
                self._record(
                    EntryKind.POOL_EVENT,
                    COORDINATOR_ID,
                    {
                        "event": "challenge_settled",
                        "challenge": challenge.challenge_id,
                        "verdict": challenge.verdict.value,
                    },
                )
        self._check_conservation()
        return last_result

    # -- main loop -----------------------------------------------------------------

    def run(self) -> RunResult:
        self._setup()
        handlers = {
            "HEARTBEAT": self._on_heartbeat,
            "JOB_ARRIVAL": self._on_job_arrival,
            "ASSIGN_RETRY": self._on_assign_retry,
            "WORKER_STEP": self._on_worker_step,
            "JOB_CANCEL": self._on_job_cancel,
            "REVIEW_UNLOCK": self._on_review_unlock,
            "CHALLENGE_OPEN": self._on_challenge_open,
            "CHALLENGE_RESOLVE": self._on_challenge_resolve,
            "EPOCH_CLOSE": self._on_epoch_close,
        }
        while self._heap:
            at, _pri, _seq, kind, data = heapq.heappop(self._heap)
            self._now = at
            if kind == "DELIVER":
                env: Envelope = data["env"]
                to = data["to"]
                if not self._up[to]:
                    self.messages.rejected += 1
                    if env.reliable and self._now + self.heartbeat_ms <= self.horizon_ms:
                        self._schedule(
                            self._now + self.heartbeat_ms,
                            PRI_ACTION,
                            "RESEND",
                            {"topic": env.topic, "payload": env.payload, "sender": env.sender},
                        )
                else:
                    self.messages.delivered += 1
                    self._dispatch(to, env)
            elif kind == "RESEND":
                self._publish(data["topic"], data["payload"], data["sender"], reliable=True)
            elif kind == "NODE_DOWN":
                self._on_node_flip(data, up=False)
            elif kind == "NODE_UP":
                self._on_node_flip(data, up=True)
            else:
                handlers[kind](data)
            if not self._heap or self._heap[0][0] != at:
                self._seal_tick()
        self._seal_tick()
        final_total = self.bank.conservation_total()
        conservation_ok = self._conservation_ok and final_total == self._initial_total
        self.messages.pending_at_end = self.messages.published - (
            self.messages.delivered + self.messages.dropped + self.messages.rejected
        )
        return RunResult(
            scenario=self.scenario,
            seed=self.seed,
            ledger=self.ledger,
            bank=self.bank,
            registry=self.registry,
            allocations=self.allocations,
            pool_timeline=self.pool_timeline,
            challenge_outcomes=self.challenge_outcomes,
            audit=dict(self.audit),
            messages=self.messages,
            conservation_ok=conservation_ok,
            initial_total=self._initial_total,
            final_total=final_total,
        )

    def _dispatch(self, to: str, env: Envelope) -> None:
        parts = env.topic.split("/")
        if parts[0] == "work" and parts[-1] == "assign":
            self._on_assign_delivered(to, env.payload)
        elif parts[0] == "work" and parts[-1] == "cancel":
            self._on_cancel_delivered(to, env.payload)
        elif parts[0] == "proofs":
            self._on_proof_delivered(env.payload)
        elif parts[0] == "results":
            self._on_result_delivered(env.payload)


def run_scenario(scenario: Scenario, seed: int | None = None) -> RunResult:
    return Simulation(scenario, seed=seed).run()
