"""Decision layer: action space, policies, migration calculus, oracle.

Scheduling works on an execution state shared with the simulator. A worker
runs one action at a time: a single sub-stage, or a co-located pair under a
resource split. When one member of a pair finishes, the survivor is re-rated
to its exclusive speed for the remaining work. Tool waits run on the side
and never occupy a compute slot; merges are instantaneous graph surgery whose
KV-recomputation cost is charged when the merged sub-stage starts.

The look-ahead policy scores each candidate by the estimated completion
time of the sub-stages reachable within W retire-rounds of the frontier,
running everything not covered by the candidate at exclusive rates. With
W=1 the window collapses to the currently ready work, which is exactly
the greedy scheduler.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

from .graph import (
    DECODE_KIND_BY_BUCKET,
    DEFAULT_MEM_FRACTIONS,
    MERGEABLE_KINDS,
    SubStage,
    SubStageGraph,
    SubStageKind,
    bucketize,
)
from .slowdown import (
    DEFAULT_HEADROOM,
    FULL_ALLOCATION,
    MEM_GRID,
    SM_GRID,
    ResourceAllocation,
    SlowdownModel,
    complement_allocation,
    feasible,
)
from .workload import PipelineSpec

_EPS = 1e-9

# SM splits offered to a co-located pair; the partner takes the rest.
MUX_SM_GRID = (0.25, 0.50, 0.75)

POLICY_NAMES = ("serial", "naive_spatial", "rollout_mux", "greedy", "lookahead", "oracle")


class SchedulingError(RuntimeError):
    """Raised when an action cannot be applied to the current state."""


class MemoryPressureError(SchedulingError):
    """Raised by the naive spatial baseline when co-location would not fit."""


class OracleLimitError(RuntimeError):
    """Raised when an instance is too large for exhaustive search."""


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Exclusive:
    node_id: str
    alloc: ResourceAllocation = FULL_ALLOCATION

    def members(self) -> tuple[str, ...]:
        return (self.node_id,)


@dataclass(frozen=True)
class Multiplex:
    node_a: str
    node_b: str
    alloc_a: ResourceAllocation

    def members(self) -> tuple[str, ...]:
        return (self.node_a, self.node_b)


@dataclass(frozen=True)
class Merge:
    member_ids: tuple[str, ...]
    target_worker: int

    def members(self) -> tuple[str, ...]:
        return self.member_ids


ScheduleAction = Exclusive | Multiplex | Merge


@dataclass(frozen=True)
class TimedAction:
    start: float
    action: ScheduleAction


@dataclass
class Schedule:
    """Ordered action log; resource splits ride on the actions."""

    actions: list[TimedAction]
    policy: str = ""
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass
class Instance:
    """One scheduling problem: co-located pipeline graphs plus the model."""

    graphs: list[SubStageGraph]
    model: SlowdownModel
    headroom: float = DEFAULT_HEADROOM
    realloc_penalty: float = 0.0
    default_migration_cost: float = 0.0
    merge_enabled: bool = True

    def __post_init__(self) -> None:
        ids = [g.pipeline_id for g in self.graphs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate pipeline ids: {ids}")
        seen: set[str] = set()
        for g in self.graphs:
            dup = seen & set(g.nodes)
            if dup:
                raise ValueError(f"node ids shared between pipelines: {sorted(dup)[:3]}")
            seen |= set(g.nodes)

    def workers(self) -> list[int]:
        out: set[int] = set()
        for g in self.graphs:
            out.update(g.worker_ids())
        return sorted(out)

    def latency_model_for(self, pipeline_id: str) -> dict[int, float]:
        for g in self.graphs:
            if g.pipeline_id == pipeline_id:
                return g.latency_model
        raise KeyError(pipeline_id)

    def spec_for(self, pipeline_id: str) -> PipelineSpec | None:
        for g in self.graphs:
            if g.pipeline_id == pipeline_id:
                return g.spec
        return None


# ---------------------------------------------------------------------------
# Migration calculus


@dataclass(frozen=True)
class MigrationEstimate:
    t_origin: float
    t_migr: float
    delta: float
    member_costs: dict[str, float]
    recommend: bool


@dataclass(frozen=True)
class BalancePlan:
    batch_sizes: tuple[int, ...]
    target_index: int
    s_factor: float


def migration_cost(sub_stage: SubStage, spec: PipelineSpec) -> float:
    """KV-cache recomputation time for moving a fragment's samples.

    Modeled as 2 * params * context_tokens FLOPs at the prefill MFU.
    """
    if spec.prefill_mfu <= 0:
        raise ValueError("prefill_mfu must be positive")
    flops = 2.0 * spec.model_params * sub_stage.context_tokens
    return flops / (spec.prefill_mfu * spec.device_peak_flops)


def merged_estimate(
    members: list[SubStage], latency_model: dict[int, float]
) -> tuple[SubStageKind, float]:
    """Kind and execution-time estimate for an aggregated rollout workload.

    Merging is modeled as perfect dynamic batching: the combined remaining
    tokens drain at the merged bucket's step latency.
    """
    tokens = sum(m.remaining_decode_tokens for m in members)
    active = sum(m.active_requests for m in members)
    if active <= 0:
        return members[0].kind, max(m.duration for m in members)
    bucket = bucketize(active)
    kind = DECODE_KIND_BY_BUCKET.get(bucket, SubStageKind.DECODE_LARGE)
    return kind, tokens * latency_model[bucket] / active


def migration_gain(
    members: list[SubStage],
    target_worker: int,
    partners: dict[int, SubStage | None],
    model: SlowdownModel,
    latency_model: dict[int, float],
    spec: PipelineSpec | None = None,
    pair_alloc: ResourceAllocation | None = None,
) -> MigrationEstimate:
    """Expected execution-time improvement of aggregating fragments onto one worker.

    Workers without a co-located partner use the idle placeholder (no
    partner, zero partner time); the freed workers are not assumed to admit
    successor work inside this estimate.
    """
    if len(members) < 2:
        raise ValueError("migration needs at least two fragments")
    workers = [m.worker_id for m in members]
    if len(set(workers)) != len(workers):
        raise ValueError("fragments must sit on distinct workers")
    if target_worker not in workers:
        raise ValueError(f"target worker {target_worker} holds no fragment")
    alloc = pair_alloc or ResourceAllocation(0.5, 0.4)
    partner_alloc = complement_allocation(alloc)

    def pair_rates(member: SubStage) -> tuple[float, float, float]:
        partner = partners.get(member.worker_id)
        if partner is None:
            return 1.0, 1.0, 0.0
        s_member = model.slowdown(member.kind, partner.kind, alloc)
        s_partner = model.slowdown(partner.kind, member.kind, partner_alloc)
        return s_member, s_partner, partner.duration

    t_origin = max(pair_rates(m)[0] * m.duration for m in members) + max(
        pair_rates(m)[1] * pair_rates(m)[2] for m in members
    )

    merged_kind, t_merged = merged_estimate(members, latency_model)
    costs = {}
    for m in members:
        if m.worker_id == target_worker:
            continue
        costs[m.id] = migration_cost(m, spec) if spec is not None else 0.0

    target_partner = partners.get(target_worker)
    if target_partner is None:
        colocated_term = 0.0
    else:
        s_tp = model.slowdown(target_partner.kind, merged_kind, partner_alloc)
        colocated_term = s_tp * target_partner.duration
    others = [
        partners[m.worker_id].duration
        for m in members
        if m.worker_id != target_worker and partners.get(m.worker_id) is not None
    ]
    t_migr = t_merged + sum(costs.values()) + max([colocated_term, *others], default=0.0)

    delta = t_origin - t_migr
    return MigrationEstimate(
        t_origin=t_origin,
        t_migr=t_migr,
        delta=delta,
        member_costs=costs,
        recommend=delta > 0,
    )


def balance_batches(
    global_batch: int,
    n_workers: int,
    target_index: int,
    s_factor: float,
    latency_fn,
) -> BalancePlan:
    """Integer batch split equalizing slowed execution across workers.

    Non-target workers share one batch size; the realized latency ratio
    against the target is pushed as close to the slowdown factor as integer
    splits allow, breaking exact ties toward a larger target share.
    """
    if global_batch < n_workers:
        raise ValueError(f"global_batch {global_batch} < workers {n_workers}")
    if s_factor < 1.0:
        raise ValueError("s_factor must be >= 1")
    if not 0 <= target_index < n_workers:
        raise ValueError("target_index out of range")
    if n_workers == 1:
        return BalancePlan((global_batch,), target_index, s_factor)

    best: tuple[float, int] | None = None  # (error, -bs_t) minimized
    best_q = None
    for q in range(0, global_batch // (n_workers - 1) + 1):
        bs_t = global_batch - (n_workers - 1) * q
        if bs_t < 0:
            break
        t_q, t_t = latency_fn(q), latency_fn(bs_t)
        if t_t <= 0:
            continue
        err = abs(t_q / t_t - s_factor)
        key = (err, -bs_t)
        if best is None or key < best:
            best = key
            best_q = q
    if best_q is None:
        raise ValueError("no valid integer split")
    sizes = [best_q] * n_workers
    sizes[target_index] = global_batch - (n_workers - 1) * best_q
    return BalancePlan(tuple(sizes), target_index, s_factor)


# ---------------------------------------------------------------------------
# Execution engine (shared by every policy and by the simulator's replay)


@dataclass
class _Member:
    node: SubStage
    worker: int
    rate: float
    alloc: ResourceAllocation
    prefix_left: float
    work_left: float
    partner_id: str | None
    started: float

    def finish_estimate(self, now: float) -> float:
        return now + self.prefix_left + self.work_left * self.rate

    def consume(self, dt: float) -> None:
        if self.prefix_left > _EPS:
            used = min(self.prefix_left, dt)
            self.prefix_left -= used
            dt -= used
        if dt > _EPS and self.work_left > _EPS:
            self.work_left = max(0.0, self.work_left - dt / self.rate)


class ExecState:
    """Mutable execution state over an instance's combined sub-stage graphs."""

    def __init__(self, instance: Instance, record: bool = False):
        self.instance = instance
        self.record = record
        self.now = 0.0
        self.makespan = 0.0
        self.nodes: dict[str, SubStage] = {}
        self.preds: dict[str, set[str]] = {}
        self.succs: dict[str, set[str]] = {}
        for g in instance.graphs:
            for nid, node in g.nodes.items():
                self.nodes[nid] = node
                self.preds[nid] = set()
                self.succs[nid] = set()
            for src, dst in g.edges:
                self.preds[dst].add(src)
                self.succs[src].add(dst)
        self.completed: set[str] = set()
        self.completion_time: dict[str, float] = {}
        self.running: dict[str, _Member] = {}
        self.worker_members: dict[int, list[str]] = {w: [] for w in instance.workers()}
        self.toolwaits: dict[str, float] = {}
        self.merge_prefix: dict[str, float] = {}
        self.last_mem_grant: dict[tuple[int, str], float] = {}
        self.events: list[tuple[float, int, str, str, str]] = []
        self._auto_start_toolwaits()

    # -- bookkeeping ------------------------------------------------------

    def clone(self) -> "ExecState":
        other = ExecState.__new__(ExecState)
        other.instance = self.instance
        other.record = False
        other.now = self.now
        other.makespan = self.makespan
        other.nodes = dict(self.nodes)
        other.preds = {k: set(v) for k, v in self.preds.items()}
        other.succs = {k: set(v) for k, v in self.succs.items()}
        other.completed = set(self.completed)
        other.completion_time = dict(self.completion_time)
        other.running = {k: replace(m) for k, m in self.running.items()}
        other.worker_members = {w: list(v) for w, v in self.worker_members.items()}
        other.toolwaits = dict(self.toolwaits)
        other.merge_prefix = dict(self.merge_prefix)
        other.last_mem_grant = dict(self.last_mem_grant)
        other.events = []
        return other

    def _log(self, worker: int, kind: str, node_id: str, alloc: str = "-") -> None:
        if self.record:
            self.events.append((self.now, worker, kind, node_id, alloc))

    def done(self) -> bool:
        return len(self.completed) == len(self.nodes)

    def is_ready(self, nid: str) -> bool:
        return (
            nid not in self.completed
            and nid not in self.running
            and nid not in self.toolwaits
            and all(p in self.completed for p in self.preds[nid])
        )

    def ready_compute(self) -> list[SubStage]:
        out = [
            self.nodes[nid]
            for nid in self.nodes
            if self.nodes[nid].kind is not SubStageKind.TOOL_WAIT and self.is_ready(nid)
        ]
        out.sort(key=lambda n: (n.pipeline_id, n.id))
        return out

    def idle_workers(self) -> list[int]:
        return sorted(w for w, members in self.worker_members.items() if not members)

    def frontier(self) -> list[SubStage]:
        out = [self.nodes[nid] for nid in self.nodes if self.is_ready(nid)]
        out.sort(key=lambda n: (n.pipeline_id, n.id))
        return out

    def _auto_start_toolwaits(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for nid in sorted(self.nodes):
                node = self.nodes[nid]
                if node.kind is not SubStageKind.TOOL_WAIT or not self.is_ready(nid):
                    continue
                self._log(node.worker_id, "toolwait-start", nid)
                if node.duration <= _EPS:
                    self._complete(nid)
                else:
                    self.toolwaits[nid] = self.now + node.duration
                progressed = True

    def _complete(self, nid: str) -> None:
        self.completed.add(nid)
        self.completion_time[nid] = self.now
        self.makespan = max(self.makespan, self.now)
        node = self.nodes[nid]
        self._log(node.worker_id, "finish", nid)

    # -- actions ----------------------------------------------------------

    def _require_ready(self, nid: str) -> SubStage:
        if nid not in self.nodes:
            raise SchedulingError(f"unknown sub-stage {nid!r}")
        if not self.is_ready(nid):
            missing = sorted(p for p in self.preds[nid] if p not in self.completed)
            if missing:
                raise SchedulingError(
                    f"dependency violation: {nid} needs edge ({missing[0]}, {nid}) resolved"
                )
            raise SchedulingError(f"sub-stage {nid} is not ready (running or done)")
        node = self.nodes[nid]
        if node.kind is SubStageKind.TOOL_WAIT:
            raise SchedulingError(f"tool wait {nid} is not schedulable")
        return node

    def _start_member(
        self, node: SubStage, rate: float, alloc: ResourceAllocation, partner_id: str | None
    ) -> None:
        prefix = self.merge_prefix.pop(node.id, 0.0)
        if node.is_rollout and self.instance.realloc_penalty > 0:
            key = (node.worker_id, node.pipeline_id)
            last = self.last_mem_grant.get(key)
            if last is not None and abs(last - alloc.mem_share) > _EPS:
                prefix += self.instance.realloc_penalty
            self.last_mem_grant[key] = alloc.mem_share
        member = _Member(
            node=node,
            worker=node.worker_id,
            rate=rate,
            alloc=alloc,
            prefix_left=prefix,
            work_left=node.duration,
            partner_id=partner_id,
            started=self.now,
        )
        self.running[node.id] = member
        self.worker_members[node.worker_id].append(node.id)
        if prefix > _EPS:
            self._log(node.worker_id, "migration", node.id)
        self._log(node.worker_id, "start", node.id, f"{alloc.sm_share:.4f}/{alloc.mem_share:.4f}")

    def apply(self, action: ScheduleAction) -> None:
        if isinstance(action, Exclusive):
            node = self._require_ready(action.node_id)
            if self.worker_members[node.worker_id]:
                raise SchedulingError(f"worker {node.worker_id} is busy")
            rate = self.instance.model.slowdown(node.kind, None, action.alloc)
            self._start_member(node, rate, action.alloc, None)
        elif isinstance(action, Multiplex):
            a = self._require_ready(action.node_a)
            b = self._require_ready(action.node_b)
            if a.worker_id != b.worker_id:
                raise SchedulingError("multiplex members must share a worker")
            if a.pipeline_id == b.pipeline_id:
                raise SchedulingError("multiplex members must belong to different pipelines")
            if self.worker_members[a.worker_id]:
                raise SchedulingError(f"worker {a.worker_id} is busy")
            if not feasible(a.mem_fraction, b.mem_fraction, self.instance.headroom):
                raise SchedulingError(
                    f"memory infeasible: {a.id}({a.mem_fraction}) + {b.id}({b.mem_fraction})"
                )
            alloc_b = complement_allocation(action.alloc_a, self.instance.headroom)
            rate_a = self.instance.model.slowdown(a.kind, b.kind, action.alloc_a)
            rate_b = self.instance.model.slowdown(b.kind, a.kind, alloc_b)
            self._start_member(a, rate_a, action.alloc_a, b.id)
            self._start_member(b, rate_b, alloc_b, a.id)
        elif isinstance(action, Merge):
            self._apply_merge(action)
        else:  # pragma: no cover - action union is closed
            raise SchedulingError(f"unknown action {action!r}")
        self._auto_start_toolwaits()

    def _apply_merge(self, action: Merge) -> None:
        if len(action.member_ids) < 2:
            raise SchedulingError("merge needs at least two fragments")
        members = [self._require_ready(nid) for nid in action.member_ids]
        pid = members[0].pipeline_id
        if any(m.pipeline_id != pid for m in members):
            raise SchedulingError("merge fragments must belong to one pipeline")
        if any(m.kind not in MERGEABLE_KINDS for m in members):
            raise SchedulingError("only small/medium decode fragments can merge")
        workers = [m.worker_id for m in members]
        if len(set(workers)) != len(workers):
            raise SchedulingError("merge fragments must sit on distinct workers")
        if action.target_worker not in workers:
            raise SchedulingError("merge target must hold one of the fragments")

        latency = self.instance.latency_model_for(pid)
        kind, duration = merged_estimate(members, latency)
        spec = self.instance.spec_for(pid)
        prefix = 0.0
        for m in members:
            if m.worker_id == action.target_worker:
                continue
            if spec is not None:
                prefix += migration_cost(m, spec)
            else:
                prefix += self.instance.default_migration_cost

        merged_id = "merge[" + "+".join(action.member_ids) + f"]@w{action.target_worker}"
        merged = SubStage(
            id=merged_id,
            pipeline_id=pid,
            worker_id=action.target_worker,
            kind=kind,
            duration=duration,
            mem_fraction=max(
                DEFAULT_MEM_FRACTIONS[kind], max(m.mem_fraction for m in members)
            ),
            step_span=(
                min(m.step_span[0] for m in members),
                max(m.step_span[1] for m in members),
            ),
            sample_ids=frozenset().union(*(m.sample_ids for m in members)),
            remaining_decode_tokens=sum(m.remaining_decode_tokens for m in members),
            active_requests=sum(m.active_requests for m in members),
            context_tokens=sum(m.context_tokens for m in members),
            token_total=sum(m.token_total for m in members),
        )

        preds = set().union(*(self.preds[m.id] for m in members)) - set(action.member_ids)
        succs = set().union(*(self.succs[m.id] for m in members)) - set(action.member_ids)
        for m in members:
            for p in self.preds[m.id]:
                self.succs[p].discard(m.id)
            for s_ in self.succs[m.id]:
                self.preds[s_].discard(m.id)
            del self.nodes[m.id], self.preds[m.id], self.succs[m.id]
        self.nodes[merged_id] = merged
        self.preds[merged_id] = preds
        self.succs[merged_id] = succs
        for p in preds:
            self.succs[p].add(merged_id)
        for s_ in succs:
            self.preds[s_].add(merged_id)
        self.merge_prefix[merged_id] = prefix
        self._log(action.target_worker, "merge", merged_id)

    # -- time -------------------------------------------------------------

    def next_event_time(self) -> float | None:
        times = [m.finish_estimate(self.now) for m in self.running.values()]
        times.extend(self.toolwaits.values())
        return min(times) if times else None

    def has_events(self) -> bool:
        return bool(self.running) or bool(self.toolwaits)

    def advance(self, until: float | None = None) -> None:
        """Move to the next completion event, or exactly to `until` if sooner."""
        nxt = self.next_event_time()
        if nxt is None:
            if until is None:
                raise SchedulingError("no pending events to advance to")
            self.now = max(self.now, until)
            return
        target = nxt if until is None else min(nxt, until)
        dt = max(0.0, target - self.now)
        for member in self.running.values():
            member.consume(dt)
        self.now = target
        finished = sorted(
            nid
            for nid, m in self.running.items()
            if m.prefix_left <= _EPS and m.work_left * m.rate <= _EPS
        )
        for nid in finished:
            member = self.running.pop(nid)
            self.worker_members[member.worker].remove(nid)
            self._complete(nid)
            if member.partner_id and member.partner_id in self.running:
                partner = self.running[member.partner_id]
                if partner.rate != 1.0:
                    partner.rate = 1.0
                    partner.alloc = FULL_ALLOCATION
                    self._log(partner.worker, "rerate", partner.node.id, "1.0000/0.8000")
                partner.partner_id = None
        expired = sorted(nid for nid, t in self.toolwaits.items() if t <= self.now + _EPS)
        for nid in expired:
            del self.toolwaits[nid]
            self._complete(nid)
        if finished or expired:
            self._auto_start_toolwaits()

    def run_to_completion(self) -> None:
        while not self.done():
            if not self.has_events():
                stuck = sorted(set(self.nodes) - self.completed)
                raise SchedulingError(f"stuck with nothing running; pending: {stuck[:4]}")
            self.advance()


# ---------------------------------------------------------------------------
# Candidate enumeration


@dataclass(frozen=True)
class Candidate:
    serial: int
    priority: int  # 0 multiplex, 1 merge, 2 exclusive
    action: ScheduleAction


def enumerate_actions(state: ExecState) -> list[Candidate]:
    """All actions startable now: exclusives and feasible pairs on idle
    workers, plus merge sets over ready long-tail fragments."""
    instance = state.instance
    idle = set(state.idle_workers())
    ready = state.ready_compute()
    cands: list[Candidate] = []
    serial = 0

    by_worker: dict[int, list[SubStage]] = {}
    for node in ready:
        by_worker.setdefault(node.worker_id, []).append(node)

    for worker in sorted(by_worker):
        if worker not in idle:
            continue
        group = by_worker[worker]
        for a, b in itertools.combinations(group, 2):
            if a.pipeline_id == b.pipeline_id:
                continue
            if not feasible(a.mem_fraction, b.mem_fraction, instance.headroom):
                continue
            for first, second in ((a, b), (b, a)):
                for alpha in MUX_SM_GRID:
                    for memv in MEM_GRID:
                        if memv + second.mem_fraction > 1.0 - instance.headroom + _EPS:
                            continue
                        action = Multiplex(first.id, second.id, ResourceAllocation(alpha, memv))
                        cands.append(Candidate(serial, 0, action))
                        serial += 1

    by_pipeline: dict[str, list[SubStage]] = {}
    if instance.merge_enabled:
        for node in ready:
            if node.kind in MERGEABLE_KINDS:
                by_pipeline.setdefault(node.pipeline_id, []).append(node)
    for pid in sorted(by_pipeline):
        frags = by_pipeline[pid]
        if len(frags) < 2:
            continue
        for size in range(2, len(frags) + 1):
            for combo in itertools.combinations(frags, size):
                workers = [m.worker_id for m in combo]
                if len(set(workers)) != len(workers):
                    continue
                ids = tuple(sorted(m.id for m in combo))
                for target in sorted(workers):
                    cands.append(Candidate(serial, 1, Merge(ids, target)))
                    serial += 1

    for node in ready:
        if node.worker_id in idle:
            cands.append(Candidate(serial, 2, Exclusive(node.id)))
            serial += 1

    return cands


# ---------------------------------------------------------------------------
# Window cost


def _window_ids(state: ExecState, rounds: int) -> set[str]:
    """Sub-stages within `rounds` retire-rounds: ready and running work now,
    then successors level by level. Tool waits retire for free alongside
    the round that unlocks them, so they never consume look-ahead depth."""
    window: set[str] = set(state.running)
    window.update(state.toolwaits)
    window.update(n.id for n in state.frontier())
    covered = set(state.completed) | window
    depth = 1
    while depth < rounds:
        nxt = {
            nid
            for nid in state.nodes
            if nid not in covered and all(p in covered for p in state.preds[nid])
        }
        if not nxt:
            break
        window |= nxt
        covered |= nxt
        # Successors gated only by tool waits belong to this same round.
        while True:
            free = {
                nid
                for nid in state.nodes
                if nid not in covered
                and all(p in covered for p in state.preds[nid])
                and any(
                    p in nxt and state.nodes[p].kind is SubStageKind.TOOL_WAIT
                    for p in state.preds[nid]
                    if p in state.nodes
                )
            }
            if not free:
                break
            nxt |= free
            window |= free
            covered |= free
        depth += 1
    return window


def _suffix_lengths(state: ExecState) -> dict[str, float]:
    """Longest downstream chain (exclusive durations) per alive node."""
    suffix: dict[str, float] = {}
    order: list[str] = []
    indeg = {nid: len(state.preds[nid] & set(state.nodes)) for nid in state.nodes}
    stack = [nid for nid, d in indeg.items() if d == 0]
    while stack:
        nid = stack.pop()
        order.append(nid)
        for nxt in state.succs[nid]:
            if nxt in indeg:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    stack.append(nxt)
    for nid in reversed(order):
        node = state.nodes[nid]
        suffix[nid] = node.duration + max(
            (suffix[s] for s in state.succs[nid] if s in suffix), default=0.0
        )
    return suffix


def action_finish_estimate(state: ExecState, action: ScheduleAction) -> float:
    """When the chosen sub-stages themselves would complete."""
    est = state.clone()
    est.apply(action)
    if isinstance(action, Merge):
        merged = [nid for nid in est.nodes if nid not in state.nodes]
        watch = set(merged)
    else:
        watch = set(action.members())
    times = []
    for nid in watch:
        member = est.running.get(nid)
        if member is not None:
            times.append(member.finish_estimate(est.now))
        elif nid in est.nodes:
            times.append(est.now + est.merge_prefix.get(nid, 0.0) + est.nodes[nid].duration)
    return max(times, default=est.now)


def _rerated_pair_end(d_a: float, s_a: float, d_b: float, s_b: float) -> float:
    """Completion of a co-located pair where the survivor drops to its
    exclusive rate once the partner finishes."""
    nom_a, nom_b = d_a * s_a, d_b * s_b
    if abs(nom_a - nom_b) <= _EPS:
        return nom_a
    if nom_a < nom_b:
        return nom_a + (1.0 - nom_a / nom_b) * d_b
    return nom_b + (1.0 - nom_b / nom_a) * d_a


def _best_pair_action(
    a: SubStage, b: SubStage, model: SlowdownModel, headroom: float
) -> Multiplex | None:
    """Multiplex of the pair minimizing its re-rated completion over both
    orientations of the allocation grid, or None when it cannot fit."""
    if not feasible(a.mem_fraction, b.mem_fraction, headroom):
        return None
    best = None
    best_end = float("inf")
    for first, second in ((a, b), (b, a)):
        for alpha in MUX_SM_GRID:
            for memv in MEM_GRID:
                if memv + second.mem_fraction > 1.0 - headroom + _EPS:
                    continue
                alloc = ResourceAllocation(alpha, memv)
                comp = complement_allocation(alloc, headroom)
                end = _rerated_pair_end(
                    first.duration,
                    model.slowdown(first.kind, second.kind, alloc),
                    second.duration,
                    model.slowdown(second.kind, first.kind, comp),
                )
                if end < best_end - _EPS:
                    best = Multiplex(first.id, second.id, alloc)
                    best_end = end
    return best


def _complete_window(est: ExecState, window: set[str], order_key, pair: bool = False) -> float:
    guard = 0
    while any(nid not in est.completed for nid in window if nid in est.nodes):
        started = True
        while started:
            started = False
            busy = {w for w, members in est.worker_members.items() if members}
            ready = sorted(
                (n for n in est.ready_compute() if n.id in window), key=order_key
            )
            for node in ready:
                if node.worker_id in busy:
                    continue
                action: ScheduleAction | None = None
                if pair:
                    for other in ready:
                        if (
                            other.worker_id == node.worker_id
                            and other.pipeline_id != node.pipeline_id
                            and other.id not in est.completed
                            and other.id not in est.running
                        ):
                            action = _best_pair_action(
                                node, other, est.instance.model, est.instance.headroom
                            )
                            break
                if action is None:
                    action = Exclusive(node.id)
                est.apply(action)
                busy.add(node.worker_id)
                started = True
        if not est.has_events():
            break
        est.advance()
        guard += 1
        if guard > 10000:  # pragma: no cover - safety valve
            raise SchedulingError("window estimate did not converge")
    times = [est.completion_time.get(nid, est.now) for nid in window if nid in est.completion_time]
    return max(times, default=est.now)


# Deterministic completion rules tried by the window estimator; the
# tightest estimate wins. Pairing variants co-locate compatible ready
# nodes at an even split, which lets the cost see future co-location.
_COMPLETION_VARIANTS = (("suffix", False), ("suffix", True), ("name", False))


def window_cost(state: ExecState, action: ScheduleAction, rounds: int) -> float:
    """Completion-time estimate for the W-round window after taking `action`.

    The action's members run under its allocation; everything else in the
    window is completed exclusively. Two deterministic completion orders
    (longest remaining chain first, then plain lexicographic) are tried and
    the tighter estimate wins, which suppresses list-scheduling artifacts.
    """
    base = state.clone()
    base.apply(action)
    window = _window_ids(base, rounds)
    if not window:
        return base.now
    suffix = _suffix_lengths(base)

    by_suffix = lambda n: (-suffix.get(n.id, 0.0), n.pipeline_id, n.id)
    by_name = lambda n: (n.pipeline_id, n.id)
    cost = float("inf")
    for order_key, pair in _COMPLETION_VARIANTS:
        key = by_suffix if order_key == "suffix" else by_name
        cost = min(cost, _complete_window(base.clone(), window, key, pair=pair))
    return cost


def candidate_cost(state: ExecState, action: ScheduleAction, rounds: int) -> float:
    """Window cost of an action; merges are instantaneous, so they are
    scored through their best immediate follow-up on the merged node."""
    if not isinstance(action, Merge):
        return window_cost(state, action, rounds)
    post = state.clone()
    post.apply(action)
    merged_ids = set(post.nodes) - set(state.nodes)
    costs = [
        window_cost(post, cand.action, rounds)
        for cand in enumerate_actions(post)
        if not isinstance(cand.action, Merge)
        and merged_ids.intersection(cand.action.members())
    ]
    if not costs:
        return window_cost(state, action, rounds)
    return min(costs)


# ---------------------------------------------------------------------------
# Policies


def _drive(
    instance: Instance,
    chooser,
    policy: str,
    metadata: dict[str, str],
    prelude: tuple[ScheduleAction, ...] = (),
) -> Schedule:
    state = ExecState(instance, record=False)
    actions: list[TimedAction] = []
    for action in prelude:
        actions.append(TimedAction(state.now, action))
        state.apply(action)
    while not state.done():
        while True:
            cands = enumerate_actions(state)
            choice = chooser(state, cands) if cands else None
            if choice is None:
                break
            actions.append(TimedAction(state.now, choice.action))
            state.apply(choice.action)
        if state.done():
            break
        if not state.has_events():
            raise SchedulingError(f"{policy}: stalled with no running work")
        state.advance()
    return Schedule(actions=actions, policy=policy, metadata=metadata)


def lookahead_schedule(
    instance: Instance, window: int = 3, prelude: tuple[ScheduleAction, ...] = ()
) -> Schedule:
    """Pick, at each decision point, the action whose W-round window clears
    soonest; ties prefer the chosen sub-stages' own finish, then
    multiplexing, then the lowest serial number. `prelude` actions are
    forced in at time zero (used by migrate-vs-not experiments)."""
    if window < 1:
        raise ValueError("window must be >= 1")

    def chooser(state: ExecState, cands: list[Candidate]) -> Candidate | None:
        best = None
        best_key = None
        for cand in cands:
            cost = candidate_cost(state, cand.action, window)
            finish = action_finish_estimate(state, cand.action)
            key = (cost, finish, cand.priority, cand.serial)
            if best_key is None or key < best_key:
                best, best_key = cand, key
        return best

    return _drive(instance, chooser, "lookahead", {"window": str(window)}, prelude)


def greedy_schedule(instance: Instance, prelude: tuple[ScheduleAction, ...] = ()) -> Schedule:
    """Minimize the completion of the currently ready work only (window 1)."""
    schedule = lookahead_schedule(instance, window=1, prelude=prelude)
    return Schedule(actions=schedule.actions, policy="greedy", metadata={})


def serial_schedule(instance: Instance) -> Schedule:
    """Temporal multiplexing: pipelines run back-to-back, never co-located."""
    order = sorted(g.pipeline_id for g in instance.graphs)
    pipeline_nodes = {
        g.pipeline_id: set(g.nodes) for g in instance.graphs
    }

    def chooser(state: ExecState, cands: list[Candidate]) -> Candidate | None:
        active = None
        for pid in order:
            remaining = pipeline_nodes[pid] & set(state.nodes)
            if any(nid not in state.completed for nid in remaining):
                active = pid
                break
        if active is None:
            return None
        for cand in cands:
            if isinstance(cand.action, Exclusive):
                node = state.nodes[cand.action.node_id]
                if node.pipeline_id == active:
                    return cand
        return None

    return _drive(instance, chooser, "serial", {})


NAIVE_ALLOC = ResourceAllocation(0.5, 0.475)


def naive_spatial_schedule(instance: Instance) -> Schedule:
    """Static 50/50 spatial partition with no memory awareness.

    Every sub-stage is capped at half the SMs; overlapping stages that do
    not fit in memory are reported as a failure instead of being scheduled.
    """

    def chooser(state: ExecState, cands: list[Candidate]) -> Candidate | None:
        ready = state.ready_compute()
        by_worker: dict[int, list[SubStage]] = {}
        for node in ready:
            by_worker.setdefault(node.worker_id, []).append(node)
        for worker in state.idle_workers():
            group = by_worker.get(worker, [])
            pipelines = sorted({n.pipeline_id for n in group})
            if len(pipelines) >= 2:
                a = next(n for n in group if n.pipeline_id == pipelines[0])
                b = next(n for n in group if n.pipeline_id == pipelines[1])
                if not feasible(a.mem_fraction, b.mem_fraction, instance.headroom):
                    raise MemoryPressureError(
                        f"t={state.now:.6f}: co-locating {a.id} ({a.mem_fraction:.2f}) with "
                        f"{b.id} ({b.mem_fraction:.2f}) exceeds device memory"
                    )
                return Candidate(-1, 0, Multiplex(a.id, b.id, NAIVE_ALLOC))
            if group:
                return Candidate(-1, 2, Exclusive(group[0].id, NAIVE_ALLOC))
        return None

    return _drive(instance, chooser, "naive_spatial", {})


ROLLOUT_MUX_ALLOC = ResourceAllocation(0.5, 0.4)


def rollout_mux_schedule(instance: Instance) -> Schedule:
    """Spatial sharing for rollout only; reference/training stay serialized
    across pipelines (one pipeline's compute stage at a time)."""

    def compute_lock_holder(state: ExecState) -> str | None:
        for member in state.running.values():
            if member.node.kind in (SubStageKind.REFERENCE, SubStageKind.TRAINING):
                return member.node.pipeline_id
        return None

    def chooser(state: ExecState, cands: list[Candidate]) -> Candidate | None:
        ready = state.ready_compute()
        lock = compute_lock_holder(state)
        by_worker: dict[int, list[SubStage]] = {}
        for node in ready:
            by_worker.setdefault(node.worker_id, []).append(node)
        for worker in state.idle_workers():
            rollouts = [n for n in by_worker.get(worker, []) if n.is_rollout]
            pipelines = sorted({n.pipeline_id for n in rollouts})
            if len(pipelines) >= 2:
                a = next(n for n in rollouts if n.pipeline_id == pipelines[0])
                b = next(n for n in rollouts if n.pipeline_id == pipelines[1])
                if feasible(a.mem_fraction, b.mem_fraction, instance.headroom):
                    return Candidate(-1, 0, Multiplex(a.id, b.id, ROLLOUT_MUX_ALLOC))
            if rollouts:
                return Candidate(-1, 2, Exclusive(rollouts[0].id))
        for worker in state.idle_workers():
            others = [n for n in by_worker.get(worker, []) if not n.is_rollout]
            for node in others:
                if lock is None or lock == node.pipeline_id:
                    return Candidate(-1, 2, Exclusive(node.id))
        return None

    return _drive(instance, chooser, "rollout_mux", {})


# ---------------------------------------------------------------------------
# Brute-force oracle


def _dedupe_candidates(state: ExecState, cands: list[Candidate]) -> list[Candidate]:
    """Drop allocations that induce identical slowdown rates for a pair."""
    out: list[Candidate] = []
    seen: set[tuple] = set()
    model = state.instance.model
    for cand in cands:
        if isinstance(cand.action, Multiplex):
            a = state.nodes[cand.action.node_a]
            b = state.nodes[cand.action.node_b]
            alloc_b = complement_allocation(cand.action.alloc_a, state.instance.headroom)
            key = (
                "mux",
                a.id,
                b.id,
                round(model.slowdown(a.kind, b.kind, cand.action.alloc_a), 12),
                round(model.slowdown(b.kind, a.kind, alloc_b), 12),
            )
        elif isinstance(cand.action, Merge):
            key = ("merge", cand.action.member_ids, cand.action.target_worker)
        else:
            key = ("excl", cand.action.node_id)
        if key in seen:
            continue
        seen.add(key)
        out.append(cand)
    return out


def _unmergeable_suffix(state: ExecState) -> dict[str, float]:
    """Longest downstream chain counting only work merging cannot shrink."""
    order: list[str] = []
    indeg = {nid: len(state.preds[nid]) for nid in state.nodes}
    stack = sorted(nid for nid, d in indeg.items() if d == 0)
    while stack:
        nid = stack.pop()
        order.append(nid)
        for nxt in state.succs[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                stack.append(nxt)
    suffix: dict[str, float] = {}
    for nid in reversed(order):
        node = state.nodes[nid]
        own = 0.0 if node.kind in MERGEABLE_KINDS else node.duration
        suffix[nid] = own + max((suffix[s] for s in state.succs[nid]), default=0.0)
    return suffix


def _state_key(state: ExecState):
    running = tuple(
        sorted(
            (nid, m.worker, round(m.prefix_left, 9), round(m.work_left, 9), round(m.rate, 9))
            for nid, m in state.running.items()
        )
    )
    waits = tuple(sorted((nid, round(t - state.now, 9)) for nid, t in state.toolwaits.items()))
    pending = frozenset(
        nid for nid in state.nodes if nid not in state.completed and nid not in state.running
    )
    return (frozenset(state.completed), running, waits, pending)


def brute_force_schedule(instance: Instance, node_limit: int = 10) -> Schedule:
    """Exhaustive search over action sequences (including idling) for the
    provably minimal makespan under the engine semantics."""
    total = sum(len(g.nodes) for g in instance.graphs)
    if total > node_limit:
        raise OracleLimitError(
            f"instance has {total} sub-stages, above the limit of {node_limit}; "
            "use the look-ahead scheduler for larger instances"
        )

    best_make = float("inf")
    best_actions: list[TimedAction] = []
    for seed_policy in (lookahead_schedule, greedy_schedule, serial_schedule):
        try:
            sched = seed_policy(instance)
        except SchedulingError:
            continue
        state = ExecState(instance)
        for timed in sched.actions:
            state.advance(until=timed.start)
            while state.now < timed.start - _EPS:
                state.advance(until=timed.start)
            state.apply(timed.action)
        state.run_to_completion()
        if state.makespan < best_make:
            best_make = state.makespan
            best_actions = list(sched.actions)

    memo: dict = {}
    trail: list[TimedAction] = []

    def dfs(state: ExecState) -> None:
        nonlocal best_make, best_actions
        if state.done():
            if state.makespan < best_make - _EPS:
                best_make = state.makespan
                best_actions = list(trail)
            return
        suffix = _unmergeable_suffix(state)
        bound = state.now
        for nid in state.nodes:
            if nid in state.completed:
                continue
            member = state.running.get(nid)
            if member is not None:
                start = member.finish_estimate(state.now)
                tail = max((suffix[s] for s in state.succs[nid]), default=0.0)
            elif nid in state.toolwaits:
                start = state.toolwaits[nid]
                tail = max((suffix[s] for s in state.succs[nid]), default=0.0)
            else:
                start = state.now + suffix[nid]
                tail = 0.0
            bound = max(bound, start + tail)
        if bound >= best_make - _EPS:
            return
        key = _state_key(state)
        prev = memo.get(key)
        if prev is not None and prev <= state.now + _EPS:
            return
        memo[key] = state.now

        cands = _dedupe_candidates(state, enumerate_actions(state))
        for cand in cands:
            child = state.clone()
            try:
                child.apply(cand.action)
            except SchedulingError:
                continue
            trail.append(TimedAction(state.now, cand.action))
            dfs(child)
            trail.pop()
        if state.has_events():
            child = state.clone()
            child.advance()
            dfs(child)

    dfs(ExecState(instance))
    return Schedule(actions=best_actions, policy="oracle", metadata={"limit": str(node_limit)})


# ---------------------------------------------------------------------------
# Schedule file format

SCHEDULE_VERSION = 1


def save_schedule(schedule: Schedule, path: str) -> None:
    lines = [f"version={SCHEDULE_VERSION} policy={schedule.policy or '-'}"]
    for key, value in sorted(schedule.metadata.items()):
        lines.append(f"meta {key} {value}")
    for timed in schedule.actions:
        act = timed.action
        if isinstance(act, Exclusive):
            lines.append(
                f"{timed.start!r} exclusive {act.node_id} {act.alloc.sm_share!r} {act.alloc.mem_share!r}"
            )
        elif isinstance(act, Multiplex):
            lines.append(
                f"{timed.start!r} multiplex {act.node_a} {act.node_b} "
                f"{act.alloc_a.sm_share!r} {act.alloc_a.mem_share!r}"
            )
        else:
            lines.append(
                f"{timed.start!r} merge {','.join(act.member_ids)} {act.target_worker}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_schedule(path: str) -> Schedule:
    actions: list[TimedAction] = []
    policy = ""
    metadata: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line.startswith("version="):
                header = dict(p.split("=", 1) for p in line.split() if "=" in p)
                if header.get("version") != str(SCHEDULE_VERSION):
                    raise ValueError(f"{path}:1: unsupported schedule version")
                policy = header.get("policy", "-")
                policy = "" if policy == "-" else policy
                continue
            parts = line.split()
            if parts[0] == "meta":
                metadata[parts[1]] = " ".join(parts[2:])
                continue
            try:
                start = float(parts[0])
                kind = parts[1]
                if kind == "exclusive":
                    action: ScheduleAction = Exclusive(
                        parts[2], ResourceAllocation(float(parts[3]), float(parts[4]))
                    )
                elif kind == "multiplex":
                    action = Multiplex(
                        parts[2], parts[3], ResourceAllocation(float(parts[4]), float(parts[5]))
                    )
                elif kind == "merge":
                    action = Merge(tuple(parts[2].split(",")), int(parts[3]))
                else:
                    raise ValueError(f"unknown action kind {kind!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed action line: {exc}") from None
            actions.append(TimedAction(start, action))
    return Schedule(actions=actions, policy=policy, metadata=metadata)
