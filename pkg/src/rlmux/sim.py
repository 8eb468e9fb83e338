"""Deterministic replay of schedules into timelines and metrics.

`simulate` re-executes an action log under the engine semantics, validating
dependencies and worker occupancy as it goes, and reduces the event stream
to the headline metrics: makespan, per-pipeline step latency, aggregate
token throughput, and a per-worker utilization proxy that time-weights the
SM share held by compute-bound sub-stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import SubStageKind
from .scheduler import (
    ExecState,
    Instance,
    Schedule,
    SchedulingError,
    TimedAction,
    _EPS,
)

REPORT_VERSION = 1

# Kinds whose SM share counts toward the utilization proxy.
COMPUTE_BOUND_KINDS = frozenset(
    {
        SubStageKind.TRAINING,
        SubStageKind.REFERENCE,
        SubStageKind.PREFILL_BURST,
        SubStageKind.DECODE_LARGE,
    }
)


class DependencyViolationError(ValueError):
    """Raised when a schedule starts work before its predecessors finish."""


@dataclass(frozen=True)
class TimelineEvent:
    time: float
    worker_id: int
    kind: str  # start / finish / rerate / merge / migration / toolwait-start
    node_id: str
    alloc: str = "-"


@dataclass
class SimulationReport:
    makespan: float
    per_pipeline_latency: dict[str, float]
    per_pipeline_avg_step_latency: dict[str, float]
    per_pipeline_max_step_latency: dict[str, float]
    per_pipeline_tokens: dict[str, int]
    aggregate_throughput: float
    utilization_avg: dict[int, float]
    utilization_series: dict[int, list[tuple[float, float, float]]]
    events: list[TimelineEvent]
    policy: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def total_tokens(self) -> int:
        return sum(self.per_pipeline_tokens.values())


def _utilization(
    events: list[TimelineEvent], makespan: float, workers: list[int], node_kinds, node_alloc
) -> tuple[dict[int, float], dict[int, list[tuple[float, float, float]]]]:
    """Fold start/finish/rerate events into per-worker share segments."""
    series: dict[int, list[tuple[float, float, float]]] = {w: [] for w in workers}
    share: dict[int, float] = {w: 0.0 for w in workers}
    node_share: dict[str, float] = {}
    seg_start: dict[int, float] = {w: 0.0 for w in workers}

    def close(worker: int, t: float) -> None:
        if t > seg_start[worker] + _EPS:
            series[worker].append((seg_start[worker], t, min(1.0, share[worker])))
        seg_start[worker] = t

    def parse_alloc(text: str) -> float:
        if text == "-":
            return 0.0
        return float(text.split("/")[0])

    for ev in events:
        if ev.kind not in ("start", "finish", "rerate"):
            continue
        counts = node_kinds.get(ev.node_id) in COMPUTE_BOUND_KINDS
        if ev.kind == "start":
            sm = parse_alloc(ev.alloc) if counts else 0.0
            node_share[ev.node_id] = sm
            if sm:
                close(ev.worker_id, ev.time)
                share[ev.worker_id] += sm
        elif ev.kind == "rerate":
            old = node_share.get(ev.node_id, 0.0)
            new = parse_alloc(ev.alloc) if counts else 0.0
            if counts:
                close(ev.worker_id, ev.time)
                share[ev.worker_id] += new - old
                node_share[ev.node_id] = new
        else:  # finish
            sm = node_share.pop(ev.node_id, 0.0)
            if sm:
                close(ev.worker_id, ev.time)
                share[ev.worker_id] -= sm
    averages = {}
    for worker in workers:
        close(worker, makespan)
        busy = sum((t1 - t0) * s for t0, t1, s in series[worker])
        averages[worker] = busy / makespan if makespan > 0 else 0.0
    return averages, series


def simulate(schedule: Schedule, instance: Instance) -> SimulationReport:
    """Replay an action log and produce the metrics report."""
    state = ExecState(instance, record=True)
    for timed in schedule.actions:
        if timed.start < state.now - 1e-6:
            raise DependencyViolationError(
                f"action at t={timed.start} recorded after simulated time {state.now}"
            )
        while state.now < timed.start - _EPS:
            if not state.has_events():
                state.advance(until=timed.start)
                break
            state.advance(until=timed.start)
        try:
            state.apply(timed.action)
        except SchedulingError as exc:
            raise DependencyViolationError(str(exc)) from None
    while not state.done():
        if not state.has_events():
            pending = sorted(set(state.nodes) - state.completed)
            raise DependencyViolationError(
                f"schedule leaves work unscheduled: {pending[:4]}"
            )
        state.advance()

    events = [TimelineEvent(*ev) for ev in state.events]
    node_kinds = {nid: n.kind for nid, n in state.nodes.items()}

    pipelines = sorted(g.pipeline_id for g in instance.graphs)
    latency = {pid: 0.0 for pid in pipelines}
    tokens = {pid: 0 for pid in pipelines}
    for nid, t in state.completion_time.items():
        node = state.nodes[nid]
        latency[node.pipeline_id] = max(latency[node.pipeline_id], t)
        tokens[node.pipeline_id] += node.token_total

    makespan = state.makespan
    total = sum(tokens.values())
    throughput = total / makespan if makespan > 0 else 0.0
    util_avg, util_series = _utilization(
        events, makespan, instance.workers(), node_kinds, None
    )

    return SimulationReport(
        makespan=makespan,
        per_pipeline_latency=latency,
        per_pipeline_avg_step_latency=dict(latency),
        per_pipeline_max_step_latency=dict(latency),
        per_pipeline_tokens=tokens,
        aggregate_throughput=throughput,
        utilization_avg=util_avg,
        utilization_series=util_series,
        events=events,
        policy=schedule.policy,
        metadata=dict(schedule.metadata),
    )


def run_policy(instance: Instance, policy: str, window: int = 3, node_limit: int = 10) -> SimulationReport:
    """Build a schedule with the named policy and simulate it."""
    from . import scheduler as sched

    builders = {
        "serial": sched.serial_schedule,
        "naive_spatial": sched.naive_spatial_schedule,
        "rollout_mux": sched.rollout_mux_schedule,
        "greedy": sched.greedy_schedule,
        "lookahead": lambda inst: sched.lookahead_schedule(inst, window=window),
        "oracle": lambda inst: sched.brute_force_schedule(inst, node_limit=node_limit),
    }
    if policy not in builders:
        raise ValueError(f"unknown policy {policy!r}; expected one of {sorted(builders)}")
    return simulate(builders[policy](instance), instance)


# ---------------------------------------------------------------------------
# Comparison and report files


def compare(reports: dict[str, SimulationReport], baseline: str) -> str:
    """CSV comparing policies against a named baseline report."""
    if baseline not in reports:
        raise ValueError(f"baseline {baseline!r} missing from reports")
    base = reports[baseline]
    pipelines = sorted(base.per_pipeline_latency)
    for name, rep in reports.items():
        if sorted(rep.per_pipeline_latency) != pipelines:
            raise ValueError(f"report {name!r} covers different pipelines than the baseline")
        if rep.total_tokens != base.total_tokens:
            raise ValueError(
                f"report {name!r} processed {rep.total_tokens} tokens, "
                f"baseline {base.total_tokens}; not the same instance"
            )
    header = ["policy", "makespan_s", "speedup_vs_" + baseline, "throughput_tok_s", "throughput_ratio"]
    for pid in pipelines:
        header.append(f"latency_{pid}_s")
        header.append(f"latency_ratio_{pid}")
    lines = [",".join(header)]
    for name in sorted(reports):
        rep = reports[name]
        row = [
            name,
            f"{rep.makespan:.6f}",
            f"{base.makespan / rep.makespan:.6f}" if rep.makespan > 0 else "inf",
            f"{rep.aggregate_throughput:.6f}",
            f"{rep.aggregate_throughput / base.aggregate_throughput:.6f}"
            if base.aggregate_throughput > 0
            else "inf",
        ]
        for pid in pipelines:
            row.append(f"{rep.per_pipeline_latency[pid]:.6f}")
            ratio = (
                rep.per_pipeline_latency[pid] / base.per_pipeline_latency[pid]
                if base.per_pipeline_latency[pid] > 0
                else float("inf")
            )
            row.append(f"{ratio:.6f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_csv(report: SimulationReport) -> str:
    lines = [f"schema_version,{REPORT_VERSION}", "metric,scope,value"]
    lines.append(f"policy,-,{report.policy or '-'}")
    for key in sorted(report.metadata):
        lines.append(f"meta_{key},-,{report.metadata[key]}")
    lines.append(f"makespan_s,-,{report.makespan:.6f}")
    lines.append(f"aggregate_throughput_tok_s,-,{report.aggregate_throughput:.6f}")
    for pid in sorted(report.per_pipeline_latency):
        lines.append(f"step_latency_s,{pid},{report.per_pipeline_latency[pid]:.6f}")
        lines.append(f"avg_step_latency_s,{pid},{report.per_pipeline_avg_step_latency[pid]:.6f}")
        lines.append(f"max_step_latency_s,{pid},{report.per_pipeline_max_step_latency[pid]:.6f}")
        lines.append(f"tokens,{pid},{report.per_pipeline_tokens[pid]}")
    for worker in sorted(report.utilization_avg):
        lines.append(f"utilization,w{worker},{report.utilization_avg[worker]:.6f}")
    return "\n".join(lines) + "\n"


def write_report_csv(report: SimulationReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_csv(report))


def write_event_log(report: SimulationReport, path: str) -> None:
    lines = [f"version={REPORT_VERSION} events={len(report.events)}"]
    for ev in report.events:
        lines.append(f"{ev.time:.6f} w{ev.worker_id} {ev.kind} {ev.node_id} {ev.alloc}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
