"""Sub-stage graph construction and dependency queries.

A pipeline's per-worker trace is cut into sub-stages: maximal spans of
forward steps whose token-count bucket is stable. A bucket change only
opens a new sub-stage once the new bucket has persisted for a stability
window of consecutive steps, so short noise bursts never fragment a span.
Reference and training stages are appended per worker with cross-worker
barrier edges, which is what lets the scheduler see inter-worker slack.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from .workload import (
    REFERENCE_INDEX,
    TRAINING_INDEX,
    PipelineSpec,
    ProfileTrace,
    TraceParseError,
    expand_with_enrichment,
    token_count,
)

DEFAULT_BUCKET_BOUNDS = (0, 128, 1024)
DEFAULT_STABILITY_WINDOW = 10


class GraphCycleError(ValueError):
    """Raised when a dependency cycle is detected."""


@dataclass(frozen=True)
class Bucket:
    """Half-open token-count interval; the last bucket is unbounded."""

    index: int
    lower: int
    upper: int | None

    def contains(self, tokens: int) -> bool:
        return tokens >= self.lower and (self.upper is None or tokens < self.upper)


def make_buckets(bounds: tuple[int, ...] = DEFAULT_BUCKET_BOUNDS) -> tuple[Bucket, ...]:
    if not bounds or bounds[0] != 0 or list(bounds) != sorted(set(bounds)):
        raise ValueError(f"bucket bounds must be strictly increasing from 0, got {bounds}")
    buckets = []
    for i, lo in enumerate(bounds):
        hi = bounds[i + 1] if i + 1 < len(bounds) else None
        buckets.append(Bucket(index=i, lower=lo, upper=hi))
    return tuple(buckets)


DEFAULT_BUCKETS = make_buckets()


def bucketize(tokens: int, buckets: tuple[Bucket, ...] = DEFAULT_BUCKETS) -> int:
    """Map a token count to its unique bucket index."""
    if tokens < 0:
        raise ValueError(f"token count must be >= 0, got {tokens}")
    for bucket in buckets:
        if bucket.contains(tokens):
            return bucket.index
    return buckets[-1].index


class SubStageKind(enum.Enum):
    PREFILL_BURST = "PrefillBurst"
    DECODE_LARGE = "DecodeLarge"
    DECODE_MEDIUM = "DecodeMedium"
    DECODE_SMALL = "DecodeSmall"
    REFERENCE = "Reference"
    TRAINING = "Training"
    TOOL_WAIT = "ToolWait"


ROLLOUT_KINDS = frozenset(
    {
        SubStageKind.PREFILL_BURST,
        SubStageKind.DECODE_LARGE,
        SubStageKind.DECODE_MEDIUM,
        SubStageKind.DECODE_SMALL,
    }
)

# Rollout fragments eligible for long-tail merging across workers.
MERGEABLE_KINDS = frozenset({SubStageKind.DECODE_SMALL, SubStageKind.DECODE_MEDIUM})

DECODE_KIND_BY_BUCKET = {
    0: SubStageKind.DECODE_SMALL,
    1: SubStageKind.DECODE_MEDIUM,
    2: SubStageKind.DECODE_LARGE,
}

# Device-memory share each kind needs at its default allocation.
DEFAULT_MEM_FRACTIONS = {
    SubStageKind.PREFILL_BURST: 0.5,
    SubStageKind.DECODE_LARGE: 0.55,
    SubStageKind.DECODE_MEDIUM: 0.4,
    SubStageKind.DECODE_SMALL: 0.3,
    SubStageKind.REFERENCE: 0.5,
    SubStageKind.TRAINING: 0.6,
    SubStageKind.TOOL_WAIT: 0.05,
}


@dataclass(frozen=True)
class SubStage:
    """A schedulable span of uniform work on one worker."""

    id: str
    pipeline_id: str
    worker_id: int
    kind: SubStageKind
    duration: float
    mem_fraction: float
    step_span: tuple[int, int] = (0, 0)
    sample_ids: frozenset[int] = frozenset()
    remaining_decode_tokens: int = 0
    active_requests: int = 0
    context_tokens: int = 0
    token_total: int = 0

    def __post_init__(self) -> None:
        if self.kind is SubStageKind.TOOL_WAIT:
            if self.duration < 0:
                raise ValueError(f"{self.id}: tool wait duration must be >= 0")
        elif self.duration <= 0:
            raise ValueError(f"{self.id}: duration must be positive")
        if not 0 < self.mem_fraction <= 1:
            raise ValueError(f"{self.id}: mem_fraction must be in (0, 1]")

    @property
    def is_rollout(self) -> bool:
        return self.kind in ROLLOUT_KINDS


@dataclass
class SubStageGraph:
    """DAG of sub-stages for one pipeline, one replica chain per DP worker."""

    pipeline_id: str
    nodes: dict[str, SubStage]
    edges: set[tuple[str, str]]
    spec: PipelineSpec | None = None
    latency_model: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for src, dst in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge ({src}, {dst}) references unknown node")
        self.topo_order()  # raises on cycles

    def predecessors(self, node_id: str) -> list[str]:
        return sorted(src for src, dst in self.edges if dst == node_id)

    def successors(self, node_id: str) -> list[str]:
        return sorted(dst for src, dst in self.edges if src == node_id)

    def topo_order(self) -> list[str]:
        indeg = {nid: 0 for nid in self.nodes}
        for _, dst in self.edges:
            indeg[dst] += 1
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        succs: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for src, dst in self.edges:
            succs[src].append(dst)
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            added = False
            for nxt in succs[nid]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
                    added = True
            if added:
                ready.sort()
        if len(order) != len(self.nodes):
            raise GraphCycleError(f"pipeline {self.pipeline_id}: dependency cycle detected")
        return order

    @property
    def total_tokens(self) -> int:
        return sum(n.token_total for n in self.nodes.values())

    def worker_ids(self) -> list[int]:
        return sorted({n.worker_id for n in self.nodes.values()})


# ---------------------------------------------------------------------------
# Trace segmentation


@dataclass(frozen=True)
class _Segment:
    start: int  # indexes into the record list
    end: int    # inclusive
    bucket: int | None  # None marks a tool-wait segment
    stable_bucket: int | None


def _segment_records(records, buckets, window: int) -> list[_Segment]:
    """Split a record list into tool-wait runs and bucket-stable spans."""
    segments: list[_Segment] = []
    i = 0
    n = len(records)
    while i < n:
        if records[i].is_tool_wait:
            j = i
            while j + 1 < n and records[j + 1].is_tool_wait:
                j += 1
            segments.append(_Segment(i, j, None, None))
            i = j + 1
            continue
        j = i
        while j + 1 < n and not records[j + 1].is_tool_wait:
            j += 1
        segments.extend(_segment_span(records, buckets, window, i, j))
        i = j + 1
    return segments


def _segment_span(records, buckets, window: int, lo: int, hi: int) -> list[_Segment]:
    """Apply the stability rule to one contiguous non-idle span."""
    codes = [bucketize(token_count(records[k]), buckets) for k in range(lo, hi + 1)]
    n = len(codes)

    # The first sub-stage takes the bucket that first stays stable for a
    # full window, so leading noise cannot spawn a spurious span.
    current: int | None = None
    for k in range(n - window + 1):
        run = codes[k : k + window]
        if len(set(run)) == 1:
            current = run[0]
            break
    if current is None:
        # Too short or too noisy to stabilize: one span, majority bucket.
        majority = max(set(codes), key=lambda b: (codes.count(b), -b))
        return [_Segment(lo, hi, majority, majority)]

    segments = []
    seg_start = 0
    cand_bucket: int | None = None
    cand_start = 0
    cand_len = 0
    for k, code in enumerate(codes):
        if code == current:
            cand_bucket = None
            cand_len = 0
            continue
        if cand_bucket == code:
            cand_len += 1
        else:
            cand_bucket = code
            cand_start = k
            cand_len = 1
        if cand_len >= window:
            # Transition confirmed; the boundary sits at the first stable step.
            if cand_start > seg_start:
                segments.append(_Segment(lo + seg_start, lo + cand_start - 1, current, current))
            seg_start = cand_start
            current = code
            cand_bucket = None
            cand_len = 0
    segments.append(_Segment(lo + seg_start, hi, current, current))
    return segments


def _rollout_kind(records, seg: _Segment, buckets) -> SubStageKind:
    if seg.bucket is None:
        return SubStageKind.TOOL_WAIT
    if seg.stable_bucket == len(buckets) - 1 and len(buckets) >= 3:
        prefill = sum(r.prefill_tokens_this_step for r in records[seg.start : seg.end + 1])
        total = sum(token_count(r) for r in records[seg.start : seg.end + 1])
        if total > 0 and prefill * 2 >= total:
            return SubStageKind.PREFILL_BURST
        return SubStageKind.DECODE_LARGE
    return DECODE_KIND_BY_BUCKET.get(seg.stable_bucket, SubStageKind.DECODE_LARGE)


def construct_graph(
    traces: list[ProfileTrace],
    stability_window: int = DEFAULT_STABILITY_WINDOW,
    buckets: tuple[Bucket, ...] = DEFAULT_BUCKETS,
    *,
    spec: PipelineSpec | None = None,
    assignment: dict[int, int] | None = None,
    mem_fractions: dict[SubStageKind, float] | None = None,
) -> SubStageGraph:
    """Build the sub-stage graph for one pipeline from its per-worker traces.

    When the pipeline spec (and optionally the sample assignment) is given,
    rollout sub-stages are enriched with the still-active sample sets and
    their context totals, which the migration estimator consumes.
    """
    if not traces:
        raise ValueError("need at least one trace")
    if stability_window < 1:
        raise ValueError("stability_window must be >= 1")
    pipeline_id = traces[0].pipeline_id
    if any(t.pipeline_id != pipeline_id for t in traces):
        raise ValueError("all traces must belong to one pipeline")
    mem = dict(DEFAULT_MEM_FRACTIONS)
    if mem_fractions:
        mem.update(mem_fractions)

    replays = None
    if spec is not None:
        _, replays = expand_with_enrichment(
            spec, assignment, traces[0].per_step_latency_model
        )

    stages = spec.stages if spec is not None else ("rollout", "reference", "training")
    nodes: dict[str, SubStage] = {}
    edges: set[tuple[str, str]] = set()
    last_rollout: dict[int, str] = {}

    for trace in sorted(traces, key=lambda t: t.worker_id):
        latency = trace.per_step_latency_model
        segments = _segment_records(trace.records, buckets, stability_window)
        prev: str | None = None
        for seq, seg in enumerate(segments):
            span = trace.records[seg.start : seg.end + 1]
            kind = _rollout_kind(trace.records, seg, buckets)
            steps = len(span)
            if kind is SubStageKind.TOOL_WAIT:
                duration = steps * latency[0]
            else:
                duration = steps * latency[seg.stable_bucket]
            decode = sum(r.active_decode_requests for r in span)
            sid = f"{pipeline_id}/w{trace.worker_id}/r{seq:03d}"
            sample_ids: frozenset[int] = frozenset()
            context = 0
            if replays is not None and kind is not SubStageKind.TOOL_WAIT:
                replay = replays.get(trace.worker_id)
                if replay is not None and seg.start < len(replay.step_active_ids):
                    sample_ids = frozenset(replay.step_active_ids[seg.start])
                    context = replay.step_context_total[seg.start]
            nodes[sid] = SubStage(
                id=sid,
                pipeline_id=pipeline_id,
                worker_id=trace.worker_id,
                kind=kind,
                duration=duration,
                mem_fraction=mem[kind],
                step_span=(span[0].step_index, span[-1].step_index),
                sample_ids=sample_ids,
                remaining_decode_tokens=decode,
                active_requests=span[0].active_decode_requests,
                context_tokens=context,
                token_total=sum(token_count(r) for r in span),
            )
            if prev is not None:
                edges.add((prev, sid))
            prev = sid
        if prev is not None:
            last_rollout[trace.worker_id] = prev

    latency = traces[0].per_step_latency_model
    barrier_tail = dict(last_rollout)
    if "reference" in stages:
        if REFERENCE_INDEX not in latency:
            raise TraceParseError("latency model has no entry for the reference stage")
        for worker, tail in sorted(barrier_tail.items()):
            sid = f"{pipeline_id}/w{worker}/ref"
            nodes[sid] = SubStage(
                id=sid,
                pipeline_id=pipeline_id,
                worker_id=worker,
                kind=SubStageKind.REFERENCE,
                duration=latency[REFERENCE_INDEX],
                mem_fraction=mem[SubStageKind.REFERENCE],
            )
            edges.add((tail, sid))
        barrier_tail = {w: f"{pipeline_id}/w{w}/ref" for w in barrier_tail}
    if "training" in stages:
        if TRAINING_INDEX not in latency:
            raise TraceParseError("latency model has no entry for the training stage")
        for worker in sorted(barrier_tail):
            sid = f"{pipeline_id}/w{worker}/train"
            nodes[sid] = SubStage(
                id=sid,
                pipeline_id=pipeline_id,
                worker_id=worker,
                kind=SubStageKind.TRAINING,
                duration=latency[TRAINING_INDEX],
                mem_fraction=mem[SubStageKind.TRAINING],
            )
            # Gradient sync: training on any worker waits for every replica.
            for tail in barrier_tail.values():
                edges.add((tail, sid))

    return SubStageGraph(
        pipeline_id=pipeline_id,
        nodes=nodes,
        edges=edges,
        spec=spec,
        latency_model=dict(latency),
    )


# ---------------------------------------------------------------------------
# Queries


def _as_graphs(graphs) -> list[SubStageGraph]:
    if isinstance(graphs, SubStageGraph):
        return [graphs]
    return list(graphs)


def frontier_of(graphs, completed: set[str]) -> list[SubStage]:
    """Nodes whose predecessors are all completed and which are not done."""
    out = []
    for g in _as_graphs(graphs):
        for nid in sorted(g.nodes):
            if nid in completed:
                continue
            if all(p in completed for p in g.predecessors(nid)):
                out.append(g.nodes[nid])
    return out


def critical_path_length(graphs, durations: dict[str, float] | None = None) -> float:
    """Longest dependency path, summing node durations (makespan lower bound)."""
    graphs = _as_graphs(graphs)
    best = 0.0
    for g in graphs:
        dist: dict[str, float] = {}
        for nid in g.topo_order():
            d = durations[nid] if durations is not None else g.nodes[nid].duration
            if d < 0:
                raise ValueError(f"negative duration for {nid}")
            preds = g.predecessors(nid)
            dist[nid] = d + max((dist[p] for p in preds), default=0.0)
        if dist:
            best = max(best, max(dist.values()))
    return best


# ---------------------------------------------------------------------------
# Graph dump format

GRAPH_VERSION = 1


def save_graph(graph: SubStageGraph, path: str) -> None:
    lines = [f"version={GRAPH_VERSION} pipeline={graph.pipeline_id}"]
    for bucket, seconds in sorted(graph.latency_model.items()):
        lines.append(f"latency {bucket} {seconds!r}")
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        lines.append(
            "node "
            + " ".join(
                str(v)
                for v in (
                    n.id,
                    n.worker_id,
                    n.kind.value,
                    repr(n.duration),
                    repr(n.mem_fraction),
                    n.step_span[0],
                    n.step_span[1],
                    n.remaining_decode_tokens,
                    n.active_requests,
                    n.context_tokens,
                    n.token_total,
                    ",".join(str(s) for s in sorted(n.sample_ids)) or "-",
                )
            )
        )
    for src, dst in sorted(graph.edges):
        lines.append(f"edge {src} {dst}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph(path: str) -> SubStageGraph:
    nodes: dict[str, SubStage] = {}
    edges: set[tuple[str, str]] = set()
    latency: dict[int, float] = {}
    pipeline_id = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1:
                header = dict(p.split("=", 1) for p in line.split() if "=" in p)
                if header.get("version") != str(GRAPH_VERSION):
                    raise TraceParseError(f"{path}:1: unsupported graph version")
                pipeline_id = header.get("pipeline")
                continue
            tag, _, rest = line.partition(" ")
            parts = rest.split()
            try:
                if tag == "latency":
                    latency[int(parts[0])] = float(parts[1])
                elif tag == "node":
                    samples = frozenset(
                        int(s) for s in parts[11].split(",") if s and s != "-"
                    )
                    nodes[parts[0]] = SubStage(
                        id=parts[0],
                        pipeline_id=pipeline_id or "",
                        worker_id=int(parts[1]),
                        kind=SubStageKind(parts[2]),
                        duration=float(parts[3]),
                        mem_fraction=float(parts[4]),
                        step_span=(int(parts[5]), int(parts[6])),
                        remaining_decode_tokens=int(parts[7]),
                        active_requests=int(parts[8]),
                        context_tokens=int(parts[9]),
                        token_total=int(parts[10]),
                        sample_ids=samples,
                    )
                elif tag == "edge":
                    edges.add((parts[0], parts[1]))
                else:
                    raise TraceParseError(f"{path}:{lineno}: unknown line tag {tag!r}")
            except (IndexError, ValueError) as exc:
                if isinstance(exc, TraceParseError):
                    raise
                raise TraceParseError(f"{path}:{lineno}: malformed {tag} line: {exc}") from None
    if pipeline_id is None:
        raise TraceParseError(f"{path}: missing header")
    return SubStageGraph(pipeline_id=pipeline_id, nodes=nodes, edges=edges, latency_model=latency)
