"""Shipped instances: the look-ahead trap, random small instances for
oracle comparisons, and migration cases for the gain estimator."""

from __future__ import annotations

import numpy as np

from .graph import DEFAULT_MEM_FRACTIONS, SubStage, SubStageGraph, SubStageKind
from .scheduler import Instance
from .slowdown import (
    MEM_GRID,
    SM_GRID,
    Key,
    SlowdownModel,
    SlowdownTable,
    default_model,
)
from .workload import DEFAULT_LATENCY, PipelineSpec, SampleSpec, TurnSpec


def flat_table(
    pair_factors: dict[tuple[SubStageKind, SubStageKind], float],
    isolation_factors: dict[SubStageKind, float] | None = None,
) -> SlowdownModel:
    """Constant-per-pair table for hand-checked arithmetic in tests.

    Unlisted pairs and all isolation rows default to 1.0 (except the listed
    isolation overrides, which apply below full allocation only).
    """
    entries: dict[Key, float] = {}
    partners: list[SubStageKind | None] = [None, *SubStageKind]
    for kind in SubStageKind:
        for partner in partners:
            for alpha in SM_GRID:
                for memv in MEM_GRID:
                    if kind is SubStageKind.TOOL_WAIT:
                        factor = 1.0
                    elif partner is None:
                        factor = 1.0
                        if isolation_factors and kind in isolation_factors:
                            if alpha < SM_GRID[-1] or memv < MEM_GRID[-1]:
                                factor = isolation_factors[kind]
                    else:
                        factor = pair_factors.get((kind, partner), 1.0)
                    entries[(kind, partner, alpha, memv)] = factor
    table = SlowdownTable(entries=entries)
    table.validate()
    return SlowdownModel(table)


def _node(
    pid: str,
    worker: int,
    seq: int,
    kind: SubStageKind,
    duration: float,
    *,
    remaining: int = 0,
    active: int = 0,
    context: int = 0,
    tokens: int = 0,
) -> SubStage:
    return SubStage(
        id=f"{pid}/w{worker}/n{seq:02d}",
        pipeline_id=pid,
        worker_id=worker,
        kind=kind,
        duration=duration,
        mem_fraction=DEFAULT_MEM_FRACTIONS[kind],
        remaining_decode_tokens=remaining,
        active_requests=active,
        context_tokens=context,
        token_total=tokens if tokens else remaining,
    )


def chain_graph(pid: str, chains: dict[int, list[SubStage]], barrier: bool = True) -> SubStageGraph:
    """Per-worker chains; chain-terminating training nodes get cross-worker
    barrier edges (gradient sync waits for every replica)."""
    nodes: dict[str, SubStage] = {}
    edges: set[tuple[str, str]] = set()
    barriers: list[SubStage] = []
    for worker, chain in sorted(chains.items()):
        prev = None
        for node in chain:
            nodes[node.id] = node
            if prev is not None:
                edges.add((prev, node.id))
            prev = node.id
        if barrier and chain and chain[-1].kind is SubStageKind.TRAINING:
            barriers.append(chain[-1])
    if barriers and len(chains) > 1:
        for train in barriers:
            for worker, chain in sorted(chains.items()):
                if worker == train.worker_id or not chain:
                    continue
                before = chain[-2] if chain[-1] in barriers and len(chain) > 1 else chain[-1]
                if before.id != train.id and before not in barriers:
                    edges.add((before.id, train.id))
    return SubStageGraph(
        pipeline_id=pid, nodes=nodes, edges=edges, latency_model=dict(DEFAULT_LATENCY)
    )


def lookahead_trap_instance() -> Instance:
    """Two pipelines on two workers where clearing the frontier fastest
    forfeits a downstream overlap.

    Worker 0 multiplexes pipeline A's long decode tail with pipeline B's
    training (the classic complementary pairing). On worker 1 both a short
    prefill burst of A and a decode of B are ready; the decode gates a long
    tool wait whose idle time should be launched as early as possible. The
    greedy scheduler clears the quickest action first (the prefill burst),
    pushing the tool wait late; the look-ahead window contains the tool
    chain and runs the decode first, and the oracle confirms that plan.
    """
    a_r0 = _node("A", 0, 0, SubStageKind.DECODE_SMALL, 30.0, remaining=60000, active=40)
    a_r1 = _node("A", 1, 1, SubStageKind.PREFILL_BURST, 8.0, remaining=2640, active=60)
    a_t0 = _node("A", 0, 2, SubStageKind.TRAINING, 6.0)
    b_t0 = _node("B", 0, 0, SubStageKind.TRAINING, 24.0)
    b_r1 = _node("B", 1, 1, SubStageKind.DECODE_SMALL, 12.0, remaining=12000, active=20)
    b_w1 = _node("B", 1, 2, SubStageKind.TOOL_WAIT, 24.0)
    b_r2 = _node("B", 1, 3, SubStageKind.DECODE_SMALL, 14.0, remaining=11200, active=16)

    graph_a = SubStageGraph(
        pipeline_id="A",
        nodes={n.id: n for n in (a_r0, a_r1, a_t0)},
        edges={(a_r0.id, a_t0.id), (a_r1.id, a_t0.id)},
        latency_model=dict(DEFAULT_LATENCY),
    )
    # B is mid-step: last step's training still runs on worker 0 while the
    # next rollout chain proceeds on worker 1.
    graph_b = SubStageGraph(
        pipeline_id="B",
        nodes={n.id: n for n in (b_t0, b_r1, b_w1, b_r2)},
        edges={(b_r1.id, b_w1.id), (b_w1.id, b_r2.id)},
        latency_model=dict(DEFAULT_LATENCY),
    )
    return Instance(graphs=[graph_a, graph_b], model=default_model())


_ROLLOUT_CHOICES = (
    SubStageKind.DECODE_SMALL,
    SubStageKind.DECODE_MEDIUM,
    SubStageKind.DECODE_LARGE,
    SubStageKind.PREFILL_BURST,
)


def random_small_instance(seed: int, max_nodes: int = 10) -> Instance:
    """Two-pipeline instance small enough for the exhaustive oracle.

    Worst case is two workers with one rollout, one tool wait, and the
    training barrier per pipeline: exactly ten sub-stages.
    """
    rng = np.random.default_rng(seed)
    n_workers = int(rng.integers(1, 3))
    rollouts_per_worker = 1 if n_workers == 2 else int(rng.integers(1, 3))
    graphs = []
    for pid in ("A", "B"):
        chains: dict[int, list[SubStage]] = {}
        seq = 0
        tool_worker = int(rng.integers(0, n_workers)) if rng.random() < 0.3 else None
        with_training = rng.random() < 0.75
        for worker in range(n_workers):
            chain: list[SubStage] = []
            for _ in range(rollouts_per_worker):
                kind = _ROLLOUT_CHOICES[int(rng.integers(0, len(_ROLLOUT_CHOICES)))]
                duration = float(np.round(rng.uniform(4.0, 28.0), 3))
                active = int(rng.integers(8, 120))
                remaining = int(duration / DEFAULT_LATENCY[0] * active * 0.5)
                chain.append(
                    _node(pid, worker, seq, kind, duration, remaining=remaining, active=active)
                )
                seq += 1
            if worker == tool_worker:
                chain.append(
                    _node(pid, worker, seq, SubStageKind.TOOL_WAIT, float(np.round(rng.uniform(2.0, 10.0), 3)))
                )
                seq += 1
            chains[worker] = chain
        if with_training:
            for worker in range(n_workers):
                chains[worker].append(
                    _node(pid, worker, seq, SubStageKind.TRAINING, float(np.round(rng.uniform(6.0, 22.0), 3)))
                )
                seq += 1
        graphs.append(chain_graph(pid, chains))
    instance = Instance(graphs=graphs, model=default_model())
    total = sum(len(g.nodes) for g in instance.graphs)
    assert total <= max_nodes, f"generator produced {total} nodes"
    return instance


def random_migration_case(seed: int):
    """A detected-straggler scenario for migrate-vs-not comparisons.

    One worker drags a long low-utilization decode tail while the others
    are nearly done, the situation in which aggregation is ever proposed.
    Heavy-context draws make the KV-recomputation cost decisive in the
    other direction.

    Returns (members, partners, latency_model, instance, migrate_target).
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    latency = dict(DEFAULT_LATENCY)
    straggler = int(rng.integers(0, n))
    heavy_context = rng.random() < 0.45
    members = []
    partners: dict[int, SubStage | None] = {}
    a_chains: dict[int, list[SubStage]] = {}
    b_chains: dict[int, list[SubStage]] = {}
    for worker in range(n):
        if worker == straggler:
            # A handful of samples decoding far past everyone else.
            active = int(rng.integers(2, 12))
            steps = int(rng.integers(1200, 2400))
        else:
            active = int(rng.integers(8, 60))
            steps = int(rng.integers(200, 700))
        remaining = active * steps
        duration = steps * latency[0]
        per_sample_context = int(rng.integers(1000, 16000))
        if heavy_context:
            per_sample_context *= 4
        frag = _node(
            "A", worker, 0, SubStageKind.DECODE_SMALL, float(duration),
            remaining=remaining, active=active,
            context=active * per_sample_context,
        )
        members.append(frag)
        a_chains[worker] = [frag]
        if rng.random() < 0.85:
            kind = SubStageKind.TRAINING if rng.random() < 0.6 else SubStageKind.DECODE_MEDIUM
            partner = _node("B", worker, 0, kind, float(np.round(rng.uniform(8.0, 14.0), 3)))
            partners[worker] = partner
            b_chains[worker] = [partner]
        else:
            partners[worker] = None
    spec = PipelineSpec(
        pipeline_id="A",
        model_params=4e9,
        dp_workers=n,
        global_batch=n,
        stages=("rollout",),
        samples=tuple(
            SampleSpec(sample_id=i, prompt_tokens=128, turns=(TurnSpec(0, 64),))
            for i in range(n)
        ),
        device_peak_flops=1e15,
        prefill_mfu=0.4,
    )
    graph_a = chain_graph("A", a_chains, barrier=False)
    graph_a.spec = spec
    graphs = [graph_a]
    if any(v for v in b_chains.values()):
        graphs.append(chain_graph("B", b_chains, barrier=False))
    instance = Instance(graphs=graphs, model=default_model())
    target = members[int(rng.integers(0, len(members)))].worker_id
    return members, partners, latency, instance, target
