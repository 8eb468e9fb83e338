"""Workload models and synthetic agentic-rollout generation.

Pipelines here are token-count skeletons: each sample is a sequence of
turns, each turn an injected prefill followed by a decode budget and an
optional tool wait. ``expand_to_trace`` replays a batch of samples on
their assigned workers and emits the per-step forward records that graph
construction consumes. Decode lengths are drawn long-tailed (lognormal),
turn counts are skewed toward 1-2 turns with a tail to 5, and tool waits
show up as idle markers in the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TRACE_VERSION = 1

# Latency-model indexes. 0..2 are the rollout token-count buckets; the
# reference and training stages are modeled as single per-step entries.
REFERENCE_INDEX = 3
TRAINING_INDEX = 4

KNOWN_STAGES = ("rollout", "tool", "reference", "training")

DEFAULT_LATENCY = {0: 0.02, 1: 0.05, 2: 0.18, REFERENCE_INDEX: 4.0, TRAINING_INDEX: 10.0}


class TraceParseError(ValueError):
    """Raised when a trace, latency-model, or generator-config file is malformed."""


@dataclass(frozen=True)
class TurnSpec:
    """One turn: new context injected, tokens to decode, tool wait afterwards."""

    prefill_tokens: int
    decode_tokens: int
    tool_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.decode_tokens < 1:
            raise ValueError(f"decode_tokens must be >= 1, got {self.decode_tokens}")
        if self.prefill_tokens < 0:
            raise ValueError(f"prefill_tokens must be >= 0, got {self.prefill_tokens}")
        if self.tool_latency < 0:
            raise ValueError(f"tool_latency must be >= 0, got {self.tool_latency}")


@dataclass(frozen=True)
class SampleSpec:
    """A single rollout sample: prompt plus one or more turns."""

    sample_id: int
    prompt_tokens: int
    turns: tuple[TurnSpec, ...]

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError(f"sample {self.sample_id}: turns must be non-empty")
        if self.prompt_tokens < 1:
            raise ValueError(f"sample {self.sample_id}: prompt_tokens must be >= 1")

    @property
    def total_decode_tokens(self) -> int:
        return sum(t.decode_tokens for t in self.turns)

    @property
    def total_prefill_tokens(self) -> int:
        return self.prompt_tokens + sum(t.prefill_tokens for t in self.turns)


@dataclass(frozen=True)
class PipelineSpec:
    """One RL pipeline: stage list, data-parallel layout, and its sample batch."""

    pipeline_id: str
    model_params: float
    dp_workers: int
    global_batch: int
    stages: tuple[str, ...]
    samples: tuple[SampleSpec, ...]
    device_peak_flops: float = 1e15
    prefill_mfu: float = 0.4

    def __post_init__(self) -> None:
        if not self.stages or self.stages[0] != "rollout":
            raise ValueError(f"pipeline {self.pipeline_id}: stages must begin with rollout")
        for stage in self.stages:
            if stage not in KNOWN_STAGES:
                raise ValueError(f"pipeline {self.pipeline_id}: unknown stage {stage!r}")
        if self.dp_workers < 1:
            raise ValueError("dp_workers must be >= 1")
        if self.global_batch % self.dp_workers != 0:
            raise ValueError(
                f"global_batch {self.global_batch} not divisible by dp_workers {self.dp_workers}"
            )
        if len(self.samples) != self.global_batch:
            raise ValueError(
                f"expected {self.global_batch} samples, got {len(self.samples)}"
            )
        if not 0 < self.prefill_mfu <= 1:
            raise ValueError(f"prefill_mfu must be in (0, 1], got {self.prefill_mfu}")

    @property
    def total_tokens(self) -> int:
        """Prefill plus decode tokens over the whole batch (conservation target)."""
        return sum(s.total_prefill_tokens + s.total_decode_tokens for s in self.samples)


@dataclass(frozen=True)
class ForwardStepRecord:
    """Token counts observed for one forward step on one worker.

    A record with both counts zero is a tool-wait marker: the worker is
    idle waiting on external tool responses.
    """

    step_index: int
    prefill_tokens_this_step: int
    active_decode_requests: int

    def __post_init__(self) -> None:
        if self.prefill_tokens_this_step < 0 or self.active_decode_requests < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def is_tool_wait(self) -> bool:
        return self.prefill_tokens_this_step == 0 and self.active_decode_requests == 0


@dataclass(frozen=True)
class ProfileTrace:
    """Per-step forward records for one pipeline on one worker."""

    pipeline_id: str
    worker_id: int
    records: tuple[ForwardStepRecord, ...]
    per_step_latency_model: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_LATENCY))

    def __post_init__(self) -> None:
        last = 0
        for rec in self.records:
            if rec.step_index <= last:
                raise ValueError(
                    f"step_index not strictly increasing at step {rec.step_index}"
                )
            last = rec.step_index
        for sec in self.per_step_latency_model.values():
            if sec <= 0:
                raise ValueError("per-step latencies must be positive")

    @property
    def total_decode_tokens(self) -> int:
        return sum(r.active_decode_requests for r in self.records)

    @property
    def total_prefill_tokens(self) -> int:
        return sum(r.prefill_tokens_this_step for r in self.records)


def token_count(record: ForwardStepRecord) -> int:
    """Tokens processed by one forward step.

    Each active decode request contributes one token per step, on top of
    any prefill injected that step.
    """
    return record.prefill_tokens_this_step + record.active_decode_requests


# ---------------------------------------------------------------------------
# Synthetic generation

DEFAULT_TURN_PROBS = {1: 0.5, 2: 0.3, 3: 0.1, 4: 0.06, 5: 0.04}


@dataclass(frozen=True)
class GeneratorConfig:
    """Distribution knobs for synthetic pipeline batches."""

    batch: int = 64
    workers: int = 1
    decode_median: float = 80.0
    decode_sigma: float = 1.0
    decode_max: int = 2000
    prompt_median: float = 128.0
    prompt_sigma: float = 0.3
    turn_probs: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_TURN_PROBS))
    turn_prefill_median: float = 200.0
    turn_prefill_sigma: float = 0.4
    tool_prob: float = 0.0
    tool_latency_mean: float = 0.0
    stages: tuple[str, ...] = ("rollout", "reference", "training")
    model_params: float = 4e9
    device_peak_flops: float = 1e15
    prefill_mfu: float = 0.4
    pipeline_id: str = "p0"

    def __post_init__(self) -> None:
        if self.decode_median <= 0 or self.prompt_median <= 0 or self.turn_prefill_median <= 0:
            raise ValueError("distribution medians must be positive")
        if min(self.decode_sigma, self.prompt_sigma, self.turn_prefill_sigma) < 0:
            raise ValueError("distribution sigmas must be non-negative")
        if self.tool_latency_mean < 0 or not 0 <= self.tool_prob <= 1:
            raise ValueError("invalid tool distribution parameters")
        if self.batch < 1 or self.workers < 1 or self.batch % self.workers != 0:
            raise ValueError("batch must be a positive multiple of workers")
        total = sum(self.turn_probs.values())
        if not self.turn_probs or abs(total - 1.0) > 1e-9 or min(self.turn_probs) < 1:
            raise ValueError("turn_probs must be a distribution over turn counts >= 1")


def _lognormal_int(rng: np.random.Generator, median: float, sigma: float, lo: int, hi: int) -> int:
    value = median * math.exp(sigma * rng.standard_normal()) if sigma > 0 else median
    return int(min(max(round(value), lo), hi))


def generate_synthetic(config: GeneratorConfig, seed: int) -> PipelineSpec:
    """Draw a full pipeline batch; identical (config, seed) gives identical specs."""
    rng = np.random.default_rng(seed)
    turn_counts = sorted(config.turn_probs)
    turn_p = np.array([config.turn_probs[k] for k in turn_counts], dtype=float)
    turn_p = turn_p / turn_p.sum()

    samples = []
    for sid in range(config.batch):
        prompt = _lognormal_int(rng, config.prompt_median, config.prompt_sigma, 1, 1 << 20)
        n_turns = int(rng.choice(turn_counts, p=turn_p))
        turns = []
        for t in range(n_turns):
            prefill = 0
            if t > 0:
                prefill = _lognormal_int(
                    rng, config.turn_prefill_median, config.turn_prefill_sigma, 1, 1 << 20
                )
            decode = _lognormal_int(rng, config.decode_median, config.decode_sigma, 1, config.decode_max)
            tool = 0.0
            if t < n_turns - 1 and config.tool_latency_mean > 0 and rng.random() < config.tool_prob:
                tool = float(rng.exponential(config.tool_latency_mean))
            turns.append(TurnSpec(prefill_tokens=prefill, decode_tokens=decode, tool_latency=tool))
        samples.append(SampleSpec(sample_id=sid, prompt_tokens=prompt, turns=tuple(turns)))

    return PipelineSpec(
        pipeline_id=config.pipeline_id,
        model_params=config.model_params,
        dp_workers=config.workers,
        global_batch=config.batch,
        stages=config.stages,
        samples=tuple(samples),
        device_peak_flops=config.device_peak_flops,
        prefill_mfu=config.prefill_mfu,
    )


def round_robin_assignment(spec: PipelineSpec) -> dict[int, int]:
    """Default sample-to-worker map: sample i goes to worker i mod dp_workers."""
    return {s.sample_id: s.sample_id % spec.dp_workers for s in spec.samples}


# ---------------------------------------------------------------------------
# Trace expansion (per-worker cohort replay)


@dataclass
class WorkerReplay:
    """Records plus the per-step sample bookkeeping graph enrichment needs."""

    records: list[ForwardStepRecord]
    step_active_ids: list[tuple[int, ...]]
    step_context_total: list[int]


def _replay_worker(
    samples: list[SampleSpec], latency: dict[int, float], bucket_of: "callable"
) -> WorkerReplay:
    # Per-sample state: index of current turn, decode tokens left in it,
    # wall-clock wake time while a tool call is outstanding, running context.
    turn_idx = {s.sample_id: 0 for s in samples}
    remaining = {s.sample_id: s.turns[0].decode_tokens for s in samples}
    context = {s.sample_id: 0 for s in samples}
    wake_time = {}
    pending_prefill = {s.sample_id: s.prompt_tokens + s.turns[0].prefill_tokens for s in samples}
    by_id = {s.sample_id: s for s in samples}
    done: set[int] = set()

    records: list[ForwardStepRecord] = []
    active_ids: list[tuple[int, ...]] = []
    context_total: list[int] = []
    now = 0.0
    step = 1

    while len(done) < len(samples):
        woken = [sid for sid, t in sorted(wake_time.items()) if t <= now + 1e-12]
        for sid in woken:
            del wake_time[sid]
        active = sorted(
            sid for sid in by_id
            if sid not in done and sid not in wake_time
        )
        if not active:
            # Everyone is blocked on tools: emit idle markers at the small-step cadence.
            records.append(ForwardStepRecord(step, 0, 0))
            active_ids.append(())
            context_total.append(0)
            now += latency[0]
            step += 1
            continue

        prefill_sum = 0
        for sid in active:
            if pending_prefill[sid] > 0:
                prefill_sum += pending_prefill[sid]
                context[sid] += pending_prefill[sid]
                pending_prefill[sid] = 0

        records.append(ForwardStepRecord(step, prefill_sum, len(active)))
        active_ids.append(tuple(active))
        context_total.append(sum(context[sid] for sid in active))

        now += latency[bucket_of(prefill_sum + len(active))]
        for sid in active:
            remaining[sid] -= 1
            context[sid] += 1
            if remaining[sid] == 0:
                sample = by_id[sid]
                turn = sample.turns[turn_idx[sid]]
                if turn_idx[sid] + 1 < len(sample.turns):
                    turn_idx[sid] += 1
                    nxt = sample.turns[turn_idx[sid]]
                    remaining[sid] = nxt.decode_tokens
                    pending_prefill[sid] = nxt.prefill_tokens
                    if turn.tool_latency > 0:
                        wake_time[sid] = now + turn.tool_latency
                else:
                    done.add(sid)
        step += 1

    return WorkerReplay(records, active_ids, context_total)


def expand_to_trace(
    spec: PipelineSpec,
    assignment: dict[int, int] | None = None,
    latency_model: dict[int, float] | None = None,
) -> list[ProfileTrace]:
    """Replay all samples on their workers, one trace per worker."""
    from . import graph as graph_mod  # bucket rule lives with the graph module

    if assignment is None:
        assignment = round_robin_assignment(spec)
    missing = [s.sample_id for s in spec.samples if s.sample_id not in assignment]
    if missing:
        raise ValueError(f"unassigned samples: {missing[:5]}")
    bad = [w for w in assignment.values() if not 0 <= w < spec.dp_workers]
    if bad:
        raise ValueError(f"assignment references invalid workers: {sorted(set(bad))}")
    latency = dict(latency_model or DEFAULT_LATENCY)

    traces = []
    for worker in range(spec.dp_workers):
        cohort = [s for s in spec.samples if assignment[s.sample_id] == worker]
        replay = _replay_worker(cohort, latency, graph_mod.bucketize)
        traces.append(
            ProfileTrace(
                pipeline_id=spec.pipeline_id,
                worker_id=worker,
                records=tuple(replay.records),
                per_step_latency_model=latency,
            )
        )
    return traces


def expand_with_enrichment(
    spec: PipelineSpec,
    assignment: dict[int, int] | None = None,
    latency_model: dict[int, float] | None = None,
) -> tuple[list[ProfileTrace], dict[int, WorkerReplay]]:
    """Like expand_to_trace but also returns per-worker sample bookkeeping."""
    from . import graph as graph_mod

    if assignment is None:
        assignment = round_robin_assignment(spec)
    traces = expand_to_trace(spec, assignment, latency_model)
    latency = dict(latency_model or DEFAULT_LATENCY)
    replays = {}
    for worker in range(spec.dp_workers):
        cohort = [s for s in spec.samples if assignment[s.sample_id] == worker]
        replays[worker] = _replay_worker(cohort, latency, graph_mod.bucketize)
    return traces, replays


# ---------------------------------------------------------------------------
# File formats


def save_trace(trace: ProfileTrace, path: str) -> None:
    """Write the line format: header, then one `step prefill decode` per record."""
    lines = [f"version={TRACE_VERSION} pipeline={trace.pipeline_id} worker={trace.worker_id}"]
    for rec in trace.records:
        lines.append(f"{rec.step_index} {rec.prefill_tokens_this_step} {rec.active_decode_requests}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trace(path: str, latency_model: dict[int, float] | None = None) -> ProfileTrace:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise TraceParseError(f"{path}: empty trace file")
    header = dict(
        part.split("=", 1) for part in lines[0].split() if "=" in part
    )
    for key in ("version", "pipeline", "worker"):
        if key not in header:
            raise TraceParseError(f"{path}:1: header missing field {key!r}")
    if header["version"] != str(TRACE_VERSION):
        raise TraceParseError(f"{path}:1: unsupported trace version {header['version']}")

    records = []
    last_step = 0
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 3:
            raise TraceParseError(f"{path}:{lineno}: expected `step prefill decode`")
        try:
            step, prefill, decode = (int(p) for p in parts)
        except ValueError as exc:
            raise TraceParseError(f"{path}:{lineno}: non-integer field: {exc}") from None
        if step <= last_step:
            raise TraceParseError(f"{path}:{lineno}: step_index {step} out of order")
        if prefill < 0 or decode < 0:
            raise TraceParseError(f"{path}:{lineno}: negative token count")
        last_step = step
        records.append(ForwardStepRecord(step, prefill, decode))

    return ProfileTrace(
        pipeline_id=header["pipeline"],
        worker_id=int(header["worker"]),
        records=tuple(records),
        per_step_latency_model=dict(latency_model or DEFAULT_LATENCY),
    )


def save_latency_model(latency: dict[int, float], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bucket in sorted(latency):
            fh.write(f"{bucket} {latency[bucket]!r}\n")


def load_latency_model(path: str) -> dict[int, float]:
    latency: dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TraceParseError(f"{path}:{lineno}: expected `bucket_index seconds`")
            try:
                bucket, seconds = int(parts[0]), float(parts[1])
            except ValueError:
                raise TraceParseError(f"{path}:{lineno}: malformed latency entry") from None
            if seconds <= 0:
                raise TraceParseError(f"{path}:{lineno}: latency must be positive")
            latency[bucket] = seconds
    for bucket in (0, 1, 2):
        if bucket not in latency:
            raise TraceParseError(f"{path}: missing latency for bucket {bucket}")
    return latency


_GENERATOR_FIELDS = {
    "batch": int,
    "workers": int,
    "decode_median": float,
    "decode_sigma": float,
    "decode_max": int,
    "prompt_median": float,
    "prompt_sigma": float,
    "turn_prefill_median": float,
    "turn_prefill_sigma": float,
    "tool_prob": float,
    "tool_latency_mean": float,
    "model_params": float,
    "device_peak_flops": float,
    "prefill_mfu": float,
    "pipeline_id": str,
}


def save_generator_config(config: GeneratorConfig, path: str) -> None:
    lines = [f"version {TRACE_VERSION}"]
    for name in _GENERATOR_FIELDS:
        lines.append(f"{name} {getattr(config, name)}")
    lines.append("turn_probs " + ",".join(f"{k}:{v}" for k, v in sorted(config.turn_probs.items())))
    lines.append("stages " + ",".join(config.stages))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_generator_config(path: str) -> GeneratorConfig:
    kwargs: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            name, _, raw = line.strip().partition(" ")
            if not raw:
                raise TraceParseError(f"{path}:{lineno}: expected `key value`")
            if name == "version":
                continue
            if name == "turn_probs":
                try:
                    kwargs["turn_probs"] = {
                        int(k): float(v)
                        for k, v in (pair.split(":") for pair in raw.split(","))
                    }
                except ValueError:
                    raise TraceParseError(f"{path}:{lineno}: malformed turn_probs") from None
            elif name == "stages":
                kwargs["stages"] = tuple(raw.split(","))
            elif name in _GENERATOR_FIELDS:
                try:
                    kwargs[name] = _GENERATOR_FIELDS[name](raw)
                except ValueError:
                    raise TraceParseError(f"{path}:{lineno}: bad value for {name}") from None
            else:
                raise TraceParseError(f"{path}:{lineno}: unknown field {name!r}")
    try:
        return GeneratorConfig(**kwargs)
    except ValueError as exc:
        raise TraceParseError(f"{path}: {exc}") from None
