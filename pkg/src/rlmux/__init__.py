"""rlmux: trace-driven simulation and interference-aware scheduling for
multiplexed RL post-training pipelines."""

__version__ = "0.1.0"

from .graph import (
    SubStage,
    SubStageGraph,
    SubStageKind,
    bucketize,
    construct_graph,
    critical_path_length,
    frontier_of,
)
from .scheduler import (
    Exclusive,
    Instance,
    Merge,
    Multiplex,
    Schedule,
    balance_batches,
    brute_force_schedule,
    greedy_schedule,
    lookahead_schedule,
    migration_cost,
    migration_gain,
    naive_spatial_schedule,
    rollout_mux_schedule,
    serial_schedule,
)
from .sim import SimulationReport, compare, simulate
from .slowdown import (
    ResourceAllocation,
    SlowdownModel,
    SlowdownTable,
    adjusted_duration,
    default_model,
    default_table,
    feasible,
    load_table,
    save_table,
)
from .workload import (
    ForwardStepRecord,
    GeneratorConfig,
    PipelineSpec,
    ProfileTrace,
    SampleSpec,
    TurnSpec,
    expand_to_trace,
    generate_synthetic,
    load_trace,
    save_trace,
    token_count,
)
