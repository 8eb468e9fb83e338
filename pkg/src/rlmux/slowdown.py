"""Profiled slowdown model over discrete resource grids.

The table maps (kind, partner kind, SM share, memory share) to the factor
by which a sub-stage's exclusive duration stretches under that allocation.
Queries off the grid are answered by bilinear interpolation over the
SM x memory lattice, clamped to the nearest edge outside it. The shipped
default table is a fixture anchored to a handful of measured extremes;
everything else in it is shaped, not measured.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .graph import SubStage, SubStageKind

SM_GRID = (0.25, 0.50, 0.75, 1.00)
MEM_GRID = (0.20, 0.40, 0.60, 0.80)
DEFAULT_HEADROOM = 0.05

# Full allocation: all SMs plus the top memory level.
FULL_ALLOCATION_MEM = MEM_GRID[-1]

TABLE_VERSION = 1

_NONE_KEY = "-"


class TableFormatError(ValueError):
    """Raised when a table file cannot be parsed."""


class TableValidationError(ValueError):
    """Raised when table entries violate the model invariants."""


@dataclass(frozen=True)
class ResourceAllocation:
    """Compute and memory share handed to one side of a co-location."""

    sm_share: float
    mem_share: float

    def __post_init__(self) -> None:
        if not 0 < self.sm_share <= 1:
            raise ValueError(f"sm_share must be in (0, 1], got {self.sm_share}")
        if not 0 < self.mem_share <= 1:
            raise ValueError(f"mem_share must be in (0, 1], got {self.mem_share}")


FULL_ALLOCATION = ResourceAllocation(1.0, FULL_ALLOCATION_MEM)

Key = tuple[SubStageKind, SubStageKind | None, float, float]


@dataclass
class SlowdownTable:
    """Dense factor grid per (kind, partner) pair, partner None = isolation."""

    entries: dict[Key, float]
    kinds: tuple[SubStageKind, ...] = tuple(SubStageKind)

    def validate(self) -> None:
        pairs = {(k, p) for k, p, _, _ in self.entries}
        for kind, partner in sorted(pairs, key=lambda kp: (kp[0].value, kp[1].value if kp[1] else "")):
            for alpha, memv in itertools.product(SM_GRID, MEM_GRID):
                key = (kind, partner, alpha, memv)
                if key not in self.entries:
                    raise TableValidationError(
                        f"missing grid point {kind.value}/{partner.value if partner else _NONE_KEY}"
                        f" at alpha={alpha} mem={memv}"
                    )
                if self.entries[key] < 1.0:
                    raise TableValidationError(
                        f"factor < 1.0 at {kind.value}/{partner.value if partner else _NONE_KEY}"
                        f" alpha={alpha} mem={memv}: {self.entries[key]}"
                    )
            # Slowdown may not grow when a sub-stage is handed more resources.
            for memv in MEM_GRID:
                for lo, hi in zip(SM_GRID, SM_GRID[1:]):
                    if self.entries[(kind, partner, hi, memv)] > self.entries[(kind, partner, lo, memv)] + 1e-12:
                        raise TableValidationError(
                            f"non-monotone in alpha at {kind.value}/"
                            f"{partner.value if partner else _NONE_KEY} mem={memv}"
                        )
            for alpha in SM_GRID:
                for lo, hi in zip(MEM_GRID, MEM_GRID[1:]):
                    if self.entries[(kind, partner, alpha, hi)] > self.entries[(kind, partner, alpha, lo)] + 1e-12:
                        raise TableValidationError(
                            f"non-monotone in mem at {kind.value}/"
                            f"{partner.value if partner else _NONE_KEY} alpha={alpha}"
                        )
        for kind in self.kinds:
            key = (kind, None, SM_GRID[-1], MEM_GRID[-1])
            if key in self.entries and abs(self.entries[key] - 1.0) > 1e-12:
                raise TableValidationError(
                    f"isolated full-resource factor for {kind.value} must be 1.0"
                )
        for (kind, partner, alpha, memv), factor in self.entries.items():
            if kind is SubStageKind.TOOL_WAIT and abs(factor - 1.0) > 1e-12:
                raise TableValidationError("tool-wait rows must be identically 1.0")

    def isolation(self, kind: SubStageKind, alpha: float) -> float:
        """Exclusive-execution sensitivity to a capped SM budget."""
        return SlowdownModel(self).slowdown(kind, None, ResourceAllocation(alpha, FULL_ALLOCATION_MEM))


def _grid_neighbors(grid: tuple[float, ...], x: float) -> tuple[float, float, float]:
    """Bracketing grid points and the interpolation weight, clamped at edges."""
    if x <= grid[0]:
        return grid[0], grid[0], 0.0
    if x >= grid[-1]:
        return grid[-1], grid[-1], 0.0
    for lo, hi in zip(grid, grid[1:]):
        if lo <= x <= hi:
            if lo == hi:
                return lo, hi, 0.0
            return lo, hi, (x - lo) / (hi - lo)
    return grid[-1], grid[-1], 0.0


@dataclass
class SlowdownModel:
    """Bilinear interpolation view over a validated slowdown table."""

    table: SlowdownTable

    def slowdown(
        self,
        kind_a: SubStageKind,
        kind_b: SubStageKind | None,
        alloc: ResourceAllocation,
    ) -> float:
        if kind_a is SubStageKind.TOOL_WAIT:
            return 1.0
        a_lo, a_hi, wa = _grid_neighbors(SM_GRID, alloc.sm_share)
        m_lo, m_hi, wm = _grid_neighbors(MEM_GRID, alloc.mem_share)
        entries = self.table.entries

        def cell(alpha: float, memv: float) -> float:
            key = (kind_a, kind_b, alpha, memv)
            if key not in entries:
                partner = kind_b.value if kind_b else _NONE_KEY
                raise KeyError(
                    f"slowdown table has no rows for pair {kind_a.value}/{partner}"
                )
            return entries[key]

        f00 = cell(a_lo, m_lo)
        f10 = cell(a_hi, m_lo)
        f01 = cell(a_lo, m_hi)
        f11 = cell(a_hi, m_hi)
        lo = f00 + (f10 - f00) * wa
        hi = f01 + (f11 - f01) * wa
        return lo + (hi - lo) * wm

    def max_factor(self) -> float:
        return max(self.table.entries.values())


def feasible(mem_a: float, mem_b: float, headroom: float = DEFAULT_HEADROOM) -> bool:
    """Can two footprints share one device, keeping the headroom free."""
    if not 0 < mem_a <= 1 or not 0 < mem_b <= 1:
        raise ValueError("memory fractions must be in (0, 1]")
    return mem_a + mem_b <= 1.0 - headroom + 1e-12


def complement_allocation(
    alloc: ResourceAllocation, headroom: float = DEFAULT_HEADROOM
) -> ResourceAllocation:
    """Resources left for the partner after one side takes `alloc`."""
    sm = max(SM_GRID[0], min(1.0 - alloc.sm_share, 1.0))
    mem = max(0.05, 1.0 - alloc.mem_share - headroom)
    return ResourceAllocation(sm, mem)


def adjusted_duration(
    model: SlowdownModel,
    sub_stage: SubStage,
    partner: SubStageKind | None,
    alloc: ResourceAllocation,
) -> float:
    """Exclusive duration stretched by the co-location slowdown.

    Tool waits are CPU-side and never scale.
    """
    if sub_stage.kind is SubStageKind.TOOL_WAIT:
        return sub_stage.duration
    return sub_stage.duration * model.slowdown(sub_stage.kind, partner, alloc)


# ---------------------------------------------------------------------------
# Default table fixture

# Isolation sensitivity to the SM budget, indexed by SM_GRID. Compute-bound
# kinds degrade steeply; small-batch decode barely notices.
_SM_CURVE = {
    SubStageKind.TRAINING: (2.70, 1.825, 1.30, 1.0),
    SubStageKind.REFERENCE: (2.30, 1.60, 1.22, 1.0),
    SubStageKind.PREFILL_BURST: (2.60, 1.75, 1.28, 1.0),
    SubStageKind.DECODE_LARGE: (2.40, 1.70, 1.25, 1.0),
    SubStageKind.DECODE_MEDIUM: (1.50, 1.25, 1.10, 1.0),
    SubStageKind.DECODE_SMALL: (1.08, 1.05, 1.02, 1.0),
    SubStageKind.TOOL_WAIT: (1.0, 1.0, 1.0, 1.0),
}

# Sensitivity to the memory level, indexed by MEM_GRID.
_MEM_CURVE = {
    SubStageKind.TRAINING: (1.45, 1.20, 1.08, 1.0),
    SubStageKind.REFERENCE: (1.35, 1.18, 1.07, 1.0),
    SubStageKind.PREFILL_BURST: (1.30, 1.15, 1.05, 1.0),
    SubStageKind.DECODE_LARGE: (1.70, 1.43, 1.18, 1.0),
    SubStageKind.DECODE_MEDIUM: (1.40, 1.20, 1.08, 1.0),
    SubStageKind.DECODE_SMALL: (1.15, 1.08, 1.03, 1.0),
    SubStageKind.TOOL_WAIT: (1.0, 1.0, 1.0, 1.0),
}

_COMPUTE_BOUND = frozenset(
    {
        SubStageKind.TRAINING,
        SubStageKind.REFERENCE,
        SubStageKind.PREFILL_BURST,
        SubStageKind.DECODE_LARGE,
    }
)


def _cross_interference(kind_a: SubStageKind, kind_b: SubStageKind | None) -> float:
    """Residual interference on top of the partitioned-resource effect."""
    if kind_b is None or SubStageKind.TOOL_WAIT in (kind_a, kind_b):
        return 1.0
    a_compute = kind_a in _COMPUTE_BOUND
    b_compute = kind_b in _COMPUTE_BOUND
    if a_compute and b_compute:
        return 1.0  # SM partitioning already carries the contention cost
    if not a_compute and b_compute:
        return 1.06  # compute partner steals memory bandwidth
    if a_compute and not b_compute:
        return 1.03
    # Two memory-bound stages: sparse long-tail decodes coexist cheaply,
    # dense decode batches split the bandwidth between them.
    small = SubStageKind.DECODE_SMALL
    if kind_a is small and kind_b is small:
        return 1.12
    if small in (kind_a, kind_b):
        return 1.30
    return 1.50


def default_table() -> SlowdownTable:
    entries: dict[Key, float] = {}
    partners: list[SubStageKind | None] = [None, *SubStageKind]
    for kind in SubStageKind:
        for partner in partners:
            cross = _cross_interference(kind, partner)
            for ai, alpha in enumerate(SM_GRID):
                for mi, memv in enumerate(MEM_GRID):
                    if kind is SubStageKind.TOOL_WAIT:
                        factor = 1.0
                    else:
                        factor = _SM_CURVE[kind][ai] * _MEM_CURVE[kind][mi] * cross
                        if partner is None and ai == len(SM_GRID) - 1 and mi == len(MEM_GRID) - 1:
                            factor = 1.0
                    entries[(kind, partner, alpha, memv)] = factor
    table = SlowdownTable(entries=entries)
    table.validate()
    return table


def default_model() -> SlowdownModel:
    return SlowdownModel(default_table())


# ---------------------------------------------------------------------------
# Table file format


def save_table(table: SlowdownTable, path: str) -> None:
    lines = [
        f"version={TABLE_VERSION}",
        "kinds " + ",".join(k.value for k in SubStageKind),
        "sm_grid " + ",".join(repr(a) for a in SM_GRID),
        "mem_grid " + ",".join(repr(m) for m in MEM_GRID),
    ]
    for (kind, partner, alpha, memv), factor in sorted(
        table.entries.items(),
        key=lambda kv: (kv[0][0].value, kv[0][1].value if kv[0][1] else "", kv[0][2], kv[0][3]),
    ):
        partner_key = partner.value if partner else _NONE_KEY
        lines.append(f"{kind.value} {partner_key} {alpha!r} {memv!r} {factor!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_table(path: str) -> SlowdownTable:
    entries: dict[Key, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1:
                header = dict(p.split("=", 1) for p in line.split() if "=" in p)
                if header.get("version") != str(TABLE_VERSION):
                    raise TableFormatError(f"{path}:1: unsupported table version")
                continue
            if line.startswith(("kinds ", "sm_grid ", "mem_grid ")):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise TableFormatError(
                    f"{path}:{lineno}: expected `kindA kindB alpha mem factor`"
                )
            try:
                kind = SubStageKind(parts[0])
                partner = None if parts[1] == _NONE_KEY else SubStageKind(parts[1])
                alpha, memv, factor = float(parts[2]), float(parts[3]), float(parts[4])
            except ValueError as exc:
                raise TableFormatError(f"{path}:{lineno}: {exc}") from None
            if alpha not in SM_GRID or memv not in MEM_GRID:
                raise TableFormatError(
                    f"{path}:{lineno}: ({alpha}, {memv}) is not a grid point"
                )
            entries[(kind, partner, alpha, memv)] = factor
    table = SlowdownTable(entries=entries)
    try:
        table.validate()
    except TableValidationError as exc:
        raise TableValidationError(f"{path}: {exc}") from None
    return table
