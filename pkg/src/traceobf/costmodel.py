"""Analytical hardware cost model.

Maps (kernel, schedule) pairs to per-kernel trace features — cycles, DRAM
traffic, cache counters — through closed-form formulas over a device
profile. The model is deliberately simple: the attacker/defender game only
needs features that are deterministic and sensitive to shapes, fusion and
schedules, not cycle accuracy against any real GPU.

Latency model per kernel:  cycles = work / (P * eff) + launch overhead,
where ``eff`` combines how well the full tile fills L1 with how well the
tile grid fills the SMs. ``eff`` depends only on full tile products, so the
schedule-modification knob (which preserves products) moves the memory
counters without moving latency — mirroring how retuned schedules shift
cache behaviour at near-constant runtime.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .fusion import Kernel, Schedule, default_schedule, fuse, modify_schedule
from .graph import COMPLEX_KINDS, Graph, OperatorKind, infer_shapes

BYTES = 4  # float32 everywhere
_TX_GRANULE = 32  # bytes per cache transaction
_STREAM_FP = 8192  # nominal resident footprint of non-tiled kernels
_EFF_FLOOR = 1.0 / 256.0


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    macs_per_cycle: int = 1024
    launch_overhead: int = 2000
    l1_bytes: int = 64 * 1024
    l2_bytes: int = 1024 * 1024
    sm_count: int = 4


BUILTIN_PROFILES = {
    "default": DeviceProfile("default"),
    # Lower-throughput part: compute dwarfs launch overhead, the regime where
    # many obfuscating knobs fit inside small latency budgets.
    "lean": DeviceProfile("lean", macs_per_cycle=256, launch_overhead=500,
                          l1_bytes=32 * 1024, l2_bytes=512 * 1024, sm_count=4),
}


class LeakageCase(Enum):
    A = "A"  # latency only
    B = "B"  # + DRAM read/write
    C = "C"  # + L1/L2 cache counters

    @property
    def features(self) -> tuple[str, ...]:
        return CASE_FEATURES[self]


CASE_FEATURES = {
    LeakageCase.A: ("cycles",),
    LeakageCase.B: ("cycles", "dram_read", "dram_write"),
    LeakageCase.C: ("cycles", "dram_read", "dram_write",
                    "l1_tx", "l1_util", "l1_hit", "l2_tx", "l2_util", "l2_hit"),
}

FEATURE_NAMES = CASE_FEATURES[LeakageCase.C]


@dataclass(frozen=True)
class TraceStep:
    cycles: float
    dram_read: float = 0.0
    dram_write: float = 0.0
    l1_tx: float = 0.0
    l1_util: float = 0.0
    l1_hit: float = 0.0
    l2_tx: float = 0.0
    l2_util: float = 0.0
    l2_hit: float = 0.0
    label: OperatorKind | None = None
    anchor_id: int = -1

    def features(self, case: LeakageCase) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in case.features)


@dataclass(frozen=True)
class Trace:
    steps: tuple[TraceStep, ...]
    case: LeakageCase

    @property
    def total_latency(self) -> float:
        return sum(step.cycles for step in self.steps)

    def feature_matrix(self) -> np.ndarray:
        return np.array([step.features(self.case) for step in self.steps], dtype=np.float64)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _node_work(graph: Graph, nid: int) -> float:
    node = graph.nodes[nid]
    shape = node.out_shape
    numel = shape.numel
    kind = node.kind
    if kind is OperatorKind.Conv2D:
        a = node.attrs
        return shape.batch * a["k1"] * a["k2"] * a["c"] * a["j"] * shape.height * shape.width
    if kind is OperatorKind.Linear:
        return shape.batch * node.attrs["c"] * node.attrs["j"]
    if kind is OperatorKind.MaxPool:
        return numel * node.attrs["window"] ** 2
    if kind is OperatorKind.SoftMax:
        return 4 * numel
    if kind is OperatorKind.BatchNorm:
        return 2 * numel
    return numel  # ReLU / Add / Concat / Slice


def _input_bytes(graph: Graph, node) -> int:
    total = 0
    if node.inputs:
        for pred in node.inputs:
            total += graph.nodes[pred].out_shape.numel * BYTES
    else:
        total = graph.input_shape.numel * BYTES
    return total


def _operand_bytes(graph: Graph, nid: int) -> int:
    """Extra bytes a fused injective op streams in: stored constants,
    BatchNorm parameter vectors, or a residual Add's second operand."""
    node = graph.nodes[nid]
    extra = 0
    if node.weights is not None:
        extra += node.weights.size * BYTES
    if node.kind is OperatorKind.Add and len(node.inputs) > 1:
        for pred in node.inputs[1:]:
            extra += graph.nodes[pred].out_shape.numel * BYTES
    return extra


def _tile_footprint(kind: OperatorKind, attrs: dict, c: int,
                    ext_y: int, ext_x: int) -> int:
    """Bytes a (ext_y, ext_x) output tile touches: the input tile with halo
    across all input channels, one output channel's weights, and one output
    channel's tile."""
    if kind is OperatorKind.Conv2D:
        s, k1, k2 = attrs["stride"], attrs["k1"], attrs["k2"]
        in_tile = (ext_y * s + k1 - s) * (ext_x * s + k2 - s) * c
        w_tile = k1 * k2 * c
    else:  # MaxPool
        s, w = attrs["stride"], attrs["window"]
        in_tile = (ext_y * s + w - s) * (ext_x * s + w - s) * c
        w_tile = 0
    return BYTES * (ext_y * ext_x + in_tile + w_tile)


def profile_kernel(graph: Graph, kernel: Kernel, schedule: Schedule,
                   profile: DeviceProfile) -> TraceStep:
    """Closed-form feature vector for one kernel.

    ``graph`` must carry inferred shapes. Fused injective ops contribute
    their arithmetic to the cycle count and their constant-operand traffic
    to the memory counters of the anchor's step.
    """
    anchor = graph.nodes[kernel.anchor]
    shape = anchor.out_shape
    if shape is None:  # degenerate kernel with nothing to compute
        return TraceStep(cycles=0.0, anchor_id=kernel.anchor)

    work = _node_work(graph, kernel.anchor)
    fused_work = sum(_node_work(graph, nid) for nid in kernel.node_ids[1:])
    fused_bytes = sum(_operand_bytes(graph, nid) for nid in kernel.node_ids[1:])

    in_bytes = _input_bytes(graph, anchor)
    w_bytes = anchor.weights.size * BYTES if anchor.weights is not None else 0
    out_bytes = graph.nodes[kernel.node_ids[-1]].out_shape.numel * BYTES
    working_set = in_bytes + w_bytes + out_bytes + fused_bytes

    tiled = anchor.kind in (OperatorKind.Conv2D, OperatorKind.MaxPool)
    if tiled:
        f1y, f2y, f3y = schedule.tile_y
        f1x, f2x, f3x = schedule.tile_x
        inner_y, inner_x = f2y * f3y, f2x * f3x
        full_y, full_x = f1y * inner_y, f1x * inner_x
        c = anchor.attrs.get("c", shape.channels)
        fp_inner = _tile_footprint(anchor.kind, anchor.attrs, c, inner_y, inner_x)
        fp_full = _tile_footprint(anchor.kind, anchor.attrs, c, full_y, full_x)
        blocks = _ceil_div(shape.height, full_y) * _ceil_div(shape.width, full_x)
        occupancy = min(1.0, blocks / profile.sm_count)
        eff = (min(fp_full, profile.l1_bytes) / profile.l1_bytes) * occupancy
        eff = min(1.0, eff * (0.92 + 0.02 * schedule.unroll))
        eff = max(eff, _EFF_FLOOR)
        reuse_w = _ceil_div(shape.height, inner_y) * _ceil_div(shape.width, inner_x)
        channel_like = anchor.attrs.get("j", shape.channels)
        reuse_x = _ceil_div(channel_like, inner_y)
    else:
        # Linear / SoftMax / standalone injectives stream their operands.
        fp_inner = fp_full = min(_STREAM_FP, working_set)
        eff = 1.0
        reuse_w = 1
        reuse_x = anchor.attrs["j"] if anchor.kind is OperatorKind.Linear else 1

    read = w_bytes * reuse_w + in_bytes * reuse_x + fused_bytes
    write = out_bytes
    cycles = work / (profile.macs_per_cycle * eff) \
        + fused_work / profile.macs_per_cycle + profile.launch_overhead

    def pct_hit(fp):
        return float(np.clip(100.0 * (1.0 - fp / working_set), 5.0, 99.0))

    return TraceStep(
        cycles=cycles,
        dram_read=float(read),
        dram_write=float(write),
        l1_tx=read / _TX_GRANULE,
        l2_tx=(read + write) / _TX_GRANULE,
        l1_util=100.0 * eff,
        l2_util=100.0 * min(fp_full, profile.l2_bytes) / profile.l2_bytes,
        l1_hit=pct_hit(fp_inner),
        l2_hit=pct_hit(fp_full),
        label=anchor.kind if anchor.kind in COMPLEX_KINDS else None,
        anchor_id=kernel.anchor,
    )


def profile_graph(graph: Graph, kernels: list[Kernel], schedules: list[Schedule],
                  case: LeakageCase, profile: DeviceProfile) -> Trace:
    """Per-kernel steps in execution order. All fields are computed; columns
    outside ``case`` are masked when exporting or featurizing."""
    steps = tuple(profile_kernel(graph, k, s, profile)
                  for k, s in zip(kernels, schedules, strict=True))
    return Trace(steps, case)


# ---------------------------------------------------------------------------
# Pipeline helper: graph -> kernels -> schedules -> trace
# ---------------------------------------------------------------------------

_SCHEDULE_CACHE: dict[tuple, Schedule] = {}


def _schedule_signature(graph: Graph, kernel: Kernel, profile: DeviceProfile):
    anchor = graph.nodes[kernel.anchor]
    in_shape = (graph.nodes[anchor.inputs[0]].out_shape if anchor.inputs
                else graph.input_shape)
    return (profile.name, anchor.kind.value, tuple(sorted(anchor.attrs.items())),
            in_shape.as_tuple(), anchor.out_shape.as_tuple())


@dataclass
class CompiledGraph:
    graph: Graph  # shape-annotated
    kernels: list[Kernel]
    schedules: list[Schedule]


def compile_graph(graph: Graph, profile: DeviceProfile,
                  fusion_limits: dict[int, int] | None = None,
                  strategies: dict[int, int] | None = None) -> CompiledGraph:
    """Fuse, pick the default schedule per kernel (memoized by shape
    signature), then apply any per-layer schedule strategies."""
    annotated = infer_shapes(graph)
    kernels = fuse(annotated, fusion_limits)
    strategies = strategies or {}
    schedules = []
    for kernel in kernels:
        sig = _schedule_signature(annotated, kernel, profile)
        sched = _SCHEDULE_CACHE.get(sig)
        if sched is None:
            sched = default_schedule(annotated, kernel, profile)
            _SCHEDULE_CACHE[sig] = sched
        k = strategies.get(kernel.anchor, 0)
        if k:
            sched = modify_schedule(sched, k)
        schedules.append(sched)
    return CompiledGraph(annotated, kernels, schedules)


def profile_pipeline(graph: Graph, case: LeakageCase, profile: DeviceProfile,
                     fusion_limits: dict[int, int] | None = None,
                     strategies: dict[int, int] | None = None) -> Trace:
    compiled = compile_graph(graph, profile, fusion_limits, strategies)
    return profile_graph(compiled.graph, compiled.kernels, compiled.schedules,
                         case, profile)


# ---------------------------------------------------------------------------
# Trace export: delimiter-separated text with case-masked columns.
# ---------------------------------------------------------------------------

def dump_trace(trace: Trace, path: str | Path, include_labels: bool = False) -> None:
    columns = list(trace.case.features)
    header = ",".join(columns + (["label"] if include_labels else []))
    lines = [header]
    for step in trace.steps:
        row = [repr(getattr(step, c)) for c in columns]
        if include_labels:
            row.append(step.label.value if step.label is not None else "-")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path: str | Path) -> Trace:
    lines = Path(path).read_text().splitlines()
    columns = lines[0].split(",")
    has_labels = columns and columns[-1] == "label"
    feature_cols = columns[:-1] if has_labels else columns
    case = next(c for c in LeakageCase if list(c.features) == feature_cols)
    steps = []
    for raw in lines[1:]:
        if not raw.strip():
            continue
        parts = raw.split(",")
        values = dict(zip(feature_cols, map(float, parts[:len(feature_cols)])))
        label = None
        if has_labels and parts[-1] != "-":
            label = OperatorKind(parts[-1])
        steps.append(TraceStep(label=label, **values))
    return Trace(tuple(steps), case)
