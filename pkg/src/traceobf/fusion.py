"""Kernel formation (selective fusion) and tiling schedules.

A kernel is one issued unit of execution: a complex operator plus the
contiguous chain of injective successors fused into it, or a standalone
node. Schedules assign two factor triples (spatial y/x tiling, batch is
always full) plus an unroll depth to each kernel; ``modify_schedule``
implements the strategy knob that forces one tile dimension to 1 and
rebalances the product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

from .graph import COMPLEX_KINDS, INJECTIVE_KINDS, Graph, topo_order

# A kernel absorbs at most this many injective ops before it saturates.
FUSION_SATURATION = 2

TILE_FACTORS = (1, 2, 4, 8, 16, 32)
DEFAULT_UNROLL = 4


@dataclass(frozen=True)
class Kernel:
    """``node_ids[0]`` is the anchor; the rest are fused injective ops."""

    node_ids: tuple[int, ...]

    @property
    def anchor(self) -> int:
        return self.node_ids[0]

    @property
    def fused_count(self) -> int:
        return len(self.node_ids) - 1

    @property
    def fusion_saturated(self) -> bool:
        return self.fused_count >= FUSION_SATURATION


def fuse(graph: Graph, fusion_limits: dict[int, int] | None = None) -> list[Kernel]:
    """Greedy forward fusion of injective successors into complex anchors.

    ``fusion_limits`` maps complex node ids to the number N of successive
    injective ops allowed to fuse (0 = issue everything separately); absent
    means unlimited, which the saturation cap still bounds at 2. Everything
    not absorbed becomes its own kernel, in execution order.
    """
    fusion_limits = fusion_limits or {}
    kernels: list[Kernel] = []
    consumed: set[int] = set()
    for nid in topo_order(graph):
        if nid in consumed:
            continue
        node = graph.nodes[nid]
        if node.kind not in COMPLEX_KINDS:
            kernels.append(Kernel((nid,)))
            continue
        limit = fusion_limits.get(nid, FUSION_SATURATION)
        if limit < 0:  # negative = unlimited, same as absent
            limit = FUSION_SATURATION
        limit = min(limit, FUSION_SATURATION)
        chain = [nid]
        cur = nid
        while len(chain) - 1 < limit:
            succ = graph.successors(cur)
            if len(succ) != 1:
                break
            nxt = graph.nodes[succ[0]]
            if nxt.kind not in INJECTIVE_KINDS:
                break
            chain.append(nxt.id)
            consumed.add(nxt.id)
            cur = nxt.id
        kernels.append(Kernel(tuple(chain)))
    return kernels


@dataclass(frozen=True)
class Schedule:
    """Factor triples for the two spatial output loops; batch is fixed at -1
    (whole batch) and is not represented."""

    tile_y: tuple[int, int, int]
    tile_x: tuple[int, int, int]
    unroll: int = DEFAULT_UNROLL

    def __post_init__(self):
        for triple in (self.tile_y, self.tile_x):
            if len(triple) != 3 or min(triple) < 1:
                raise ValueError(f"bad factor triple {triple}")


TRIVIAL_SCHEDULE = Schedule((1, 1, 1), (1, 1, 1))


class InvalidStrategy(Exception):
    pass


def balanced_pair(n: int) -> tuple[int, int]:
    """The factor pair (a, b) of n with minimal |a-b|, ascending."""
    a = 1
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            a = d
    return a, n // a


def _apply_strategy(triple: tuple[int, int, int], k: int) -> tuple[int, int, int]:
    product = triple[0] * triple[1] * triple[2]
    a, b = balanced_pair(product)
    out = [0, 0, 0]
    out[k - 1] = 1
    rest = [i for i in range(3) if i != k - 1]
    out[rest[0]], out[rest[1]] = a, b  # smaller factor to the earlier slot
    return tuple(out)


def modify_schedule(schedule: Schedule, strategy_k: int) -> Schedule:
    """Force tile dimension ``strategy_k`` (1-based) of both triples to 1 and
    redistribute the product as the most balanced factor pair. ``strategy_k``
    0 is a no-op. The factor product of each triple is preserved exactly."""
    if strategy_k == 0:
        return schedule
    if strategy_k not in (1, 2, 3):
        raise InvalidStrategy(f"strategy index {strategy_k} not in 0..3")
    return replace(schedule,
                   tile_y=_apply_strategy(schedule.tile_y, strategy_k),
                   tile_x=_apply_strategy(schedule.tile_x, strategy_k))


def _pow2_ceil(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def candidate_triples(extent: int) -> list[tuple[int, int, int]]:
    """All factor triples over TILE_FACTORS whose product fits the loop
    extent rounded up to a power of two, in lexicographic order."""
    cap = _pow2_ceil(extent)
    out = []
    for f1 in TILE_FACTORS:
        if f1 > cap:
            break
        for f2 in TILE_FACTORS:
            if f1 * f2 > cap:
                break
            for f3 in TILE_FACTORS:
                if f1 * f2 * f3 > cap:
                    break
                out.append((f1, f2, f3))
    return out


def default_schedule(graph: Graph, kernel: Kernel, profile) -> Schedule:
    """Deterministic stand-in for autotuning: exhaustively score the fixed
    candidate set under the cost model's latency estimate and return the
    minimizer (ties broken by lexicographically smallest triples).

    ``graph`` must carry inferred shapes.
    """
    from . import costmodel  # deferred: costmodel builds on kernels/schedules

    anchor = graph.nodes[kernel.anchor]
    if anchor.kind not in COMPLEX_KINDS:
        return TRIVIAL_SCHEDULE
    shape = anchor.out_shape
    best = None
    for ty in candidate_triples(shape.height):
        for tx in candidate_triples(shape.width):
            sched = Schedule(ty, tx)
            cycles = costmodel.profile_kernel(graph, kernel, sched, profile).cycles
            key = (cycles, ty, tx)
            if best is None or key < best[0]:
                best = (key, sched)
    return best[1]


def dump_schedules(kernels: list[Kernel], schedules: list[Schedule],
                   strategies: dict[int, int], path: str | Path) -> None:
    """Audit/replay dump: one line per kernel — id, triples, strategy."""
    lines = ["schedules v1"]
    for idx, (kernel, sched) in enumerate(zip(kernels, schedules)):
        ty = ",".join(map(str, sched.tile_y))
        tx = ",".join(map(str, sched.tile_x))
        k = strategies.get(kernel.anchor, 0)
        lines.append(f"{idx} anchor={kernel.anchor} tile_y={ty} tile_x={tx} strategy={k}")
    Path(path).write_text("\n".join(lines) + "\n")
