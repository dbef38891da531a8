"""Function-preserving obfuscating rewrites ("knobs").

Six graph-level knobs: layer widening, kernel widening, layer branching,
layer deepening, layer skipping and dummy addition. Each takes a graph and
returns a new graph computing the same function; ``apply_plan`` composes
them for a whole obfuscation plan and also collects the backend directives
(fusion limits, schedule strategies) the plan carries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import COMPLEX_KINDS, Graph, Node, OperatorKind, infer_shapes

BRANCH_MODES = ("none", "in2", "in4", "out2", "out4")
WIDEN_FACTORS = (1.0, 1.0625, 1.125, 1.25, 1.5)

# Ops a widening pass may walk through while locating the consumer layer.
_CHANNEL_CHAIN_KINDS = frozenset(
    {OperatorKind.ReLU, OperatorKind.BatchNorm, OperatorKind.MaxPool, OperatorKind.Add}
)


class TransformError(Exception):
    pass


class NotWidenable(TransformError):
    pass


class NotDivisible(TransformError):
    pass


class NoActivation(TransformError):
    pass


def _round(x: float) -> int:
    return int(np.floor(x + 0.5))


def _sole_successor(graph: Graph, nid: int) -> int | None:
    succ = graph.successors(nid)
    return succ[0] if len(succ) == 1 else None


def _rewire(graph: Graph, old: int, new: int, skip: set[int] = frozenset()) -> None:
    """Point every consumer of ``old`` (except ``skip``) at ``new``."""
    for node in graph.nodes.values():
        if node.id == new or node.id in skip:
            continue
        node.inputs = [new if p == old else p for p in node.inputs]
    if graph.output_id == old:
        graph.output_id = new


def _activation_site(graph: Graph, nid: int) -> int | None:
    """Follow BatchNorm links from ``nid`` to its ReLU, if one exists."""
    cur = nid
    while True:
        nxt = _sole_successor(graph, cur)
        if nxt is None:
            return None
        kind = graph.nodes[nxt].kind
        if kind is OperatorKind.ReLU:
            return nxt
        if kind is not OperatorKind.BatchNorm:
            return None
        cur = nxt


# ---------------------------------------------------------------------------
# Layer widening
# ---------------------------------------------------------------------------

def _widen_chain(graph: Graph, layer_id: int) -> list[int]:
    """Nodes between the widened layer and its consumer layer, inclusive of
    the consumer. Raises NotWidenable when no adjustable consumer exists."""
    chain = []
    cur = layer_id
    while True:
        nxt = _sole_successor(graph, cur)
        if nxt is None:
            reason = "fan-out" if graph.successors(cur) else "feeds the graph output"
            raise NotWidenable(f"layer {layer_id}: {reason} before a consumer layer")
        node = graph.nodes[nxt]
        if node.kind in (OperatorKind.Conv2D, OperatorKind.Linear):
            chain.append(nxt)
            return chain
        if node.kind not in _CHANNEL_CHAIN_KINDS:
            raise NotWidenable(f"layer {layer_id}: consumer chain hits {node.kind.value}")
        if node.kind is OperatorKind.Add and len(node.inputs) > 1:
            raise NotWidenable(f"layer {layer_id}: consumer chain hits a residual Add")
        chain.append(nxt)
        cur = nxt


def widenable(graph: Graph, layer_id: int) -> bool:
    node = graph.nodes[layer_id]
    if node.kind not in (OperatorKind.Conv2D, OperatorKind.Linear):
        return False
    try:
        _widen_chain(graph, layer_id)
        return True
    except NotWidenable:
        return False


def widen_layer(graph: Graph, layer_id: int, factor: float) -> Graph:
    """Grow a layer's output channels to round(factor*j) by duplicating the
    first channels, and rescale the consumer layer so its output is unchanged
    (original channel and duplicate each carry half the original weight)."""
    layer = graph.nodes[layer_id]
    if layer.kind not in (OperatorKind.Conv2D, OperatorKind.Linear):
        raise NotWidenable(f"layer {layer_id} is {layer.kind.value}")
    j = layer.attrs["j"]
    j_new = _round(factor * j)
    if j_new < j:
        raise NotWidenable(f"factor {factor} would shrink the layer")
    delta = j_new - j
    if delta == 0:
        return graph

    annotated = infer_shapes(graph)
    chain = _widen_chain(graph, layer_id)
    out = graph.copy()

    # Widen the producer: appended output channels duplicate the first delta.
    w = out.nodes[layer_id].weights
    out.nodes[layer_id].weights = np.concatenate([w, w[..., :delta]], axis=-1)
    out.nodes[layer_id].attrs["j"] = j_new

    # Per-channel parameters along the chain get their rows duplicated too.
    for nid in chain[:-1]:
        node = out.nodes[nid]
        if node.kind is OperatorKind.BatchNorm:
            node.weights = np.concatenate([node.weights, node.weights[:, :delta]], axis=1)
        elif node.kind is OperatorKind.Add and node.weights is not None:
            node.weights = np.concatenate(
                [node.weights, node.weights[:, :delta]], axis=1)

    # Compensate the consumer: original channel k<delta and its duplicate at
    # j+k each contribute half of the original input weight.
    consumer = out.nodes[chain[-1]]
    cw = consumer.weights
    if consumer.kind is OperatorKind.Conv2D:
        cw = cw.copy()
        cw[:, :, :delta, :] *= 0.5
        consumer.weights = np.concatenate([cw, cw[:, :, :delta, :]], axis=2)
        consumer.attrs["c"] = j_new
    else:
        # Linear consumes the flattened producer output; rows group by channel.
        feed_shape = annotated.nodes[consumer.inputs[0]].out_shape
        hw = feed_shape.height * feed_shape.width
        rows = cw.reshape(j, hw, cw.shape[1]).copy()
        rows[:delta] *= 0.5
        stacked = np.concatenate([rows, rows[:delta]], axis=0)
        consumer.weights = stacked.reshape(j_new * hw, cw.shape[1])
        consumer.attrs["c"] = j_new * hw
    return out


# ---------------------------------------------------------------------------
# Layer branching
# ---------------------------------------------------------------------------

def branch_layer(graph: Graph, layer_id: int, mode: str, parts: int) -> Graph:
    """Split a Conv2D/Linear into ``parts`` balanced sub-layers.

    Output-wise: weights split along j, results concatenated. Input-wise:
    the incoming activation is channel-sliced, partial results summed.
    """
    if parts not in (2, 4):
        raise NotDivisible(f"parts must be 2 or 4, got {parts}")
    layer = graph.nodes[layer_id]
    if layer.kind not in (OperatorKind.Conv2D, OperatorKind.Linear):
        raise TransformError(f"cannot branch {layer.kind.value}")
    out = graph.copy()
    nid = out.next_id()
    is_conv = layer.kind is OperatorKind.Conv2D

    if mode == "output":
        j = layer.attrs["j"]
        if j % parts:
            raise NotDivisible(f"j={j} not divisible by {parts}")
        step = j // parts
        part_ids = []
        for i in range(parts):
            w = layer.weights[..., i * step:(i + 1) * step]
            attrs = dict(layer.attrs, j=step)
            out.nodes[nid] = Node(nid, layer.kind, attrs, w, list(layer.inputs))
            part_ids.append(nid)
            nid += 1
        combiner = Node(nid, OperatorKind.Concat, {"axis": 1}, None, part_ids)
    elif mode == "input":
        if is_conv:
            ch = layer.attrs["c"]
            hw = 1
        else:
            # Slice channels of the producer feeding the flattened Linear.
            feed = infer_shapes(graph).nodes[layer.inputs[0]].out_shape if layer.inputs \
                else graph.input_shape
            ch = feed.channels
            hw = feed.height * feed.width
        if ch % parts:
            raise NotDivisible(f"input channels {ch} not divisible by {parts}")
        step = ch // parts
        part_ids = []
        for i in range(parts):
            slc = Node(nid, OperatorKind.Slice,
                       {"axis": 1, "start": i * step, "stop": (i + 1) * step},
                       None, list(layer.inputs))
            out.nodes[nid] = slc
            nid += 1
            if is_conv:
                w = layer.weights[:, :, i * step:(i + 1) * step, :]
                attrs = dict(layer.attrs, c=step)
            else:
                rows = layer.weights.reshape(ch, hw, layer.attrs["j"])
                w = rows[i * step:(i + 1) * step].reshape(step * hw, layer.attrs["j"])
                attrs = dict(layer.attrs, c=step * hw)
            out.nodes[nid] = Node(nid, layer.kind, attrs, w, [slc.id])
            part_ids.append(nid)
            nid += 1
        combiner = Node(nid, OperatorKind.Add, {}, None, part_ids)
    else:
        raise TransformError(f"unknown branch mode {mode!r}")

    out.nodes[combiner.id] = combiner
    _rewire(out, layer_id, combiner.id, skip=set(part_ids) | {combiner.id})
    del out.nodes[layer_id]
    return out


# ---------------------------------------------------------------------------
# Dummy addition / deepening / skipping / kernel widening
# ---------------------------------------------------------------------------

def _insertion_point(graph: Graph, layer_id: int) -> int:
    """The layer's activation output if it has one, else the layer itself."""
    act = _activation_site(graph, layer_id)
    return act if act is not None else layer_id


def add_dummy(graph: Graph, layer_id: int, count: int) -> Graph:
    """Chain ``count`` additions of an all-zero constant after the layer's
    activation output."""
    if count <= 0:
        return graph
    out = graph.copy()
    shapes = infer_shapes(graph)
    site = _insertion_point(out, layer_id)
    shape = shapes.nodes[site].out_shape
    zeros = np.zeros(shape.as_tuple(), dtype=np.float32)
    prev = site
    new_ids = []
    for _ in range(count):
        nid = out.next_id()
        out.nodes[nid] = Node(nid, OperatorKind.Add, {}, zeros, [prev])
        new_ids.append(nid)
        prev = nid
    _rewire(out, site, prev, skip=set(new_ids))
    return out


def channel_identity_kernel(channels: int) -> np.ndarray:
    """1x1 kernel that maps every channel to itself: U[0,0,d,m] = (d==m)."""
    k = np.zeros((1, 1, channels, channels), dtype=np.float32)
    k[0, 0] = np.eye(channels, dtype=np.float32)
    return k


def deepen_layer(graph: Graph, layer_id: int,
                 kernel_init=channel_identity_kernel) -> Graph:
    """Insert an identity 1x1 Conv2D plus ReLU after the layer's ReLU.

    Requires the layer to be followed by a ReLU (directly or via BatchNorm):
    the rewrite relies on ReLU being idempotent. ``kernel_init`` exists so
    tests can demonstrate that non-identity initializations break function
    preservation.
    """
    act = _activation_site(graph, layer_id)
    if act is None:
        raise NoActivation(f"layer {layer_id} has no trailing ReLU")
    out = graph.copy()
    ch = infer_shapes(graph).nodes[act].out_shape.channels
    conv_id = out.next_id()
    out.nodes[conv_id] = Node(conv_id, OperatorKind.Conv2D,
                              {"k1": 1, "k2": 1, "c": ch, "j": ch, "stride": 1, "padding": 0},
                              kernel_init(ch), [act])
    relu_id = conv_id + 1
    out.nodes[relu_id] = Node(relu_id, OperatorKind.ReLU, {}, None, [conv_id])
    _rewire(out, act, relu_id, skip={conv_id, relu_id})
    return out


def skip_layer(graph: Graph, layer_id: int) -> Graph:
    """Add a zero-initialized 1x1 Conv2D around the layer's activation output
    and sum it back in: U*X + X = X for all-zero U."""
    out = graph.copy()
    site = _insertion_point(out, layer_id)
    ch = infer_shapes(graph).nodes[site].out_shape.channels
    conv_id = out.next_id()
    out.nodes[conv_id] = Node(conv_id, OperatorKind.Conv2D,
                              {"k1": 1, "k2": 1, "c": ch, "j": ch, "stride": 1, "padding": 0},
                              np.zeros((1, 1, ch, ch), dtype=np.float32), [site])
    add_id = conv_id + 1
    out.nodes[add_id] = Node(add_id, OperatorKind.Add, {}, None, [site, conv_id])
    _rewire(out, site, add_id, skip={conv_id, add_id})
    return out


def widen_kernel(graph: Graph, layer_id: int, steps: int) -> Graph:
    """Zero-pad a Conv2D kernel by ``steps`` rings (k -> k+2*steps) and bump
    the layer padding to match, leaving the output unchanged."""
    layer = graph.nodes[layer_id]
    if layer.kind is not OperatorKind.Conv2D:
        raise TransformError(f"cannot kernel-widen {layer.kind.value}")
    if steps <= 0:
        return graph
    out = graph.copy()
    node = out.nodes[layer_id]
    node.weights = np.pad(node.weights, ((steps, steps), (steps, steps), (0, 0), (0, 0)))
    node.attrs = dict(node.attrs,
                      k1=node.attrs["k1"] + 2 * steps,
                      k2=node.attrs["k2"] + 2 * steps,
                      padding=node.attrs["padding"] + steps)
    return out


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanEntry:
    """Per-layer knob settings. Sequence knobs: branching, deepen, skip,
    fusion_limit. Dimension knobs: widen_factor, kernel_widen, dummy_count,
    schedule_strategy. Defaults are the identity setting."""

    layer_id: int
    branching: str = "none"
    deepen: int = 0
    skip: int = 0
    widen_factor: float = 1.0
    kernel_widen: int = 0
    dummy_count: int = 0
    fusion_limit: int = -1  # -1 = unlimited
    schedule_strategy: int = 0


SEQUENCE_KNOBS = ("branching", "fusion_limit", "deepen", "skip")
DIMENSION_KNOBS = ("widen_factor", "kernel_widen", "dummy_count", "schedule_strategy")


@dataclass(frozen=True)
class ObfuscationPlan:
    mode: str  # "sequence" or "dimension"
    entries: tuple[PlanEntry, ...]

    def __post_init__(self):
        if self.mode not in ("sequence", "dimension"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def entry_for(self, layer_id: int) -> PlanEntry:
        for e in self.entries:
            if e.layer_id == layer_id:
                return e
        raise KeyError(layer_id)


def identity_plan(graph: Graph, mode: str = "sequence") -> ObfuscationPlan:
    return ObfuscationPlan(mode, tuple(PlanEntry(lid) for lid in graph.complex_layers()))


@dataclass
class BackendDirectives:
    """Fusion limits and schedule strategies keyed by post-transform complex
    node ids; a branched layer maps to all of its sub-layer nodes."""

    fusion_limits: dict[int, int] = field(default_factory=dict)
    schedule_strategies: dict[int, int] = field(default_factory=dict)


class PlanApplicationError(TransformError):
    """Aggregates per-knob failures with layer attribution."""

    def __init__(self, failures: list[tuple[int, str, str]]):
        self.failures = failures
        lines = "; ".join(f"layer {lid} {knob}: {msg}" for lid, knob, msg in failures)
        super().__init__(lines)


def apply_plan(graph: Graph, plan: ObfuscationPlan) -> tuple[Graph, BackendDirectives]:
    """Apply every knob of ``plan`` to the vanilla graph.

    Knobs run in a fixed order — widening, kernel widening, branching,
    deepening, skipping, dummy addition — one global pass per knob over the
    layers in topological order, and never touch transform-created nodes.
    """
    vanilla_layers = graph.complex_layers()
    plan_ids = [e.layer_id for e in plan.entries]
    if sorted(plan_ids) != sorted(vanilla_layers):
        raise PlanApplicationError(
            [(-1, "plan", f"entries {sorted(plan_ids)} != complex layers {sorted(vanilla_layers)}")])

    out = graph
    failures: list[tuple[int, str, str]] = []
    # Where each vanilla layer's output now lives (branching moves it to the
    # combiner node); used by the activation-site knobs and the directives.
    anchor = {lid: lid for lid in vanilla_layers}
    # Complex nodes carrying each vanilla layer (sub-layers after a branch).
    carriers = {lid: [lid] for lid in vanilla_layers}

    def attempt(lid, knob, fn):
        nonlocal out
        try:
            out = fn(out)
        except TransformError as exc:
            failures.append((lid, knob, str(exc)))

    for entry in plan.entries:
        if entry.widen_factor != 1.0:
            attempt(entry.layer_id, "widen",
                    lambda g, e=entry: widen_layer(g, e.layer_id, e.widen_factor))
    for entry in plan.entries:
        if entry.kernel_widen:
            attempt(entry.layer_id, "kernel_widen",
                    lambda g, e=entry: widen_kernel(g, e.layer_id, e.kernel_widen))
    for entry in plan.entries:
        if entry.branching != "none":
            mode = "input" if entry.branching.startswith("in") else "output"
            parts = int(entry.branching[-1])
            before = set(out.nodes)

            def run_branch(g, e=entry, m=mode, p=parts):
                return branch_layer(g, e.layer_id, m, p)

            attempt(entry.layer_id, "branch", run_branch)
            created = sorted(set(out.nodes) - before)
            if created:
                anchor[entry.layer_id] = created[-1]  # the combiner
                carriers[entry.layer_id] = [
                    nid for nid in created if out.nodes[nid].kind in COMPLEX_KINDS]
    for entry in plan.entries:
        if entry.deepen:
            attempt(entry.layer_id, "deepen",
                    lambda g, e=entry: deepen_layer(g, anchor[e.layer_id]))
    for entry in plan.entries:
        if entry.skip:
            attempt(entry.layer_id, "skip",
                    lambda g, e=entry: skip_layer(g, anchor[e.layer_id]))
    for entry in plan.entries:
        if entry.dummy_count:
            attempt(entry.layer_id, "dummy",
                    lambda g, e=entry: add_dummy(g, anchor[e.layer_id], e.dummy_count))

    if failures:
        raise PlanApplicationError(failures)

    directives = BackendDirectives()
    for entry in plan.entries:
        for nid in carriers[entry.layer_id]:
            if entry.fusion_limit >= 0:
                directives.fusion_limits[nid] = entry.fusion_limit
            if entry.schedule_strategy:
                directives.schedule_strategies[nid] = entry.schedule_strategy
    return out, directives


# ---------------------------------------------------------------------------
# Plan serialization: one record per vanilla complex layer.
# ---------------------------------------------------------------------------

_PLAN_FIELDS = ("layer_id", "branching", "deepen", "skip", "widen_factor",
                "kernel_widen", "dummy_count", "fusion_limit", "schedule_strategy")


def dump_plan(plan: ObfuscationPlan, path: str | Path) -> None:
    lines = [f"plan v1 mode={plan.mode}", " ".join(_PLAN_FIELDS)]
    for e in plan.entries:
        lines.append(" ".join(str(getattr(e, f)) for f in _PLAN_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def load_plan(path: str | Path) -> ObfuscationPlan:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("plan v1 mode="):
        raise ValueError(f"{path}: expected 'plan v1 mode=...' header")
    mode = lines[0].split("mode=", 1)[1]
    entries = []
    for raw in lines[2:]:
        if not raw.strip():
            continue
        vals = raw.split()
        entries.append(PlanEntry(
            layer_id=int(vals[0]), branching=vals[1], deepen=int(vals[2]),
            skip=int(vals[3]), widen_factor=float(vals[4]), kernel_widen=int(vals[5]),
            dummy_count=int(vals[6]), fusion_limit=int(vals[7]),
            schedule_strategy=int(vals[8])))
    return ObfuscationPlan(mode, tuple(entries))
