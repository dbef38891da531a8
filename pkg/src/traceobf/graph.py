"""Computational-graph intermediate representation.

Graphs are DAGs of operator nodes over NCHW float32 tensors. Values are
treated as immutable after construction: every rewrite builds a new Graph,
so graphs can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

WEIGHT_MAGIC = b"OBFW0001"
BN_EPS = 1e-5


class OperatorKind(Enum):
    Conv2D = "Conv2D"
    Linear = "Linear"
    ReLU = "ReLU"
    BatchNorm = "BatchNorm"
    MaxPool = "MaxPool"
    Add = "Add"
    Concat = "Concat"
    Slice = "Slice"
    SoftMax = "SoftMax"


# Operators that receive a ground-truth label in the extracted sequence.
COMPLEX_KINDS = frozenset(
    {OperatorKind.Conv2D, OperatorKind.Linear, OperatorKind.MaxPool, OperatorKind.SoftMax}
)

# Operators a kernel may absorb during fusion.
INJECTIVE_KINDS = frozenset({OperatorKind.ReLU, OperatorKind.BatchNorm, OperatorKind.Add})


@dataclass(frozen=True)
class TensorShape:
    batch: int
    channels: int
    height: int = 1
    width: int = 1

    def __post_init__(self):
        if min(self.batch, self.channels, self.height, self.width) < 1:
            raise ValueError(f"shape components must be >= 1, got {self}")

    @property
    def numel(self) -> int:
        return self.batch * self.channels * self.height * self.width

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)


class GraphError(Exception):
    """Base class for structural graph errors."""


class CycleDetected(GraphError):
    pass


class ShapeMismatch(GraphError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


@dataclass
class Node:
    """One operator. ``attrs`` carries kind-specific attributes:

    Conv2D:  k1, k2, c, j, stride, padding
    Linear:  c (flattened input features), j
    MaxPool: window, stride
    Concat:  axis (must be 1)
    Slice:   axis (must be 1), start, stop
    Add:     none (sums all inputs plus the optional stored constant)

    ``weights`` holds the Conv2D (k1,k2,c,j) / Linear (c,j) weight tensor,
    the (4,c) [scale, shift, mean, var] rows for BatchNorm, or the constant
    operand of a dummy Add. A node with an empty ``inputs`` list reads the
    graph input.
    """

    id: int
    kind: OperatorKind
    attrs: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    inputs: list[int] = field(default_factory=list)
    out_shape: TensorShape | None = None

    def copy(self) -> "Node":
        return Node(self.id, self.kind, dict(self.attrs), self.weights,
                    list(self.inputs), self.out_shape)

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        if (self.id, self.kind, self.attrs, self.inputs, self.out_shape) != (
                other.id, other.kind, other.attrs, other.inputs, other.out_shape):
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        return self.weights is None or np.array_equal(self.weights, other.weights)


@dataclass
class Graph:
    nodes: dict[int, Node]
    output_id: int
    input_shape: TensorShape

    def __post_init__(self):
        for nid, node in self.nodes.items():
            if nid != node.id:
                raise GraphError(f"node keyed {nid} carries id {node.id}")

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def successors(self, nid: int) -> list[int]:
        return [n.id for n in self.nodes.values() if nid in n.inputs]

    def next_id(self) -> int:
        return max(self.nodes) + 1 if self.nodes else 0

    def copy(self) -> "Graph":
        return Graph({nid: n.copy() for nid, n in self.nodes.items()},
                     self.output_id, self.input_shape)

    def complex_layers(self) -> list[int]:
        """Ids of complex operators in deterministic topological order."""
        return [nid for nid in topo_order(self) if self.nodes[nid].kind in COMPLEX_KINDS]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.output_id == other.output_id
                and self.input_shape == other.input_shape
                and self.nodes == other.nodes)


def topo_order(graph: Graph) -> list[int]:
    """Topological order with ties broken by ascending node id."""
    indeg = {nid: 0 for nid in graph.nodes}
    for node in graph.nodes.values():
        for pred in node.inputs:
            if pred in graph.nodes:
                indeg[node.id] += 1
    ready = sorted(nid for nid, d in indeg.items() if d == 0)
    order: list[int] = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        changed = False
        for succ in graph.successors(nid):
            indeg[succ] -= 1
            if indeg[succ] == 0:
                ready.append(succ)
                changed = True
        if changed:
            ready.sort()
    if len(order) != len(graph.nodes):
        raise CycleDetected("graph contains a cycle")
    return order


def _conv_out(extent: int, kernel: int, pad: int, stride: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _node_out_shape(graph: Graph, node: Node, in_shapes: list[TensorShape]) -> TensorShape:
    kind, attrs = node.kind, node.attrs
    if kind is OperatorKind.Conv2D:
        (s,) = in_shapes
        if s.channels != attrs["c"]:
            raise ShapeMismatch(node.id, f"expects {attrs['c']} channels, got {s.channels}")
        h = _conv_out(s.height, attrs["k1"], attrs["padding"], attrs["stride"])
        w = _conv_out(s.width, attrs["k2"], attrs["padding"], attrs["stride"])
        if h < 1 or w < 1:
            raise ShapeMismatch(node.id, f"kernel {attrs['k1']}x{attrs['k2']} larger than padded input")
        return TensorShape(s.batch, attrs["j"], h, w)
    if kind is OperatorKind.Linear:
        (s,) = in_shapes
        flat = s.channels * s.height * s.width
        if flat != attrs["c"]:
            raise ShapeMismatch(node.id, f"expects {attrs['c']} flattened features, got {flat}")
        return TensorShape(s.batch, attrs["j"], 1, 1)
    if kind is OperatorKind.MaxPool:
        (s,) = in_shapes
        h = (s.height - attrs["window"]) // attrs["stride"] + 1
        w = (s.width - attrs["window"]) // attrs["stride"] + 1
        if h < 1 or w < 1:
            raise ShapeMismatch(node.id, "pooling window larger than input")
        return TensorShape(s.batch, s.channels, h, w)
    if kind is OperatorKind.Concat:
        if attrs.get("axis", 1) != 1:
            raise ShapeMismatch(node.id, "only channel-axis concat is supported")
        base = in_shapes[0]
        for s in in_shapes[1:]:
            if (s.batch, s.height, s.width) != (base.batch, base.height, base.width):
                raise ShapeMismatch(node.id, "concat inputs disagree on non-channel dims")
        return TensorShape(base.batch, sum(s.channels for s in in_shapes),
                           base.height, base.width)
    if kind is OperatorKind.Slice:
        (s,) = in_shapes
        if attrs.get("axis", 1) != 1:
            raise ShapeMismatch(node.id, "only channel-axis slice is supported")
        start, stop = attrs["start"], attrs["stop"]
        if not (0 <= start < stop <= s.channels):
            raise ShapeMismatch(node.id, f"slice [{start}:{stop}] out of {s.channels} channels")
        return TensorShape(s.batch, stop - start, s.height, s.width)
    if kind is OperatorKind.Add:
        base = in_shapes[0]
        for s in in_shapes[1:]:
            if s != base:
                raise ShapeMismatch(node.id, "add inputs disagree on shape")
        if node.weights is not None and tuple(node.weights.shape) != base.as_tuple():
            raise ShapeMismatch(node.id, "add constant shape disagrees with inputs")
        return base
    # ReLU / BatchNorm / SoftMax are shape-preserving.
    (s,) = in_shapes
    if kind is OperatorKind.BatchNorm:
        if node.weights is None or node.weights.shape != (4, s.channels):
            raise ShapeMismatch(node.id, f"batchnorm needs (4,{s.channels}) parameters")
    return s


def infer_shapes(graph: Graph) -> Graph:
    """Return a copy of ``graph`` with every node's out_shape filled in.

    Idempotent; raises ShapeMismatch on the first inconsistent node.
    """
    out = graph.copy()
    shapes: dict[int, TensorShape] = {}
    for nid in topo_order(out):
        node = out.nodes[nid]
        if node.inputs:
            missing = [p for p in node.inputs if p not in shapes]
            if missing:
                raise ShapeMismatch(nid, f"predecessors {missing} missing")
            in_shapes = [shapes[p] for p in node.inputs]
        else:
            in_shapes = [out.input_shape]
        shape = _node_out_shape(out, node, in_shapes)
        node.out_shape = shape
        shapes[nid] = shape
    return out


@dataclass(frozen=True)
class Violation:
    code: str
    node_id: int
    detail: str

    def __str__(self):
        return f"{self.code}(node {self.node_id}): {self.detail}"


def validate(graph: Graph) -> list[Violation]:
    """Structural checks; an empty list means the graph is well formed.

    Codes: Cycle, DanglingInput, ChannelMismatch, MissingWeights, BadAttr,
    ShapeError, BadOutput.
    """
    violations: list[Violation] = []
    for node in graph.nodes.values():
        for pred in node.inputs:
            if pred not in graph.nodes:
                violations.append(Violation("DanglingInput", node.id,
                                            f"references missing node {pred}"))
    if graph.output_id not in graph.nodes:
        violations.append(Violation("BadOutput", graph.output_id, "output node missing"))
    if violations:
        return violations

    try:
        topo_order(graph)
    except CycleDetected:
        return [Violation("Cycle", -1, "graph contains a cycle")]

    for node in graph.nodes.values():
        kind, attrs = node.kind, node.attrs
        if kind is OperatorKind.Conv2D:
            if attrs.get("stride") not in (1, 2):
                violations.append(Violation("BadAttr", node.id,
                                            f"stride {attrs.get('stride')} not in {{1,2}}"))
            if attrs.get("padding", 0) < 0:
                violations.append(Violation("BadAttr", node.id, "negative padding"))
            if node.weights is None:
                violations.append(Violation("MissingWeights", node.id, "Conv2D has no weights"))
            else:
                want = (attrs["k1"], attrs["k2"], attrs["c"], attrs["j"])
                if node.weights.shape != want:
                    violations.append(Violation("ChannelMismatch", node.id,
                                                f"weight shape {node.weights.shape} != {want}"))
        elif kind is OperatorKind.Linear:
            if node.weights is None:
                violations.append(Violation("MissingWeights", node.id, "Linear has no weights"))
            elif node.weights.shape != (attrs["c"], attrs["j"]):
                violations.append(Violation("ChannelMismatch", node.id,
                                            f"weight shape {node.weights.shape} != ({attrs['c']},{attrs['j']})"))
        elif kind is OperatorKind.MaxPool:
            if attrs.get("stride") not in (1, 2):
                violations.append(Violation("BadAttr", node.id,
                                            f"stride {attrs.get('stride')} not in {{1,2}}"))
        elif kind is OperatorKind.BatchNorm and node.weights is None:
            violations.append(Violation("MissingWeights", node.id, "BatchNorm has no parameters"))
    if violations:
        return violations

    try:
        annotated = infer_shapes(graph)
    except ShapeMismatch as exc:
        return [Violation("ShapeError" if "channels" not in str(exc) else "ChannelMismatch",
                          exc.node_id, str(exc))]

    # Channel agreement between Conv2D attrs and the producing node.
    for node in annotated.nodes.values():
        if node.kind is OperatorKind.Conv2D and node.inputs:
            pred_shape = annotated.nodes[node.inputs[0]].out_shape
            if pred_shape.channels != node.attrs["c"]:
                violations.append(Violation("ChannelMismatch", node.id,
                                            f"fed {pred_shape.channels} channels, expects {node.attrs['c']}"))
    return violations


def label_sequence(graph: Graph) -> list[OperatorKind]:
    """Project the topological node order onto the complex operator subset."""
    return [graph.nodes[nid].kind for nid in topo_order(graph)
            if graph.nodes[nid].kind in COMPLEX_KINDS]


# ---------------------------------------------------------------------------
# Serialization: one text record per node plus a float32 weight sidecar.
# ---------------------------------------------------------------------------

_ATTR_TYPES = {"k1": int, "k2": int, "c": int, "j": int, "stride": int, "padding": int,
               "window": int, "axis": int, "start": int, "stop": int}


def _format_attrs(attrs: dict) -> str:
    return ",".join(f"{k}={attrs[k]}" for k in sorted(attrs))


def _parse_attrs(text: str) -> dict:
    attrs = {}
    if text:
        for item in text.split(","):
            key, value = item.split("=", 1)
            attrs[key] = _ATTR_TYPES.get(key, str)(value)
    return attrs


def dump_graph(graph: Graph, path: str | Path) -> None:
    """Write ``path`` (text) and its ``.weights`` sidecar (float32 blobs)."""
    path = Path(path)
    weights_path = path.with_suffix(".weights")
    lines = ["graph v1",
             f"input_shape {' '.join(map(str, graph.input_shape.as_tuple()))}",
             f"output {graph.output_id}",
             f"weights_file {weights_path.name}"]
    blobs: list[np.ndarray] = []
    offset = 0
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        ref = "-"
        if node.weights is not None:
            blob = np.ascontiguousarray(node.weights, dtype="<f4")
            dims = "x".join(map(str, blob.shape))
            ref = f"w@{offset}:{dims}"
            blobs.append(blob)
            offset += blob.size
        inputs = ",".join(map(str, node.inputs)) if node.inputs else "-"
        lines.append(f"node {nid} {node.kind.value} inputs={inputs} "
                     f"attrs={_format_attrs(node.attrs)} weights={ref}")
    path.write_text("\n".join(lines) + "\n")
    with open(weights_path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        for blob in blobs:
            fh.write(blob.tobytes())


class GraphParseError(Exception):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def load_graph(path: str | Path) -> Graph:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "graph v1":
        raise GraphParseError(path, 1, "expected 'graph v1' header")
    input_shape = None
    output_id = None
    weights_file = None
    nodes: dict[int, Node] = {}
    pending: list[tuple[int, str]] = []  # (node id, weight ref) to resolve
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        try:
            if fields[0] == "input_shape":
                input_shape = TensorShape(*map(int, fields[1:5]))
            elif fields[0] == "output":
                output_id = int(fields[1])
            elif fields[0] == "weights_file":
                weights_file = fields[1]
            elif fields[0] == "node":
                nid = int(fields[1])
                kind = OperatorKind(fields[2])
                parts = dict(f.split("=", 1) for f in fields[3:])
                inputs = [] if parts["inputs"] == "-" else [int(x) for x in parts["inputs"].split(",")]
                attrs = _parse_attrs(parts.get("attrs", ""))
                nodes[nid] = Node(nid, kind, attrs, None, inputs)
                if parts["weights"] != "-":
                    pending.append((nid, parts["weights"]))
            else:
                raise ValueError(f"unknown record '{fields[0]}'")
        except (ValueError, KeyError, IndexError) as exc:
            raise GraphParseError(path, lineno, str(exc)) from exc
    if input_shape is None or output_id is None:
        raise GraphParseError(path, len(lines), "missing input_shape or output record")

    if pending:
        if weights_file is None:
            raise GraphParseError(path, 1, "weight references without weights_file record")
        with open(path.parent / weights_file, "rb") as fh:
            magic = fh.read(8)
            if magic != WEIGHT_MAGIC:
                raise GraphParseError(path, 1, f"bad weight sidecar magic {magic!r}")
            data = np.frombuffer(fh.read(), dtype="<f4")
        for nid, ref in pending:
            spec, dims = ref[2:].split(":")
            shape = tuple(int(d) for d in dims.split("x"))
            start = int(spec)
            count = int(np.prod(shape))
            nodes[nid].weights = data[start:start + count].reshape(shape).copy()
    return Graph(nodes, output_id, input_shape)
