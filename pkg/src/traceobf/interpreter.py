"""Reference executor: the correctness oracle for obfuscating rewrites.

Everything runs in float32 NCHW. This is deliberately a plain, direct
implementation — it certifies that transformed graphs compute the same
function, it is not the simulated device.
"""

from __future__ import annotations

import numpy as np

from .graph import (
    BN_EPS,
    Graph,
    OperatorKind,
    ShapeMismatch,
    infer_shapes,
    topo_order,
)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct convolution of NCHW ``x`` with a (k1,k2,c,j) kernel."""
    k1, k2, c, j = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: (b, c, h_o, w_o, k1, k2)
    windows = np.lib.stride_tricks.sliding_window_view(x, (k1, k2), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return np.einsum("bcyxuv,uvcj->bjyx", windows, w, optimize=True).astype(np.float32)


def maxpool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    return views[:, :, ::stride, ::stride].max(axis=(4, 5))


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def _eval_node(node, inputs: list[np.ndarray]) -> np.ndarray:
    kind, attrs = node.kind, node.attrs
    if kind is OperatorKind.Conv2D:
        return conv2d(inputs[0], node.weights, attrs["stride"], attrs["padding"])
    if kind is OperatorKind.Linear:
        flat = inputs[0].reshape(inputs[0].shape[0], -1)
        out = flat @ node.weights
        return out.reshape(out.shape[0], out.shape[1], 1, 1).astype(np.float32)
    if kind is OperatorKind.ReLU:
        return np.maximum(inputs[0], 0.0)
    if kind is OperatorKind.BatchNorm:
        scale, shift, mean, var = (node.weights[i].reshape(1, -1, 1, 1) for i in range(4))
        return ((inputs[0] - mean) / np.sqrt(var + BN_EPS) * scale + shift).astype(np.float32)
    if kind is OperatorKind.MaxPool:
        return maxpool(inputs[0], attrs["window"], attrs["stride"])
    if kind is OperatorKind.Add:
        out = inputs[0]
        for extra in inputs[1:]:
            out = out + extra
        if node.weights is not None:
            out = out + node.weights
        return out.astype(np.float32)
    if kind is OperatorKind.Concat:
        return np.concatenate(inputs, axis=1)
    if kind is OperatorKind.Slice:
        return inputs[0][:, attrs["start"]:attrs["stop"]]
    if kind is OperatorKind.SoftMax:
        return softmax(inputs[0])
    raise NotImplementedError(kind)


def execute(graph: Graph, x: np.ndarray) -> np.ndarray:
    """Run the graph on ``x`` and return the output node's tensor."""
    if tuple(x.shape) != graph.input_shape.as_tuple():
        raise ShapeMismatch(-1, f"input shape {x.shape} != {graph.input_shape.as_tuple()}")
    x = np.asarray(x, dtype=np.float32)
    values: dict[int, np.ndarray] = {}
    consumers = {nid: len(graph.successors(nid)) for nid in graph.nodes}
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        inputs = [values[p] for p in node.inputs] if node.inputs else [x]
        values[nid] = _eval_node(node, inputs)
        for p in node.inputs:  # free tensors nothing will read again
            consumers[p] -= 1
            if consumers[p] == 0 and p != graph.output_id:
                del values[p]
    return values[graph.output_id]


def equivalence_check(g1: Graph, g2: Graph, trials: int = 8, seed: int = 0,
                      tol: float = 1e-5) -> tuple[bool, float]:
    """Seeded random-input functional comparison of two graphs.

    Runs ``trials`` standard-normal inputs through both graphs; equivalent
    iff elementwise ``|a-b| <= tol*(1+|b|)`` on every trial. Returns the
    verdict and the worst relative difference seen.
    """
    if g1.input_shape != g2.input_shape:
        raise ShapeMismatch(-1, "input shapes differ")
    out1 = infer_shapes(g1).nodes[g1.output_id].out_shape
    out2 = infer_shapes(g2).nodes[g2.output_id].out_shape
    if out1 != out2:
        raise ShapeMismatch(-1, f"output shapes differ: {out1} vs {out2}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(trials):
        x = rng.standard_normal(g1.input_shape.as_tuple()).astype(np.float32)
        a = execute(g1, x)
        b = execute(g2, x)
        rel = np.abs(a - b) / (1.0 + np.abs(b))
        worst = max(worst, float(rel.max()))
        if not np.all(np.abs(a - b) <= tol * (1.0 + np.abs(b))):
            ok = False
    return ok, worst
