"""Trusted model evaluation: plain topological interpretation, no rewrites.

`execute_reference` evaluates at float64 and is the ground truth the
differential oracle compares against.  The same walker also powers the
optimizing executor (at reduced precision and with a cache hook), so the two
sides share kernel semantics and differ only where the optimizer is supposed
to differ.
"""

from __future__ import annotations

from enum import Enum
from typing import Mapping

import numpy as np

from .graphs import (
    Edge,
    GraphModel,
    MERGE_BN_EPSILON,
    OperatorKind,
    Padding,
    PASSTHROUGH_KINDS,
    ShapeError,
    canonical_topo_vertices,
    group_in_edges,
    infer_shapes,
    plan_incoming,
)
from .tensors import DType, Tensor, quantize_array


class ExecErrorKind(Enum):
    SHAPE_MISMATCH = "shape_mismatch"
    UNSUPPORTED_DTYPE = "unsupported_dtype"
    NUMERIC_DOMAIN = "numeric_domain"
    INTERNAL_INVARIANT = "internal_invariant"


class ExecError(Exception):
    def __init__(self, kind: ExecErrorKind, edge_id: int | None, message: str) -> None:
        super().__init__(f"{kind.value} at edge {edge_id}: {message}")
        self.kind = kind
        self.edge_id = edge_id
        self.message = message




def _same_pad(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int],
              fill: float = 0.0) -> np.ndarray:
    _, _, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh, ow = -(-h // sh), -(-w // sw)
    ph = max((oh - 1) * sh + kh - h, 0)
    pw = max((ow - 1) * sw + kw - w, 0)
    if ph == 0 and pw == 0:
        return x
    return np.pad(
        x,
        ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)),
        constant_values=fill,
    )


def _window_view(x: np.ndarray, i: int, j: int, out_hw: tuple[int, int],
                 stride: tuple[int, int]) -> np.ndarray:
    oh, ow = out_hw
    sh, sw = stride
    return x[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw]


def _conv2d(x: np.ndarray, weight: np.ndarray, stride: tuple[int, int],
            padding: Padding) -> np.ndarray:
    cout, _, kh, kw = weight.shape
    if padding is Padding.SAME:
        x = _same_pad(x, (kh, kw), stride)
    n, _, h, w = x.shape
    oh = (h - kh) // stride[0] + 1
    ow = (w - kw) // stride[1] + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window_view(x, i, j, (oh, ow), stride)
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, i, j])
    return out


def _depthwise_conv2d(x: np.ndarray, weight: np.ndarray, stride: tuple[int, int],
                      padding: Padding) -> np.ndarray:
    _, _, kh, kw = weight.shape
    if padding is Padding.SAME:
        x = _same_pad(x, (kh, kw), stride)
    n, c, h, w = x.shape
    oh = (h - kh) // stride[0] + 1
    ow = (w - kw) // stride[1] + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window_view(x, i, j, (oh, ow), stride)
            out += patch * weight[:, 0, i, j][None, :, None, None]
    return out


def _max_pool(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int],
              padding: Padding) -> np.ndarray:
    kh, kw = kernel
    if padding is Padding.SAME:
        x = _same_pad(x, kernel, stride, fill=-np.inf)
    n, c, h, w = x.shape
    oh = (h - kh) // stride[0] + 1
    ow = (w - kw) // stride[1] + 1
    out = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            np.maximum(out, _window_view(x, i, j, (oh, ow), stride), out=out)
    return out


def _average_pool(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int],
                  padding: Padding) -> np.ndarray:
    kh, kw = kernel
    if padding is Padding.SAME:
        ones = np.ones_like(x)
        x = _same_pad(x, kernel, stride)
        ones = _same_pad(ones, kernel, stride)
    else:
        ones = None
    n, c, h, w = x.shape
    oh = (h - kh) // stride[0] + 1
    ow = (w - kw) // stride[1] + 1
    total = np.zeros((n, c, oh, ow), dtype=x.dtype)
    count = np.zeros((n, c, oh, ow), dtype=x.dtype) if ones is not None else None
    for i in range(kh):
        for j in range(kw):
            total += _window_view(x, i, j, (oh, ow), stride)
            if count is not None:
                count += _window_view(ones, i, j, (oh, ow), stride)
    if count is not None:
        return total / count  # padding elements do not enter the mean
    return total / x.dtype.type(kh * kw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _softmax_channels(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def _batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                mean: np.ndarray, var: np.ndarray, eps: float) -> np.ndarray:
    return gamma * (x - mean) / np.sqrt(var + x.dtype.type(eps)) + beta


def apply_edge(edge: Edge, x: np.ndarray) -> np.ndarray:
    """Evaluate one unary edge operator on a raw array (dtype preserved)."""
    kind = edge.op
    attrs = edge.attrs
    compute = x.dtype

    def param(name: str) -> np.ndarray:
        t = edge.params.get(name)
        if t is None:
            raise ExecError(ExecErrorKind.SHAPE_MISMATCH, edge.id,
                            f"{edge.op.value} missing param {name!r}")
        return np.asarray(t.data, dtype=compute)

    if kind in PASSTHROUGH_KINDS:
        return x
    if kind is OperatorKind.RELU:
        return np.maximum(x, compute.type(0))
    if kind is OperatorKind.SIGMOID:
        return _sigmoid(x)
    if kind is OperatorKind.SOFTMAX:
        return _softmax_channels(x)
    if kind is OperatorKind.BATCH_NORM:
        return _batch_norm(
            x, param("gamma"), param("beta"), param("mean"), param("var"),
            float(attrs.bn_epsilon),
        )
    if kind is OperatorKind.SCALE:
        return param("alpha") * x + param("bias")
    if kind in (OperatorKind.SCALAR_ADD, OperatorKind.SCALAR_MUL):
        if "scalar" in edge.params:
            scalar = param("scalar").reshape(())
        else:
            scalar = compute.type(attrs.scalar)
        return x + scalar if kind is OperatorKind.SCALAR_ADD else x * scalar
    if kind is OperatorKind.CONV2D:
        return _conv2d(x, param("weight"), attrs.stride, attrs.padding)
    if kind is OperatorKind.DEPTHWISE_CONV2D:
        return _depthwise_conv2d(x, param("weight"), attrs.stride, attrs.padding)
    if kind is OperatorKind.SEPARABLE_CONV2D:
        depthwise = _depthwise_conv2d(x, param("depthwise"), attrs.stride, attrs.padding)
        return _conv2d(depthwise, param("pointwise"), (1, 1), Padding.VALID)
    if kind is OperatorKind.FUSED_CBR:
        conv = _conv2d(x, param("weight"), attrs.stride, attrs.padding)
        biased = conv + param("bias")
        return np.maximum(biased, compute.type(0))
    if kind is OperatorKind.MAX_POOL:
        return _max_pool(x, attrs.kernel, attrs.stride, attrs.padding)
    if kind is OperatorKind.AVERAGE_POOL:
        return _average_pool(x, attrs.kernel, attrs.stride, attrs.padding)
    if kind is OperatorKind.REDUCE_MEAN_HW:
        return np.mean(x, axis=(2, 3), keepdims=True, dtype=compute)
    if kind is OperatorKind.TRANSPOSE:
        return np.ascontiguousarray(np.transpose(x, attrs.permutation))
    if kind is OperatorKind.RESHAPE:
        return np.ascontiguousarray(x.reshape(attrs.target_shape.dims))
    raise ExecError(ExecErrorKind.SHAPE_MISMATCH, edge.id,
                    f"{kind.value} is not a unary edge operator")


def _merge_add_bn(parts: list[np.ndarray]) -> np.ndarray:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    # Canonical fan-in normalization; the vertex schema carries no parameters.
    denom = np.sqrt(total.dtype.type(1.0) + total.dtype.type(MERGE_BN_EPSILON))
    return total / denom


def eval_operator(
    kind: OperatorKind,
    attrs,
    inputs: list[Tensor],
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Evaluate one operator on tensors at float64; result keeps inputs[0]'s dtype."""
    binary = kind in (OperatorKind.MATMUL, OperatorKind.ADD)
    expected = 2 if binary else 1
    if len(inputs) != expected:
        raise ExecError(
            ExecErrorKind.SHAPE_MISMATCH, None,
            f"{kind.value} takes {expected} input(s), got {len(inputs)}",
        )
    arrays = [t.to_f64() for t in inputs]
    if kind is OperatorKind.MATMUL:
        out = np.matmul(arrays[0], arrays[1])
    elif kind is OperatorKind.ADD:
        if inputs[0].shape != inputs[1].shape:
            raise ExecError(ExecErrorKind.SHAPE_MISMATCH, None,
                            f"add shape mismatch {inputs[0].shape.dims} vs {inputs[1].shape.dims}")
        out = arrays[0] + arrays[1]
    else:
        edge = Edge(id=-1, src=-1, dst=-1, op=kind, attrs=attrs, params=params or {})
        out = apply_edge(edge, arrays[0])
    return Tensor.quantize(out, inputs[0].dtype)


def run_graph(
    g: GraphModel,
    x: Tensor,
    *,
    exec_dtype: DType,
    cache=None,
) -> Tensor:
    """Evaluate a graph in canonical topological order at `exec_dtype`.

    `cache`, when given, must expose `store(vertex_id, array) -> array` (called
    on every produced vertex value) and `load_input(array) -> array` (the
    identity check the arriving input tensor goes through; the faulty mode may
    substitute a stale same-dims tensor here).  BF16 execution is simulated on
    float32 arrays with every produced vertex value quantized onto the
    bfloat16 grid.  The result is re-expressed at the input tensor's declared
    dtype.
    """
    try:
        shapes = infer_shapes(g, x.shape)
    except ShapeError as exc:
        raise ExecError(ExecErrorKind.SHAPE_MISMATCH, exc.edge_id, exc.reason) from exc

    compute = exec_dtype.storage
    bf16 = exec_dtype is DType.BF16

    def settle(value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=compute)
        if bf16:
            value = quantize_array(value, DType.BF16)
        return value

    def guard(vertex: int, value: np.ndarray) -> np.ndarray:
        if value.shape != shapes[vertex].dims:
            raise ExecError(
                ExecErrorKind.INTERNAL_INVARIANT, None,
                f"cache returned shape {value.shape} where vertex {vertex} "
                f"declares {shapes[vertex].dims}",
            )
        return value

    values: dict[int, np.ndarray] = {}
    by_dst = group_in_edges(g)
    for vertex in canonical_topo_vertices(g):
        if vertex == g.source:
            value = settle(x.to_f64())
            if cache is not None:
                value = guard(vertex, cache.load_input(value))
            values[vertex] = value
            continue
        try:
            plan, incoming = plan_incoming(by_dst[vertex])
        except ShapeError as exc:
            raise ExecError(ExecErrorKind.SHAPE_MISMATCH, exc.edge_id, exc.reason) from exc
        if plan == "matmul":
            lhs, rhs = (values[e.src] for e in incoming)
            result = np.matmul(lhs, rhs)
        elif plan == "single":
            result = apply_edge(incoming[0], values[incoming[0].src])
        else:
            parts = [apply_edge(e, values[e.src]) for e in incoming]
            result = _merge_add_bn(parts)
        result = settle(result)
        if cache is not None:
            result = guard(vertex, cache.store(vertex, result))
        values[vertex] = result

    return Tensor.quantize(values[g.sink], x.dtype)


def execute_reference(g: GraphModel, x: Tensor) -> Tensor:
    """Trusted oracle: evaluate at float64 with no rewrites and no caching."""
    return run_graph(g, x, exec_dtype=DType.F64)
