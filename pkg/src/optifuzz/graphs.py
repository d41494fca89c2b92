"""Computation-graph model: a DAG of tensor vertices connected by operator edges.

A model has exactly one source and one sink vertex and must be connected.
Each edge applies its operator to the value at its src vertex.  When several
edges converge on a vertex the incoming results are fused: a pair of matmul
edges forms one binary matrix product (operands ordered by edge id); any other
multi-edge fan-in is summed elementwise and passed through a batch
normalization with canonical parameters (the vertex schema stores no state, so
the fusion normalization is fixed: gamma=1, beta=0, mean=0, var=1, eps=1e-3).

This module is purely structural: validation, shape inference, canonical JSON
serialization, structure hashing, and the edit-distance diversity metric.
Kernel semantics live in `reference`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensors import Shape, Tensor, dtype_from_name, quantize_array

MODEL_SCHEMA_VERSION = 1

MERGE_BN_EPSILON = 1e-3


class ParseError(Exception):
    """Malformed model JSON; the message carries the location."""


class NeedTwoModels(Exception):
    pass


class ShapeError(Exception):
    """An operator's input shape violates its rule."""

    def __init__(self, edge_id: int | None, reason: str) -> None:
        super().__init__(f"edge {edge_id}: {reason}" if edge_id is not None else reason)
        self.edge_id = edge_id
        self.reason = reason


class OperatorKind(Enum):
    IDENTITY = "identity"
    NONE = "none"
    CONV2D = "conv2d"
    DEPTHWISE_CONV2D = "depthwise_conv2d"
    SEPARABLE_CONV2D = "separable_conv2d"
    BATCH_NORM = "batch_norm"
    SCALE = "scale"
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    MAX_POOL = "max_pool"
    AVERAGE_POOL = "average_pool"
    REDUCE_MEAN_HW = "reduce_mean_hw"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    MATMUL = "matmul"
    SCALAR_ADD = "scalar_add"
    SCALAR_MUL = "scalar_mul"
    ADD = "add"
    DROPOUT = "dropout"
    FUSED_CBR = "fused_cbr"


_KIND_BY_NAME = {k.value: k for k in OperatorKind}

# Pass-through edges; NONE additionally marks a deletable placeholder and is
# excluded from canonical operator sequences.
PASSTHROUGH_KINDS = frozenset(
    {OperatorKind.IDENTITY, OperatorKind.NONE, OperatorKind.DROPOUT}
)


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


@dataclass(frozen=True)
class OperatorAttrs:
    """Per-edge operator attributes; only the fields its kind needs are set."""

    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: Padding | None = None
    bn_epsilon: float | None = None
    permutation: tuple[int, int, int, int] | None = None
    target_shape: Shape | None = None
    scalar: float | None = None

    def to_json_dict(self) -> dict:
        out: dict = {}
        if self.kernel is not None:
            out["kernel"] = list(self.kernel)
        if self.stride is not None:
            out["stride"] = list(self.stride)
        if self.padding is not None:
            out["padding"] = self.padding.value
        if self.bn_epsilon is not None:
            out["bn_epsilon"] = self.bn_epsilon
        if self.permutation is not None:
            out["permutation"] = list(self.permutation)
        if self.target_shape is not None:
            out["target_shape"] = list(self.target_shape.dims)
        if self.scalar is not None:
            out["scalar"] = self.scalar
        return out

    @staticmethod
    def from_json_dict(obj: Mapping) -> "OperatorAttrs":
        def pair(key: str) -> tuple[int, int] | None:
            v = obj.get(key)
            return None if v is None else (int(v[0]), int(v[1]))

        padding = obj.get("padding")
        permutation = obj.get("permutation")
        target = obj.get("target_shape")
        return OperatorAttrs(
            kernel=pair("kernel"),
            stride=pair("stride"),
            padding=Padding(padding) if padding is not None else None,
            bn_epsilon=obj.get("bn_epsilon"),
            permutation=tuple(int(p) for p in permutation) if permutation else None,
            target_shape=Shape.of(tuple(target)) if target else None,
            scalar=obj.get("scalar"),
        )


@dataclass(frozen=True, eq=False)
class Edge:
    id: int
    src: int
    dst: int
    op: OperatorKind
    attrs: OperatorAttrs = field(default_factory=OperatorAttrs)
    params: Mapping[str, Tensor] = field(default_factory=dict)

    def with_changes(self, **kwargs) -> "Edge":
        merged = {
            "id": self.id,
            "src": self.src,
            "dst": self.dst,
            "op": self.op,
            "attrs": self.attrs,
            "params": self.params,
        }
        merged.update(kwargs)
        return Edge(**merged)


class GraphModel:
    """Immutable DAG model; vertices are bare ids, edges carry the operators."""

    __slots__ = ("vertices", "edges", "source", "sink")

    def __init__(
        self,
        vertices: Iterable[int],
        edges: Iterable[Edge],
        source: int,
        sink: int,
    ) -> None:
        vs = tuple(sorted(set(int(v) for v in vertices)))
        es = tuple(sorted(edges, key=lambda e: e.id))
        ids = [e.id for e in es]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate edge ids")
        object.__setattr__(self, "vertices", vs)
        object.__setattr__(self, "edges", es)
        object.__setattr__(self, "source", int(source))
        object.__setattr__(self, "sink", int(sink))

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("GraphModel is immutable")

    def __repr__(self) -> str:
        return (
            f"GraphModel({len(self.vertices)} vertices, {len(self.edges)} edges, "
            f"source={self.source}, sink={self.sink})"
        )

    def in_edges(self, vertex: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == vertex]

    def out_edges(self, vertex: int) -> list[Edge]:
        return [e for e in self.edges if e.src == vertex]

    def edge_by_id(self, edge_id: int) -> Edge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(edge_id)


# --- Validation ---------------------------------------------------------------


def validate_graph(g: GraphModel) -> list[str]:
    """Return every violated structural constraint; empty list means ok."""
    violations: list[str] = []
    vertex_set = set(g.vertices)

    dangling = False
    for e in g.edges:
        if e.src not in vertex_set or e.dst not in vertex_set:
            dangling = True
    if dangling:
        violations.append("dangling-edge")
        # Constraints below assume endpoints exist.
        return violations

    indeg = {v: 0 for v in g.vertices}
    outdeg = {v: 0 for v in g.vertices}
    for e in g.edges:
        indeg[e.dst] += 1
        outdeg[e.src] += 1

    sources = [v for v in g.vertices if indeg[v] == 0]
    sinks = [v for v in g.vertices if outdeg[v] == 0]
    if len(sources) > 1:
        violations.append("multi-source")
    if len(sources) == 0:
        violations.append("no-source")
    if len(sinks) > 1:
        violations.append("multi-sink")
    if len(sinks) == 0:
        violations.append("no-sink")
    if sources != [g.source] and len(sources) == 1:
        violations.append("declared-source-mismatch")
    if sinks != [g.sink] and len(sinks) == 1:
        violations.append("declared-sink-mismatch")

    # Cycle check: Kahn's algorithm must consume every vertex.
    remaining = dict(indeg)
    ready = sorted(v for v, d in remaining.items() if d == 0)
    seen = 0
    adjacency: dict[int, list[int]] = {v: [] for v in g.vertices}
    for e in g.edges:
        adjacency[e.src].append(e.dst)
    while ready:
        v = ready.pop()
        seen += 1
        for w in adjacency[v]:
            remaining[w] -= 1
            if remaining[w] == 0:
                ready.append(w)
    if seen != len(g.vertices):
        violations.append("cycle")

    # Connectivity as an undirected graph.
    if g.vertices:
        neighbours: dict[int, set[int]] = {v: set() for v in g.vertices}
        for e in g.edges:
            neighbours[e.src].add(e.dst)
            neighbours[e.dst].add(e.src)
        stack = [g.vertices[0]]
        visited: set[int] = set()
        while stack:
            v = stack.pop()
            if v in visited:
                continue
            visited.add(v)
            stack.extend(neighbours[v] - visited)
        if len(visited) != len(g.vertices):
            violations.append("disconnected")

    return violations


def canonical_topo_vertices(g: GraphModel) -> list[int]:
    """Topological vertex order with the smallest ready id taken first."""
    indeg = {v: 0 for v in g.vertices}
    adjacency: dict[int, list[int]] = {v: [] for v in g.vertices}
    for e in g.edges:
        indeg[e.dst] += 1
        adjacency[e.src].append(e.dst)
    import heapq

    ready = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for w in adjacency[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, w)
    if len(order) != len(g.vertices):
        raise ValueError("graph has a cycle")
    return order


def canonical_edge_order(g: GraphModel) -> list[Edge]:
    """Edges in topological order of their src vertex, ties broken by edge id."""
    position = {v: i for i, v in enumerate(canonical_topo_vertices(g))}
    return sorted(g.edges, key=lambda e: (position[e.src], e.id))


def operator_sequence(g: GraphModel) -> tuple[OperatorKind, ...]:
    """Canonical operator sequence; deletable placeholders are skipped."""
    return tuple(
        e.op for e in canonical_edge_order(g) if e.op is not OperatorKind.NONE
    )


# --- Shape inference ----------------------------------------------------------


def _require(edge: Edge, condition: bool, reason: str) -> None:
    if not condition:
        raise ShapeError(edge.id, reason)


def _pool_hw(
    edge: Edge, h: int, w: int, kernel: tuple[int, int], stride: tuple[int, int], padding: Padding
) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    _require(edge, kh >= 1 and kw >= 1 and sh >= 1 and sw >= 1, "bad kernel/stride")
    if padding is Padding.SAME:
        return (-(-h // sh), -(-w // sw))
    _require(edge, h >= kh and w >= kw, f"window {kernel} larger than input {(h, w)}")
    return ((h - kh) // sh + 1, (w - kw) // sw + 1)


def _param(edge: Edge, name: str) -> Tensor:
    t = edge.params.get(name)
    _require(edge, t is not None, f"{edge.op.value} needs param {name!r}")
    return t  # type: ignore[return-value]


def edge_output_shape(edge: Edge, in_shape: Shape) -> Shape:
    """Output shape of one (non-matmul) edge applied to `in_shape`."""
    kind = edge.op
    a = edge.attrs
    n, c, h, w = in_shape.dims

    if kind in PASSTHROUGH_KINDS or kind in (
        OperatorKind.RELU,
        OperatorKind.SIGMOID,
        OperatorKind.SOFTMAX,
        OperatorKind.BATCH_NORM,
        OperatorKind.SCALE,
        OperatorKind.SCALAR_ADD,
        OperatorKind.SCALAR_MUL,
    ):
        if kind is OperatorKind.BATCH_NORM:
            for name in ("gamma", "beta", "mean", "var"):
                p = _param(edge, name)
                _require(
                    edge,
                    p.shape.dims in ((1, c, 1, 1), (1, 1, 1, 1)),
                    f"batch_norm param {name} shaped {p.shape.dims} for {c} channels",
                )
            _require(edge, a.bn_epsilon is not None and a.bn_epsilon > 0, "needs bn_epsilon > 0")
        if kind is OperatorKind.SCALE:
            for name in ("alpha", "bias"):
                p = _param(edge, name)
                _require(
                    edge,
                    p.shape.dims in ((1, c, 1, 1), (1, 1, 1, 1)),
                    f"scale param {name} shaped {p.shape.dims} for {c} channels",
                )
        if kind in (OperatorKind.SCALAR_ADD, OperatorKind.SCALAR_MUL):
            has_attr = a.scalar is not None
            has_param = "scalar" in edge.params
            _require(edge, has_attr or has_param, "needs a scalar attr or param")
            if has_param:
                _require(
                    edge,
                    edge.params["scalar"].shape.dims == (1, 1, 1, 1),
                    "scalar param must hold a single element",
                )
        return in_shape

    if kind is OperatorKind.CONV2D or kind is OperatorKind.FUSED_CBR:
        weight = _param(edge, "weight")
        cout, cin, kh, kw = weight.shape.dims
        _require(edge, cin == c, f"conv weight expects {cin} channels, input has {c}")
        _require(edge, a.kernel == (kh, kw), "kernel attr must match weight")
        _require(edge, a.stride is not None and a.padding is not None, "needs stride/padding")
        if kind is OperatorKind.FUSED_CBR:
            bias = _param(edge, "bias")
            _require(edge, bias.shape.dims == (1, cout, 1, 1), "bias shaped (1,C_out,1,1)")
        oh, ow = _pool_hw(edge, h, w, (kh, kw), a.stride, a.padding)
        return Shape(n, cout, oh, ow)

    if kind is OperatorKind.DEPTHWISE_CONV2D:
        weight = _param(edge, "weight")
        wc, one, kh, kw = weight.shape.dims
        _require(edge, wc == c and one == 1, f"depthwise weight {weight.shape.dims} for {c} channels")
        _require(edge, a.kernel == (kh, kw), "kernel attr must match weight")
        _require(edge, a.stride is not None and a.padding is not None, "needs stride/padding")
        oh, ow = _pool_hw(edge, h, w, (kh, kw), a.stride, a.padding)
        return Shape(n, c, oh, ow)

    if kind is OperatorKind.SEPARABLE_CONV2D:
        depthwise = _param(edge, "depthwise")
        pointwise = _param(edge, "pointwise")
        dc, one, kh, kw = depthwise.shape.dims
        cout, pc, ph, pw = pointwise.shape.dims
        _require(edge, dc == c and one == 1, "depthwise stage channel mismatch")
        _require(edge, pc == c and ph == 1 and pw == 1, "pointwise stage must be 1x1")
        _require(edge, a.kernel == (kh, kw), "kernel attr must match depthwise weight")
        _require(edge, a.stride is not None and a.padding is not None, "needs stride/padding")
        oh, ow = _pool_hw(edge, h, w, (kh, kw), a.stride, a.padding)
        return Shape(n, cout, oh, ow)

    if kind in (OperatorKind.MAX_POOL, OperatorKind.AVERAGE_POOL):
        _require(edge, a.kernel is not None and a.stride is not None and a.padding is not None,
                 "needs kernel/stride/padding")
        oh, ow = _pool_hw(edge, h, w, a.kernel, a.stride, a.padding)
        return Shape(n, c, oh, ow)

    if kind is OperatorKind.REDUCE_MEAN_HW:
        return Shape(n, c, 1, 1)

    if kind is OperatorKind.TRANSPOSE:
        _require(edge, a.permutation is not None, "needs a permutation")
        perm = a.permutation
        _require(edge, sorted(perm) == [0, 1, 2, 3], f"{perm} is not a 4-permutation")
        dims = in_shape.dims
        return Shape.of(tuple(dims[p] for p in perm))

    if kind is OperatorKind.RESHAPE:
        _require(edge, a.target_shape is not None, "needs a target_shape")
        target = a.target_shape
        _require(
            edge,
            target.element_count == in_shape.element_count,
            f"reshape {in_shape.dims} -> {target.dims} changes element count",
        )
        return target

    if kind is OperatorKind.MATMUL:
        raise ShapeError(edge.id, "matmul edges are only valid as a merge pair")
    if kind is OperatorKind.ADD:
        raise ShapeError(edge.id, "add is a merge fusion, not an edge operator")
    raise ShapeError(edge.id, f"no shape rule for {kind.value}")


def matmul_output_shape(
    lhs: Shape, rhs: Shape, edge_id: int | None = None
) -> Shape:
    """Batched matrix product over the last two axes, broadcasting N and C."""
    if lhs.w != rhs.h:
        raise ShapeError(edge_id, f"matmul inner mismatch: {lhs.dims} x {rhs.dims}")

    def bcast(x: int, y: int, axis: str) -> int:
        if x == y or y == 1:
            return x
        if x == 1:
            return y
        raise ShapeError(edge_id, f"matmul cannot broadcast {axis}: {x} vs {y}")

    return Shape(bcast(lhs.n, rhs.n, "N"), bcast(lhs.c, rhs.c, "C"), lhs.h, rhs.w)


def group_in_edges(g: GraphModel) -> dict[int, list[Edge]]:
    """Incoming edges per vertex, ordered by edge id (one O(V+E) pass)."""
    by_dst: dict[int, list[Edge]] = {v: [] for v in g.vertices}
    for e in g.edges:  # g.edges is already id-sorted
        by_dst[e.dst].append(e)
    return by_dst


def plan_incoming(incoming: list[Edge]) -> tuple[str, list[Edge]]:
    matmul = [e for e in incoming if e.op is OperatorKind.MATMUL]
    if matmul and len(matmul) != len(incoming):
        raise ShapeError(matmul[0].id, "matmul edges mixed with other fan-in")
    if matmul:
        if len(matmul) != 2:
            raise ShapeError(matmul[0].id, f"matmul merge needs 2 edges, got {len(matmul)}")
        return ("matmul", incoming)
    if len(incoming) == 1:
        return ("single", incoming)
    return ("add_bn", incoming)


def merge_plan(g: GraphModel, vertex: int) -> tuple[str, list[Edge]]:
    """How a multi-in-degree vertex fuses: ('matmul'|'add_bn'|'single', in-edges).

    Matmul merges must be exactly two matmul edges; their id order fixes the
    operand order.  Mixed matmul/non-matmul fan-in is rejected by inference.
    """
    return plan_incoming(sorted(g.in_edges(vertex), key=lambda e: e.id))


def infer_shapes(g: GraphModel, input_shape: Shape) -> dict[int, Shape]:
    """Assign one shape per vertex by propagating operator rules; raises ShapeError."""
    shapes: dict[int, Shape] = {g.source: input_shape}
    by_dst = group_in_edges(g)
    for vertex in canonical_topo_vertices(g):
        if vertex == g.source:
            continue
        plan, incoming = plan_incoming(by_dst[vertex])
        if plan == "matmul":
            lhs, rhs = (shapes[e.src] for e in incoming)
            shapes[vertex] = matmul_output_shape(lhs, rhs, incoming[0].id)
            continue
        results = [edge_output_shape(e, shapes[e.src]) for e in incoming]
        if plan == "add_bn":
            first = results[0]
            for e, s in zip(incoming[1:], results[1:]):
                if s != first:
                    raise ShapeError(
                        e.id, f"fan-in shape mismatch: {s.dims} vs {first.dims}"
                    )
        shapes[vertex] = results[0]
    return shapes


# --- Canonical serialization, hashing -----------------------------------------


def _tensor_to_json(t: Tensor) -> dict:
    return {
        "dtype": t.dtype.value,
        "shape": list(t.shape.dims),
        "data": [float(v) for v in t.data.reshape(-1)],
    }


def _tensor_from_json(obj: Mapping, where: str) -> Tensor:
    try:
        dtype = dtype_from_name(obj["dtype"])
        shape = Shape.of(tuple(obj["shape"]))
        data = np.asarray(obj["data"], dtype=np.float64)
    except Exception as exc:
        raise ParseError(f"{where}: bad tensor payload ({exc})") from exc
    if data.size != shape.element_count:
        raise ParseError(f"{where}: tensor data length {data.size} != {shape.element_count}")
    return Tensor(shape, dtype, quantize_array(data.reshape(shape.dims), dtype))


def graph_to_json_dict(g: GraphModel, *, include_params: bool = True) -> dict:
    return {
        "version": MODEL_SCHEMA_VERSION,
        "source": g.source,
        "sink": g.sink,
        "vertices": [{"id": v} for v in g.vertices],
        "edges": [
            {
                "id": e.id,
                "src": e.src,
                "dst": e.dst,
                "op": e.op.value,
                "attrs": e.attrs.to_json_dict(),
                "params": (
                    {name: _tensor_to_json(t) for name, t in sorted(e.params.items())}
                    if include_params
                    else {}
                ),
            }
            for e in g.edges
        ],
    }


def graph_to_json(g: GraphModel, *, include_params: bool = True) -> str:
    """Canonical text form: sorted keys, compact separators, shortest floats."""
    return json.dumps(
        graph_to_json_dict(g, include_params=include_params),
        sort_keys=True,
        separators=(",", ":"),
    )


def graph_from_json(text: str) -> GraphModel:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ParseError("top level must be an object")
    for key in ("version", "source", "sink", "vertices", "edges"):
        if key not in obj:
            raise ParseError(f"missing key {key!r}")
    if obj["version"] != MODEL_SCHEMA_VERSION:
        raise ParseError(f"unsupported model version {obj['version']!r}")
    try:
        vertices = [int(v["id"]) for v in obj["vertices"]]
    except (TypeError, KeyError) as exc:
        raise ParseError(f"vertices: {exc!r}") from exc
    edges = []
    for i, e in enumerate(obj["edges"]):
        where = f"edges[{i}]"
        try:
            op = _KIND_BY_NAME[e["op"]]
        except KeyError:
            raise ParseError(f"{where}: unknown op {e.get('op')!r}") from None
        try:
            edges.append(
                Edge(
                    id=int(e["id"]),
                    src=int(e["src"]),
                    dst=int(e["dst"]),
                    op=op,
                    attrs=OperatorAttrs.from_json_dict(e.get("attrs", {})),
                    params={
                        name: _tensor_from_json(t, f"{where}.params.{name}")
                        for name, t in e.get("params", {}).items()
                    },
                )
            )
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(f"{where}: {exc}") from exc
    try:
        return GraphModel(vertices, edges, int(obj["source"]), int(obj["sink"]))
    except Exception as exc:
        raise ParseError(str(exc)) from exc


def write_graph(path: str, g: GraphModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_json(g))


def read_graph(path: str) -> GraphModel:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_json(fh.read())


def structure_hash(g: GraphModel) -> str:
    """Digest of the structure: params excluded, attrs included."""
    text = graph_to_json(g, include_params=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --- Edit distance and the diversity metric ------------------------------------


def sequence_edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs.

    Mutation lineages share long runs, so equal prefixes and suffixes are
    stripped first; large remainders use a vectorized row recurrence.
    """
    lo = 0
    hi_a, hi_b = len(a), len(b)
    while lo < hi_a and lo < hi_b and a[lo] == b[lo]:
        lo += 1
    while hi_a > lo and hi_b > lo and a[hi_a - 1] == b[hi_b - 1]:
        hi_a -= 1
        hi_b -= 1
    a, b = a[lo:hi_a], b[lo:hi_b]
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)

    if len(a) * len(b) <= 4096:
        previous = list(range(len(b) + 1))
        for i, x in enumerate(a, start=1):
            current = [i]
            for j, y in enumerate(b, start=1):
                current.append(
                    min(
                        previous[j] + 1,
                        current[j - 1] + 1,
                        previous[j - 1] + (0 if x == y else 1),
                    )
                )
            previous = current
        return previous[len(b)]

    symbols: dict = {}
    encode = lambda v: symbols.setdefault(v, len(symbols))  # noqa: E731
    b_arr = np.asarray([encode(y) for y in b], dtype=np.int64)
    a_codes = [encode(x) for x in a]
    previous = np.arange(len(b) + 1, dtype=np.int64)
    positions = np.arange(len(b) + 1, dtype=np.int64)
    for i, x_code in enumerate(a_codes, start=1):
        substitute = previous[:-1] + (b_arr != x_code)
        delete = previous[1:] + 1
        best = np.minimum(substitute, delete)
        # Fold in the serial insert chain: current[j] also relaxes over
        # min_{k<j}(current-ish[k] + (j - k)), computed as a running minimum
        # of (value[k] - k) plus j.
        running = np.minimum.accumulate(
            np.concatenate(([np.int64(i)], best)) - positions
        )
        current = np.minimum(best, running[:-1] + positions[1:])
        previous = np.concatenate(([np.int64(i)], current))
    return int(previous[-1])


def edit_distance(g1: GraphModel, g2: GraphModel) -> int:
    """Distance between canonical operator sequences.

    This is an upper-bound approximation of graph edit distance: exact graph
    edit distance is NP-hard, the canonical-sequence Levenshtein distance is
    not, and the two agree on the chain-shaped models this system produces.
    """
    return sequence_edit_distance(operator_sequence(g1), operator_sequence(g2))


def mean_edit_distance(models: Sequence[GraphModel]) -> float:
    """Arithmetic mean of edit_distance over all unordered model pairs."""
    if len(models) < 2:
        raise NeedTwoModels(f"need at least 2 models, got {len(models)}")
    sequences = [operator_sequence(g) for g in models]
    return mean_sequence_edit_distance(sequences)


def mean_sequence_edit_distance(sequences: Sequence[tuple]) -> float:
    if len(sequences) < 2:
        raise NeedTwoModels(f"need at least 2 models, got {len(sequences)}")
    total = 0
    pairs = 0
    cache: dict[tuple, int] = {}
    for i in range(len(sequences)):
        for j in range(i + 1, len(sequences)):
            key = (sequences[i], sequences[j])
            d = cache.get(key)
            if d is None:
                d = sequence_edit_distance(sequences[i], sequences[j])
                cache[key] = d
                cache[(sequences[j], sequences[i])] = d
            total += d
            pairs += 1
    return total / pairs


def pairwise_distance_histogram(models: Sequence[GraphModel]) -> dict[int, int]:
    if len(models) < 2:
        raise NeedTwoModels(f"need at least 2 models, got {len(models)}")
    sequences = [operator_sequence(g) for g in models]
    histogram: dict[int, int] = {}
    for i in range(len(sequences)):
        for j in range(i + 1, len(sequences)):
            d = sequence_edit_distance(sequences[i], sequences[j])
            histogram[d] = histogram.get(d, 0) + 1
    return dict(sorted(histogram.items()))
