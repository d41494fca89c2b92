"""The system under test: a graph optimizer plus a caching, reduced-precision executor.

Three rewrite passes run to fixpoint in a fixed order:

  node_opt  - scalar-tensor constant folding, data-free transpose -> reshape,
              spatial mean -> average pooling, batch norm -> scale folding
  reorder   - transpose pair + matmul -> swapped matmul + one transpose,
              sigmoid before max pooling -> max pooling before sigmoid
  fusion    - depthwise + 1x1 convolution -> separable convolution,
              convolution + batch norm + relu -> one fused block

Execution then walks the optimized graph at F32 (or simulated BF16) and routes
every tensor through a capacity-limited LRU cache: weights enter when the
model loads, produced values as they are computed.  Keying that cache by
buffer dimensions instead of by producer identity is the injectable reuse
fault - the arriving input tensor is then misjudged as "already loaded"
whenever its dimensions match a cached tensor, and the stale entry silently
takes its place.  All faults are opt-in; with none enabled the optimizer is
semantics-preserving.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .graphs import (
    Edge,
    GraphModel,
    OperatorAttrs,
    OperatorKind,
    Padding,
    Shape,
    canonical_edge_order,
    infer_shapes,
)
from .reference import ExecError, ExecErrorKind, run_graph
from .tensors import DType, Tensor

_MATRIX_TRANSPOSE = (0, 1, 3, 2)


class PassName(Enum):
    NODE_OPT = "node_opt"
    REORDER = "reorder"
    FUSION = "fusion"


class Fault(Enum):
    SHAPE_KEYED_CACHE = "shape-cache"
    SOFTMAX_MAXPOOL_REORDER = "softmax-reorder"
    FUSED_PARAM_ERROR = "fused-param"


class CacheKeyMode(Enum):
    BY_ID = "by_id"
    BY_SHAPE_DTYPE = "by_shape_dtype"


@dataclass(frozen=True)
class CacheConfig:
    capacity_bytes: int = 64 << 20
    key_mode: CacheKeyMode = CacheKeyMode.BY_ID

    def __post_init__(self) -> None:
        if self.capacity_bytes < 1:
            raise ValueError("cache capacity must be positive")


ALL_PASSES = frozenset(PassName)


@dataclass(frozen=True)
class OptimizeConfig:
    passes: frozenset = ALL_PASSES
    exec_dtype: DType = DType.F32
    cache: CacheConfig = field(default_factory=CacheConfig)
    faults: frozenset = frozenset()

    def __post_init__(self) -> None:
        if self.exec_dtype not in (DType.F32, DType.BF16):
            raise ValueError("the reduced-precision executor runs at F32 or BF16 only")

    @property
    def effective_key_mode(self) -> CacheKeyMode:
        if Fault.SHAPE_KEYED_CACHE in self.faults:
            return CacheKeyMode.BY_SHAPE_DTYPE
        return self.cache.key_mode


@dataclass(frozen=True)
class RewriteRecord:
    pass_name: str
    before_edges: tuple[int, ...]
    after_edges: tuple[int, ...]


@dataclass
class PassReport:
    fire_counts: dict[str, int] = field(default_factory=lambda: {p.value: 0 for p in PassName})
    rewrites: list[RewriteRecord] = field(default_factory=list)

    def record(self, rec: RewriteRecord) -> None:
        self.fire_counts[rec.pass_name] += 1
        self.rewrites.append(rec)

    @property
    def total_fires(self) -> int:
        return sum(self.fire_counts.values())


# --- Rewrite machinery ---------------------------------------------------------


class _Builder:
    """Mutable copy of a graph for applying one rewrite."""

    def __init__(self, g: GraphModel) -> None:
        self.edges: dict[int, Edge] = {e.id: e for e in g.edges}
        self.vertices: set[int] = set(g.vertices)
        self.source = g.source
        self.sink = g.sink
        self._next_vertex = max(self.vertices) + 1
        self._next_edge = max(self.edges) + 1 if self.edges else 0

    def new_vertex(self) -> int:
        v = self._next_vertex
        self._next_vertex += 1
        self.vertices.add(v)
        return v

    def new_edge(self, src: int, dst: int, op: OperatorKind,
                 attrs: OperatorAttrs = OperatorAttrs(), params=None) -> Edge:
        e = Edge(self._next_edge, src, dst, op, attrs, dict(params or {}))
        self._next_edge += 1
        self.edges[e.id] = e
        return e

    def to_model(self) -> GraphModel:
        return GraphModel(self.vertices, self.edges.values(), self.source, self.sink)


def _single_in(g: GraphModel, vertex: int) -> Edge | None:
    edges = g.in_edges(vertex)
    return edges[0] if len(edges) == 1 else None


def _single_out(g: GraphModel, vertex: int) -> Edge | None:
    edges = g.out_edges(vertex)
    return edges[0] if len(edges) == 1 else None


def _moves_only_unit_axes(perm: tuple[int, int, int, int], shape: Shape) -> bool:
    moved = [i for i in range(4) if perm[i] != i]
    return bool(moved) and all(shape.dims[i] == 1 for i in moved)


def _fold_scale_params(edge: Edge) -> dict[str, Tensor]:
    """Batch norm folded to y = alpha*x + bias, computed and stored at F64."""
    gamma = edge.params["gamma"].to_f64()
    beta = edge.params["beta"].to_f64()
    mean = edge.params["mean"].to_f64()
    var = edge.params["var"].to_f64()
    inv = gamma / np.sqrt(var + float(edge.attrs.bn_epsilon))
    alpha = inv
    bias = beta - inv * mean
    return {
        "alpha": Tensor.quantize(alpha, DType.F64),
        "bias": Tensor.quantize(bias, DType.F64),
    }


def _is_fusable_cbr_bn(g: GraphModel, bn: Edge, cfg: OptimizeConfig) -> bool:
    # Leave conv -> batch_norm -> relu chains for the fusion pass.
    if PassName.FUSION not in cfg.passes:
        return False
    conv = _single_in(g, bn.src)
    if conv is None or conv.op is not OperatorKind.CONV2D:
        return False
    if _single_out(g, bn.src) is not bn:
        return False
    relu = _single_out(g, bn.dst)
    if relu is None or relu.op is not OperatorKind.RELU:
        return False
    return _single_in(g, bn.dst) is bn


def _pass_node_opt(g: GraphModel, shapes: dict[int, Shape], cfg: OptimizeConfig):
    for e in canonical_edge_order(g):
        in_shape = shapes[e.src]
        if e.op in (OperatorKind.SCALAR_ADD, OperatorKind.SCALAR_MUL) and "scalar" in e.params:
            value = float(e.params["scalar"].to_f64().reshape(()))
            new = e.with_changes(attrs=replace(e.attrs, scalar=value), params={})
            b = _Builder(g)
            b.edges[e.id] = new
            return b.to_model(), (e.id,), (e.id,)
        if (
            e.op is OperatorKind.TRANSPOSE
            and e.attrs.permutation is not None
            and _moves_only_unit_axes(e.attrs.permutation, in_shape)
        ):
            target = Shape.of(tuple(in_shape.dims[p] for p in e.attrs.permutation))
            new = e.with_changes(op=OperatorKind.RESHAPE,
                                 attrs=OperatorAttrs(target_shape=target))
            b = _Builder(g)
            b.edges[e.id] = new
            return b.to_model(), (e.id,), (e.id,)
        if e.op is OperatorKind.REDUCE_MEAN_HW:
            new = e.with_changes(
                op=OperatorKind.AVERAGE_POOL,
                attrs=OperatorAttrs(
                    kernel=(in_shape.h, in_shape.w), stride=(1, 1), padding=Padding.VALID
                ),
            )
            b = _Builder(g)
            b.edges[e.id] = new
            return b.to_model(), (e.id,), (e.id,)
        if e.op is OperatorKind.BATCH_NORM and not _is_fusable_cbr_bn(g, e, cfg):
            new = e.with_changes(
                op=OperatorKind.SCALE,
                attrs=OperatorAttrs(),
                params=_fold_scale_params(e),
            )
            b = _Builder(g)
            b.edges[e.id] = new
            return b.to_model(), (e.id,), (e.id,)
    return None


def _match_matmul_pair(g: GraphModel, m: int) -> tuple[Edge, Edge] | None:
    incoming = sorted(g.in_edges(m), key=lambda e: e.id)
    if len(incoming) != 2:
        return None
    if any(e.op is not OperatorKind.MATMUL for e in incoming):
        return None
    return incoming[0], incoming[1]


def _operand_feeder(g: GraphModel, operand: int, pair: tuple[Edge, Edge]) -> Edge | None:
    """The lone matrix-transpose edge feeding a matmul operand vertex, if any."""
    if operand in (g.source, g.sink):
        return None
    if any(e.id not in (pair[0].id, pair[1].id) for e in g.out_edges(operand)):
        return None
    feeder = _single_in(g, operand)
    if feeder is None or feeder.op is not OperatorKind.TRANSPOSE:
        return None
    if feeder.attrs.permutation != _MATRIX_TRANSPOSE:
        return None
    return feeder


def _pass_reorder(g: GraphModel, shapes: dict[int, Shape], cfg: OptimizeConfig):
    swap_kinds = {OperatorKind.SIGMOID}
    if Fault.SOFTMAX_MAXPOOL_REORDER in cfg.faults:
        # Unsound: softmax does not commute with max pooling in general.
        swap_kinds.add(OperatorKind.SOFTMAX)

    for e in canonical_edge_order(g):
        if e.op is OperatorKind.MATMUL:
            pair = _match_matmul_pair(g, e.dst)
            if pair is None or pair[0].id != e.id:
                continue
            e1, e2 = pair
            t1 = _operand_feeder(g, e1.src, pair)
            t2 = t1 if e1.src == e2.src else _operand_feeder(g, e2.src, pair)
            if t1 is None or t2 is None:
                continue
            # transpose(A) x transpose(B) == transpose(matmul(B, A))
            b = _Builder(g)
            removed = {e1.id, e2.id, t1.id, t2.id}
            for rid in removed:
                del b.edges[rid]
            b.vertices.discard(e1.src)
            b.vertices.discard(e2.src)
            product = b.new_vertex()
            swapped_first = b.new_edge(t2.src, product, OperatorKind.MATMUL)
            swapped_second = b.new_edge(t1.src, product, OperatorKind.MATMUL)
            trans = b.new_edge(
                product, e.dst, OperatorKind.TRANSPOSE,
                OperatorAttrs(permutation=_MATRIX_TRANSPOSE),
            )
            return (
                b.to_model(),
                tuple(sorted(removed)),
                (swapped_first.id, swapped_second.id, trans.id),
            )

        if e.op in swap_kinds:
            mid = e.dst
            if mid in (g.source, g.sink):
                continue
            nxt = _single_out(g, mid)
            if nxt is None or nxt.op is not OperatorKind.MAX_POOL:
                continue
            if _single_in(g, mid) is not e:
                continue
            b = _Builder(g)
            b.edges[e.id] = e.with_changes(op=OperatorKind.MAX_POOL, attrs=nxt.attrs)
            b.edges[nxt.id] = nxt.with_changes(op=e.op, attrs=OperatorAttrs())
            return b.to_model(), (e.id, nxt.id), (e.id, nxt.id)
    return None


def _fold_cbr_params(conv: Edge, bn: Edge, cfg: OptimizeConfig) -> dict[str, Tensor]:
    weight = conv.params["weight"].to_f64()
    gamma = bn.params["gamma"].to_f64()
    beta = bn.params["beta"].to_f64()
    mean = bn.params["mean"].to_f64()
    var = bn.params["var"].to_f64()
    inv = gamma / np.sqrt(var + float(bn.attrs.bn_epsilon))

    cout = weight.shape[0]
    scale = np.broadcast_to(inv.reshape(-1), (cout,)) if inv.size in (1, cout) else inv.reshape(cout)
    folded_weight = weight * scale[:, None, None, None]
    bias = -inv * mean
    if Fault.FUSED_PARAM_ERROR not in cfg.faults:
        bias = beta + bias  # the fault drops the additive shift term
    bias = np.broadcast_to(bias.reshape(-1), (cout,)).reshape(1, cout, 1, 1)
    return {
        "weight": Tensor.quantize(folded_weight, DType.F64),
        "bias": Tensor.quantize(bias, DType.F64),
    }


def _pass_fusion(g: GraphModel, shapes: dict[int, Shape], cfg: OptimizeConfig):
    for e in canonical_edge_order(g):
        if e.op is OperatorKind.DEPTHWISE_CONV2D:
            mid = e.dst
            if mid in (g.source, g.sink) or _single_in(g, mid) is not e:
                continue
            pointwise = _single_out(g, mid)
            if (
                pointwise is None
                or pointwise.op is not OperatorKind.CONV2D
                or pointwise.attrs.kernel != (1, 1)
                or pointwise.attrs.stride != (1, 1)
            ):
                continue
            b = _Builder(g)
            del b.edges[e.id]
            del b.edges[pointwise.id]
            b.vertices.discard(mid)
            fused = b.new_edge(
                e.src, pointwise.dst, OperatorKind.SEPARABLE_CONV2D, e.attrs,
                {"depthwise": e.params["weight"], "pointwise": pointwise.params["weight"]},
            )
            return b.to_model(), (e.id, pointwise.id), (fused.id,)

        if e.op is OperatorKind.CONV2D:
            mid = e.dst
            if mid in (g.source, g.sink) or _single_in(g, mid) is not e:
                continue
            bn = _single_out(g, mid)
            if bn is None or bn.op is not OperatorKind.BATCH_NORM:
                continue
            mid2 = bn.dst
            if mid2 in (g.source, g.sink) or _single_in(g, mid2) is not bn:
                continue
            relu = _single_out(g, mid2)
            if relu is None or relu.op is not OperatorKind.RELU:
                continue
            b = _Builder(g)
            for rid in (e.id, bn.id, relu.id):
                del b.edges[rid]
            b.vertices.discard(mid)
            b.vertices.discard(mid2)
            fused = b.new_edge(
                e.src, relu.dst, OperatorKind.FUSED_CBR, e.attrs,
                _fold_cbr_params(e, bn, cfg),
            )
            return b.to_model(), (e.id, bn.id, relu.id), (fused.id,)
    return None


_PASS_FNS = {
    PassName.NODE_OPT: _pass_node_opt,
    PassName.REORDER: _pass_reorder,
    PassName.FUSION: _pass_fusion,
}

_MAX_SWEEPS = 200


def optimize_graph(
    g: GraphModel, cfg: OptimizeConfig, input_shape: Shape
) -> tuple[GraphModel, PassReport]:
    """Apply the enabled passes to fixpoint; the input shape drives shape-aware rewrites."""
    report = PassReport()
    current = g
    for _ in range(_MAX_SWEEPS):
        fired = False
        for pass_name in (PassName.NODE_OPT, PassName.REORDER, PassName.FUSION):
            if pass_name not in cfg.passes:
                continue
            while True:
                shapes = infer_shapes(current, input_shape)
                hit = _PASS_FNS[pass_name](current, shapes, cfg)
                if hit is None:
                    break
                current, before, after = hit
                report.record(RewriteRecord(pass_name.value, before, after))
                fired = True
        if not fired:
            break
    else:
        raise ExecError(
            ExecErrorKind.INTERNAL_INVARIANT, None,
            f"optimizer did not reach a fixpoint in {_MAX_SWEEPS} sweeps",
        )
    return current, report


# --- Tensor cache ----------------------------------------------------------------


class TensorCache:
    """LRU byte-capacity cache modeling how a browser session holds tensors.

    Model weights enter the cache when the model loads; every tensor the
    execution produces is stored as it is computed (the newest tensor owns its
    slot).  The test input is the tensor that arrives through the load path,
    so it is the one subjected to the "already loaded?" check.  With the sound
    key mode slots are keyed by producer identity and that check can never
    hit.  With the shape-keyed mode slots are keyed by buffer dimensions
    (element count and element width, the identity a size-keyed buffer cache
    sees): an arriving input whose dimensions match a cached tensor is
    misjudged as already loaded, and the stale cached tensor (typically a
    weight) silently replaces it.  Tensors larger than the whole capacity are
    never cached.
    """

    def __init__(self, config: CacheConfig, key_mode: CacheKeyMode, element_width: int) -> None:
        self._capacity = config.capacity_bytes
        self._key_mode = key_mode
        self._width = element_width
        self._entries: "OrderedDict[object, np.ndarray]" = OrderedDict()
        self._used = 0
        self._preloaded = 0
        self.stores = 0
        self.input_misjudged = False
        self.evictions = 0

    def _key(self, token: object, arr: np.ndarray) -> object:
        if self._key_mode is CacheKeyMode.BY_ID:
            return token
        return (arr.size, arr.dtype.itemsize)

    def _insert(self, key: object, arr: np.ndarray) -> None:
        nbytes = arr.size * self._width
        if nbytes > self._capacity:
            return  # degenerates to no caching for oversized tensors
        cached = self._entries.get(key)
        if cached is not None:
            self._entries.move_to_end(key)
            self._used -= cached.size * self._width
        self._entries[key] = arr
        self._used += nbytes
        while self._used > self._capacity and self._entries:
            _, evicted = self._entries.popitem(last=False)
            self._used -= evicted.size * self._width
            self.evictions += 1

    def preload_model(self, g: GraphModel, compute: np.dtype) -> None:
        """Admit every weight tensor, in canonical order, as the model loads."""
        for e in canonical_edge_order(g):
            for name in sorted(e.params):
                arr = np.ascontiguousarray(e.params[name].data, dtype=compute)
                self._insert(self._key(("param", e.id, name), arr), arr)
                self._preloaded += 1

    def load_input(self, arr: np.ndarray) -> np.ndarray:
        """The misjudgment site: a same-dims cache entry passes for the input."""
        key = self._key(("input",), arr)
        if self._key_mode is CacheKeyMode.BY_SHAPE_DTYPE:
            cached = self._entries.get(key)
            if cached is not None:
                self._entries.move_to_end(key)
                self.input_misjudged = True
                return cached
        self._insert(key, arr)
        return arr

    def store(self, vertex: int, arr: np.ndarray) -> np.ndarray:
        self._insert(self._key(("vertex", vertex), arr), arr)
        self.stores += 1
        return arr


def execute_optimized_detailed(
    g: GraphModel, x: Tensor, cfg: OptimizeConfig
) -> tuple[Tensor, PassReport, TensorCache]:
    """Optimize, then evaluate at cfg.exec_dtype with all tensors routed through the cache."""
    optimized, report = optimize_graph(g, cfg, x.shape)
    cache = TensorCache(cfg.cache, cfg.effective_key_mode, cfg.exec_dtype.width)
    cache.preload_model(optimized, cfg.exec_dtype.storage)
    out = run_graph(optimized, x, exec_dtype=cfg.exec_dtype, cache=cache)
    return out, report, cache


def execute_optimized(g: GraphModel, x: Tensor, cfg: OptimizeConfig) -> Tensor:
    return execute_optimized_detailed(g, x, cfg)[0]
