"""Seed model generation and the eight structural mutation rules.

Seven rules insert a construct that a specific optimizer pass should later
recognize and rewrite; the eighth replaces a random edge's operator with a
randomly chosen one, where replacing with the placeholder operator deletes and
replacing a placeholder inserts.  Every mutation picks a uniformly random edge
site, splices its construct upstream of the surviving original operator, and
must leave the graph valid with inferable shapes - otherwise it reports
Inapplicable and the caller resamples.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import permutations

import numpy as np

from .graphs import (
    Edge,
    GraphModel,
    OperatorAttrs,
    OperatorKind,
    Padding,
    Shape,
    ShapeError,
    canonical_topo_vertices,
    edge_output_shape,
    group_in_edges,
    infer_shapes,
    matmul_output_shape,
    plan_incoming,
    validate_graph,
)
from .tensors import DType, Tensor

BN_EPSILON_DEFAULT = 1e-3


class ModelMutationRule(Enum):
    ZDT = "zdt"  # insert an operator carrying a zero-dimensional tensor
    IPT = "ipt"  # insert a transpose that moves no data
    HWR = "hwr"  # insert a spatial mean reduction
    TOR = "tor"  # insert the transpose/matmul reordering construct
    MOR = "mor"  # insert sigmoid followed by max pooling (the slow order)
    ESC = "esc"  # insert depthwise + pointwise convolution
    ECB = "ecb"  # insert convolution + batch norm + relu
    ROR = "ror"  # replace an operator with a randomly selected one


@dataclass(frozen=True)
class Inapplicable:
    """A mutation attempt that found no valid site; a signal, not a failure."""

    reason: str


@dataclass(frozen=True)
class SeedConfig:
    chain_length: int = 6
    input_shape: Shape = Shape(1, 1, 8, 8)

    def __post_init__(self) -> None:
        if self.chain_length < 1:
            raise ValueError("chain length must be >= 1")


def generate_seed_model(cfg: SeedConfig) -> GraphModel:
    """A chain of pass-through edges from source to sink."""
    length = cfg.chain_length
    edges = [
        Edge(i, i, i + 1, OperatorKind.IDENTITY) for i in range(length)
    ]
    return GraphModel(range(length + 1), edges, source=0, sink=length)


# Operators ROR may substitute in.  The two merge fusion operators are
# excluded: a lone matmul or add edge can never satisfy shape inference.
ROR_CANDIDATE_OPS: tuple[OperatorKind, ...] = tuple(
    k for k in OperatorKind if k not in (OperatorKind.MATMUL, OperatorKind.ADD)
)

_BASE_RULES = (
    ModelMutationRule.ZDT,
    ModelMutationRule.IPT,
    ModelMutationRule.HWR,
    ModelMutationRule.TOR,
    ModelMutationRule.MOR,
    ModelMutationRule.ESC,
    ModelMutationRule.ECB,
)


def expanded_rule_universe() -> list[str]:
    """Rule keys for the heuristic: each replacement target counts as a rule."""
    return [r.value for r in _BASE_RULES] + [
        f"ror:{op.value}" for op in ROR_CANDIDATE_OPS
    ]


def decode_rule_key(key: str) -> tuple[ModelMutationRule, OperatorKind | None]:
    if key.startswith("ror:"):
        return ModelMutationRule.ROR, OperatorKind(key.split(":", 1)[1])
    return ModelMutationRule(key), None


# --- Parameter sampling ---------------------------------------------------------


def _sample(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-0.5, 0.5, size=shape)


def _sample_weight(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """Convolution weights are fan-in scaled to keep activations desk-scale."""
    fan_in = shape[1] * shape[2] * shape[3]
    return Tensor.quantize(_sample(rng, shape) / fan_in, DType.F32)


def _sample_bn_params(rng: np.random.Generator, channels: int) -> dict[str, Tensor]:
    shape = (1, channels, 1, 1)
    return {
        "gamma": Tensor.quantize(_sample(rng, shape), DType.F32),
        "beta": Tensor.quantize(_sample(rng, shape), DType.F32),
        "mean": Tensor.quantize(_sample(rng, shape), DType.F32),
        # Variance is non-negative by definition; sampled away from zero.
        "var": Tensor.quantize(rng.uniform(0.5, 1.5, size=shape), DType.F32),
    }


def _scalar_param(rng: np.random.Generator) -> dict[str, Tensor]:
    return {"scalar": Tensor.quantize(_sample(rng, (1, 1, 1, 1)), DType.F32)}


def _sample_attrs_and_params(
    op: OperatorKind, site: Shape, rng: np.random.Generator
) -> tuple[OperatorAttrs, dict[str, Tensor]]:
    """Fresh attributes/parameters for an operator placed at a site shape."""
    c = site.c
    if op in (OperatorKind.IDENTITY, OperatorKind.NONE, OperatorKind.DROPOUT,
              OperatorKind.RELU, OperatorKind.SIGMOID, OperatorKind.SOFTMAX,
              OperatorKind.REDUCE_MEAN_HW):
        return OperatorAttrs(), {}
    if op in (OperatorKind.SCALAR_ADD, OperatorKind.SCALAR_MUL):
        return OperatorAttrs(), _scalar_param(rng)
    if op is OperatorKind.BATCH_NORM:
        return OperatorAttrs(bn_epsilon=BN_EPSILON_DEFAULT), _sample_bn_params(rng, c)
    if op is OperatorKind.SCALE:
        shape = (1, c, 1, 1)
        return OperatorAttrs(), {
            "alpha": Tensor.quantize(_sample(rng, shape), DType.F32),
            "bias": Tensor.quantize(_sample(rng, shape), DType.F32),
        }
    if op is OperatorKind.CONV2D or op is OperatorKind.FUSED_CBR:
        k = int(rng.choice((1, 3)))
        params = {"weight": _sample_weight(rng, (c, c, k, k))}
        if op is OperatorKind.FUSED_CBR:
            params["bias"] = Tensor.quantize(_sample(rng, (1, c, 1, 1)), DType.F32)
        return OperatorAttrs(kernel=(k, k), stride=(1, 1), padding=Padding.SAME), params
    if op is OperatorKind.DEPTHWISE_CONV2D:
        k = int(rng.choice((1, 3)))
        return (
            OperatorAttrs(kernel=(k, k), stride=(1, 1), padding=Padding.SAME),
            {"weight": _sample_weight(rng, (c, 1, k, k))},
        )
    if op is OperatorKind.SEPARABLE_CONV2D:
        k = int(rng.choice((1, 3)))
        return (
            OperatorAttrs(kernel=(k, k), stride=(1, 1), padding=Padding.SAME),
            {
                "depthwise": _sample_weight(rng, (c, 1, k, k)),
                "pointwise": _sample_weight(rng, (c, c, 1, 1)),
            },
        )
    if op in (OperatorKind.MAX_POOL, OperatorKind.AVERAGE_POOL):
        return OperatorAttrs(kernel=(2, 2), stride=(2, 2), padding=Padding.VALID), {}
    if op is OperatorKind.TRANSPOSE:
        perm = tuple(int(p) for p in rng.permutation(4))
        if perm == (0, 1, 2, 3):
            perm = (0, 1, 3, 2)
        return OperatorAttrs(permutation=perm), {}
    if op is OperatorKind.RESHAPE:
        # Element-count preserving re-views of the site shape.
        variants = sorted({(site.n, *p) for p in permutations((site.c, site.h, site.w))})
        target = variants[int(rng.integers(0, len(variants)))]
        return OperatorAttrs(target_shape=Shape.of(target)), {}
    raise ValueError(f"no sampler for {op}")


# --- Splicing helpers -----------------------------------------------------------


class _Splicer:
    """Replaces one edge with a path (or diamond) built from fresh ids."""

    def __init__(self, g: GraphModel, site: Edge) -> None:
        self.g = g
        self.site = site
        self.edges = {e.id: e for e in g.edges if e.id != site.id}
        self.vertices = set(g.vertices)
        self._next_vertex = max(g.vertices) + 1
        self._next_edge = max(e.id for e in g.edges) + 1
        self.cursor = site.src  # construct grows from here toward site.dst

    def new_vertex(self) -> int:
        v = self._next_vertex
        self._next_vertex += 1
        self.vertices.add(v)
        return v

    def add_edge(self, src: int, dst: int, op: OperatorKind,
                 attrs: OperatorAttrs = OperatorAttrs(), params=None) -> Edge:
        e = Edge(self._next_edge, src, dst, op, attrs, dict(params or {}))
        self._next_edge += 1
        self.edges[e.id] = e
        return e

    def append(self, op: OperatorKind, attrs: OperatorAttrs = OperatorAttrs(),
               params=None) -> int:
        v = self.new_vertex()
        self.add_edge(self.cursor, v, op, attrs, params)
        self.cursor = v
        return v

    def finish(self) -> GraphModel:
        # Re-attach the original operator after the inserted construct.
        self.add_edge(
            self.cursor, self.site.dst, self.site.op, self.site.attrs, dict(self.site.params)
        )
        return GraphModel(self.vertices, self.edges.values(), self.g.source, self.g.sink)


def _checked(g: GraphModel, input_shape: Shape) -> GraphModel | Inapplicable:
    violations = validate_graph(g)
    if violations:
        return Inapplicable(f"structural violations: {violations}")
    try:
        infer_shapes(g, input_shape)
    except ShapeError as exc:
        return Inapplicable(f"shape inference failed: {exc}")
    return g


def _unit_axis_permutations(shape: Shape) -> list[tuple[int, int, int, int]]:
    """Nontrivial 4-permutations that displace only extent-1 axes."""
    out = []
    for perm in permutations(range(4)):
        moved = [i for i in range(4) if perm[i] != i]
        if moved and all(shape.dims[i] == 1 for i in moved):
            out.append(tuple(perm))
    return sorted(out)


def refit_params(
    g: GraphModel, input_shape: Shape, rng: np.random.Generator
) -> GraphModel | Inapplicable:
    """Resample attributes/weights so an existing structure fits a new input shape.

    Keeps the operator structure; edges whose attributes or parameters no
    longer satisfy their shape rule get freshly sampled ones, the way the
    original mutation would have sampled them at this shape.  Structural
    misfits (a non-square matmul site, a window larger than the input) cannot
    be repaired and yield Inapplicable.
    """
    try:
        infer_shapes(g, input_shape)
        return g
    except ShapeError:
        pass

    edges = {e.id: e for e in g.edges}
    shapes: dict[int, Shape] = {g.source: input_shape}
    by_dst = group_in_edges(g)
    for vertex in canonical_topo_vertices(g):
        if vertex == g.source:
            continue
        try:
            plan, incoming = plan_incoming(by_dst[vertex])
        except ShapeError as exc:
            return Inapplicable(f"unrepairable merge: {exc}")
        if plan == "matmul":
            try:
                lhs, rhs = (shapes[e.src] for e in incoming)
                shapes[vertex] = matmul_output_shape(lhs, rhs, incoming[0].id)
            except ShapeError as exc:
                return Inapplicable(f"unrepairable matmul: {exc}")
            continue
        results = []
        for e in incoming:
            current = edges[e.id]
            in_shape = shapes[e.src]
            try:
                results.append(edge_output_shape(current, in_shape))
                continue
            except ShapeError:
                pass
            try:
                attrs, params = _sample_attrs_and_params(current.op, in_shape, rng)
                refitted = current.with_changes(attrs=attrs, params=params)
                results.append(edge_output_shape(refitted, in_shape))
                edges[e.id] = refitted
            except (ShapeError, ValueError) as exc:
                return Inapplicable(f"edge {e.id} ({current.op.value}) unrepairable: {exc}")
        if plan == "add_bn" and any(s != results[0] for s in results):
            return Inapplicable("fan-in shapes disagree after refit")
        shapes[vertex] = results[0]
    return GraphModel(g.vertices, edges.values(), g.source, g.sink)


def apply_model_mutation(
    g: GraphModel,
    rule: ModelMutationRule,
    input_shape: Shape,
    rng: np.random.Generator,
    replacement: OperatorKind | None = None,
) -> GraphModel | Inapplicable:
    """One mutation attempt at a uniformly random site; the input graph is unchanged."""
    edges = list(g.edges)
    if not edges:
        return Inapplicable("graph has no edges")
    try:
        shapes = infer_shapes(g, input_shape)
    except ShapeError as exc:
        return Inapplicable(f"seed model incompatible with input shape: {exc}")

    if rule is ModelMutationRule.ROR:
        if replacement is None:
            replacement = ROR_CANDIDATE_OPS[int(rng.integers(0, len(ROR_CANDIDATE_OPS)))]
        sites = [e for e in edges if e.op is not replacement]
        if not sites:
            return Inapplicable(f"no edge differs from {replacement.value}")
        site = sites[int(rng.integers(0, len(sites)))]
        attrs, params = _sample_attrs_and_params(replacement, shapes[site.src], rng)
        new_edge = site.with_changes(op=replacement, attrs=attrs, params=params)
        rebuilt = GraphModel(
            g.vertices,
            [new_edge if e.id == site.id else e for e in edges],
            g.source,
            g.sink,
        )
        return _checked(rebuilt, input_shape)

    site = edges[int(rng.integers(0, len(edges)))]
    at = shapes[site.src]
    s = _Splicer(g, site)

    if rule is ModelMutationRule.ZDT:
        op = OperatorKind.SCALAR_ADD if int(rng.integers(0, 2)) == 0 else OperatorKind.SCALAR_MUL
        s.append(op, OperatorAttrs(), _scalar_param(rng))
    elif rule is ModelMutationRule.IPT:
        perms = _unit_axis_permutations(at)
        if not perms:
            return Inapplicable(f"no data-free permutation at site shape {at.dims}")
        perm = perms[int(rng.integers(0, len(perms)))]
        s.append(OperatorKind.TRANSPOSE, OperatorAttrs(permutation=perm))
    elif rule is ModelMutationRule.HWR:
        s.append(OperatorKind.REDUCE_MEAN_HW)
    elif rule is ModelMutationRule.TOR:
        if at.h != at.w:
            return Inapplicable(f"site is not square: h={at.h} w={at.w}")
        swap = OperatorAttrs(permutation=(0, 1, 3, 2))
        left = s.new_vertex()
        right = s.new_vertex()
        product = s.new_vertex()
        s.add_edge(s.cursor, left, OperatorKind.TRANSPOSE, swap)
        s.add_edge(s.cursor, right, OperatorKind.TRANSPOSE, swap)
        s.add_edge(left, product, OperatorKind.MATMUL)
        s.add_edge(right, product, OperatorKind.MATMUL)
        s.cursor = product
        s.append(OperatorKind.TRANSPOSE, swap)
    elif rule is ModelMutationRule.MOR:
        if at.h < 2 or at.w < 2:
            return Inapplicable(f"site too small to pool: {at.dims}")
        s.append(OperatorKind.SIGMOID)
        s.append(
            OperatorKind.MAX_POOL,
            OperatorAttrs(kernel=(2, 2), stride=(2, 2), padding=Padding.VALID),
        )
    elif rule is ModelMutationRule.ESC:
        s.append(
            OperatorKind.DEPTHWISE_CONV2D,
            OperatorAttrs(kernel=(3, 3), stride=(1, 1), padding=Padding.SAME),
            {"weight": _sample_weight(rng, (at.c, 1, 3, 3))},
        )
        s.append(
            OperatorKind.CONV2D,
            OperatorAttrs(kernel=(1, 1), stride=(1, 1), padding=Padding.VALID),
            {"weight": _sample_weight(rng, (at.c, at.c, 1, 1))},
        )
    elif rule is ModelMutationRule.ECB:
        s.append(
            OperatorKind.CONV2D,
            OperatorAttrs(kernel=(3, 3), stride=(1, 1), padding=Padding.SAME),
            {"weight": _sample_weight(rng, (at.c, at.c, 3, 3))},
        )
        s.append(
            OperatorKind.BATCH_NORM,
            OperatorAttrs(bn_epsilon=BN_EPSILON_DEFAULT),
            _sample_bn_params(rng, at.c),
        )
        s.append(OperatorKind.RELU)
    else:
        raise ValueError(f"unhandled rule {rule}")

    return _checked(s.finish(), input_shape)
