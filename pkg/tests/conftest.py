import numpy as np
import pytest

from optifuzz.graphs import Edge, GraphModel, OperatorAttrs, OperatorKind
from optifuzz.mutations import BN_EPSILON_DEFAULT
from optifuzz.tensors import DType, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain(*ops: OperatorKind, attrs=None, params=None) -> GraphModel:
    """Straight-line model source -> op1 -> ... -> opN -> sink."""
    attrs = attrs or {}
    params = params or {}
    edges = [
        Edge(i, i, i + 1, op, attrs.get(i, OperatorAttrs()), params.get(i, {}))
        for i, op in enumerate(ops)
    ]
    return GraphModel(range(len(ops) + 1), edges, 0, len(ops))


def channel_tensor(c: int, value: float, dtype: DType = DType.F32) -> Tensor:
    return Tensor.quantize(np.full((1, c, 1, 1), value), dtype)


def bn_params(c: int, gamma=1.0, beta=0.0, mean=0.0, var=1.0):
    return {
        "gamma": channel_tensor(c, gamma),
        "beta": channel_tensor(c, beta),
        "mean": channel_tensor(c, mean),
        "var": channel_tensor(c, var),
    }


def bn_attrs(eps: float = BN_EPSILON_DEFAULT) -> OperatorAttrs:
    return OperatorAttrs(bn_epsilon=eps)
