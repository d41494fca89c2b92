"""Kernel semantics and the trusted executor."""

import numpy as np
import pytest

from conftest import bn_attrs, bn_params, chain
from optifuzz.graphs import (
    Edge,
    GraphModel,
    OperatorAttrs,
    OperatorKind,
    Padding,
    infer_shapes,
)
from optifuzz.reference import ExecError, eval_operator, execute_reference, run_graph
from optifuzz.tensors import DType, Shape, Tensor, random_seed_tensor


def t4(values, dtype=DType.F64):
    return Tensor.quantize(np.asarray(values, dtype=np.float64), dtype)


def test_identity_chain_is_bit_exact(rng):
    g = chain(*[OperatorKind.IDENTITY] * 4)
    x = random_seed_tensor(Shape(1, 3, 5, 5), DType.F32, rng)
    assert execute_reference(g, x).bit_equal(x)


def test_batch_norm_formula(rng):
    g = chain(OperatorKind.BATCH_NORM, attrs={0: bn_attrs(1e-3)}, params={0: bn_params(2)})
    x = random_seed_tensor(Shape(1, 2, 3, 3), DType.F64, rng)
    out = execute_reference(g, x)
    np.testing.assert_allclose(out.data, x.data / np.sqrt(1.001), rtol=0, atol=1e-15)


def test_maxpool_window():
    g = chain(
        OperatorKind.MAX_POOL,
        attrs={0: OperatorAttrs(kernel=(2, 2), stride=(2, 2), padding=Padding.VALID)},
    )
    x = t4(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = execute_reference(g, x)
    assert out.shape.dims == (1, 1, 1, 1)
    assert float(out.data.reshape(())) == 4.0


def test_pointwise_conv_scales(rng):
    weight = Tensor.quantize(np.full((1, 1, 1, 1), 2.0), DType.F32)
    g = chain(
        OperatorKind.CONV2D,
        attrs={0: OperatorAttrs(kernel=(1, 1), stride=(1, 1), padding=Padding.VALID)},
        params={0: {"weight": weight}},
    )
    x = random_seed_tensor(Shape(1, 1, 4, 4), DType.F64, rng)
    out = execute_reference(g, x)
    np.testing.assert_array_equal(out.data, 2.0 * x.data)


def test_conv_against_scipy_style_loop(rng):
    """Cross-check the vectorized conv kernel against an index-by-index loop."""
    x = rng.uniform(-1, 1, size=(2, 3, 5, 6))
    w = rng.uniform(-1, 1, size=(4, 3, 3, 3))
    g = chain(
        OperatorKind.CONV2D,
        attrs={0: OperatorAttrs(kernel=(3, 3), stride=(1, 1), padding=Padding.VALID)},
        params={0: {"weight": Tensor.quantize(w, DType.F64)}},
    )
    out = execute_reference(g, Tensor.quantize(x, DType.F64))
    expected = np.zeros((2, 4, 3, 4))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(4):
                    expected[n, o, i, j] = np.sum(
                        x[n, :, i : i + 3, j : j + 3] * w[o]
                    )
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_softmax_symmetry_and_normalization(rng):
    out = eval_operator(
        OperatorKind.SOFTMAX, OperatorAttrs(), [t4(np.zeros((1, 2, 1, 1)))]
    )
    np.testing.assert_array_equal(out.data.reshape(-1), [0.5, 0.5])

    x = random_seed_tensor(Shape(2, 5, 3, 3), DType.F64, rng)
    g = chain(OperatorKind.SOFTMAX)
    result = execute_reference(g, x)
    sums = result.data.sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)


def test_reshape_keeps_flat_order():
    x = t4(np.arange(1, 7).reshape(1, 1, 2, 3))
    out = eval_operator(
        OperatorKind.RESHAPE, OperatorAttrs(target_shape=Shape(1, 1, 3, 2)), [x]
    )
    np.testing.assert_array_equal(out.data.reshape(-1), np.arange(1, 7))


def test_transpose_involution(rng):
    x = random_seed_tensor(Shape(1, 2, 3, 4), DType.F64, rng)
    attrs = OperatorAttrs(permutation=(0, 1, 3, 2))
    once = eval_operator(OperatorKind.TRANSPOSE, attrs, [x])
    twice = eval_operator(OperatorKind.TRANSPOSE, attrs, [once])
    assert twice.bit_equal(x)


def test_separable_equals_depthwise_then_pointwise(rng):
    """Two independent routes: the fused kernel vs explicit composition."""
    c, cout = 3, 4
    depthwise = Tensor.quantize(rng.uniform(-1, 1, size=(c, 1, 3, 3)), DType.F64)
    pointwise = Tensor.quantize(rng.uniform(-1, 1, size=(cout, c, 1, 1)), DType.F64)
    x = random_seed_tensor(Shape(2, c, 4, 4), DType.F64, rng)

    conv_attrs = OperatorAttrs(kernel=(3, 3), stride=(1, 1), padding=Padding.SAME)
    fused = chain(
        OperatorKind.SEPARABLE_CONV2D,
        attrs={0: conv_attrs},
        params={0: {"depthwise": depthwise, "pointwise": pointwise}},
    )
    split = chain(
        OperatorKind.DEPTHWISE_CONV2D,
        OperatorKind.CONV2D,
        attrs={
            0: conv_attrs,
            1: OperatorAttrs(kernel=(1, 1), stride=(1, 1), padding=Padding.VALID),
        },
        params={0: {"weight": depthwise}, 1: {"weight": pointwise}},
    )
    a = execute_reference(fused, x)
    b = execute_reference(split, x)
    assert float(np.max(np.abs(a.to_f64() - b.to_f64()))) == 0.0


def test_fused_cbr_matches_composition(rng):
    c = 2
    weight = Tensor.quantize(rng.uniform(-0.5, 0.5, size=(c, c, 3, 3)), DType.F64)
    params = bn_params(c, gamma=0.8, beta=0.1, mean=0.05, var=1.2)
    conv_attrs = OperatorAttrs(kernel=(3, 3), stride=(1, 1), padding=Padding.SAME)
    composed = chain(
        OperatorKind.CONV2D,
        OperatorKind.BATCH_NORM,
        OperatorKind.RELU,
        attrs={0: conv_attrs, 1: bn_attrs()},
        params={0: {"weight": weight}, 1: params},
    )
    # fold from the values actually stored (the params are F32-quantized)
    eps = 1e-3
    inv = params["gamma"].to_f64() / np.sqrt(params["var"].to_f64() + eps)
    bias = params["beta"].to_f64() - inv * params["mean"].to_f64()
    fused = chain(
        OperatorKind.FUSED_CBR,
        attrs={0: conv_attrs},
        params={
            0: {
                "weight": Tensor.quantize(weight.data * inv.reshape(c, 1, 1, 1), DType.F64),
                "bias": Tensor.quantize(bias, DType.F64),
            }
        },
    )
    x = random_seed_tensor(Shape(1, c, 5, 5), DType.F64, rng)
    a = execute_reference(composed, x)
    b = execute_reference(fused, x)
    assert float(np.max(np.abs(a.to_f64() - b.to_f64()))) < 1e-12


def test_dropout_is_inference_identity(rng):
    g = chain(OperatorKind.DROPOUT)
    x = random_seed_tensor(Shape(1, 2, 3, 3), DType.F32, rng)
    assert execute_reference(g, x).bit_equal(x)


def test_scalar_ops(rng):
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F64, rng)
    add = chain(OperatorKind.SCALAR_ADD, attrs={0: OperatorAttrs(scalar=0.25)})
    np.testing.assert_array_equal(execute_reference(add, x).data, x.data + 0.25)
    mul = chain(
        OperatorKind.SCALAR_MUL,
        params={0: {"scalar": Tensor.quantize(np.full((1, 1, 1, 1), 3.0), DType.F64)}},
    )
    np.testing.assert_array_equal(execute_reference(mul, x).data, x.data * 3.0)


def test_average_pool_same_excludes_padding():
    x = t4(np.ones((1, 1, 3, 3)))
    g = chain(
        OperatorKind.AVERAGE_POOL,
        attrs={0: OperatorAttrs(kernel=(2, 2), stride=(2, 2), padding=Padding.SAME)},
    )
    out = execute_reference(g, x)
    # every window averages only in-bounds ones, so all outputs stay 1.0
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_matmul_merge_with_operand_order(rng):
    a = rng.uniform(-1, 1, size=(1, 1, 3, 3))
    edges = [
        Edge(0, 0, 1, OperatorKind.SCALAR_ADD, OperatorAttrs(scalar=0.5)),
        Edge(1, 0, 2, OperatorKind.SCALAR_MUL, OperatorAttrs(scalar=2.0)),
        Edge(2, 1, 3, OperatorKind.MATMUL),
        Edge(3, 2, 3, OperatorKind.MATMUL),
        Edge(4, 3, 4, OperatorKind.IDENTITY),
    ]
    g = GraphModel(range(5), edges, 0, 4)
    x = Tensor.quantize(a, DType.F64)
    out = execute_reference(g, x)
    expected = np.matmul(a + 0.5, a * 2.0)  # operand order fixed by edge ids
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


def test_add_bn_merge(rng):
    edges = [
        Edge(0, 0, 1, OperatorKind.SCALAR_ADD, OperatorAttrs(scalar=1.0)),
        Edge(1, 0, 1, OperatorKind.SCALAR_ADD, OperatorAttrs(scalar=2.0)),
        Edge(2, 1, 2, OperatorKind.IDENTITY),
    ]
    g = GraphModel([0, 1, 2], edges, 0, 2)
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F64, rng)
    out = execute_reference(g, x)
    expected = ((x.data + 1.0) + (x.data + 2.0)) / np.sqrt(1.001)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


def test_execution_is_deterministic(rng):
    g = chain(
        OperatorKind.CONV2D,
        OperatorKind.SIGMOID,
        attrs={0: OperatorAttrs(kernel=(3, 3), stride=(1, 1), padding=Padding.SAME)},
        params={0: {"weight": Tensor.quantize(rng.uniform(-0.2, 0.2, (2, 2, 3, 3)), DType.F32)}},
    )
    x = random_seed_tensor(Shape(1, 2, 6, 6), DType.F32, rng)
    assert execute_reference(g, x).bit_equal(execute_reference(g, x))


def test_output_shape_matches_inference(rng):
    g = chain(
        OperatorKind.MAX_POOL,
        OperatorKind.REDUCE_MEAN_HW,
        attrs={0: OperatorAttrs(kernel=(2, 2), stride=(2, 2), padding=Padding.VALID)},
    )
    x = random_seed_tensor(Shape(2, 3, 6, 6), DType.F32, rng)
    shapes = infer_shapes(g, x.shape)
    assert execute_reference(g, x).shape == shapes[g.sink]


def test_sigmoid_maxpool_commute_exactly(rng):
    """Monotone-commute law at F64, bit-for-bit."""
    pool = OperatorAttrs(kernel=(2, 2), stride=(2, 2), padding=Padding.VALID)
    sig_then_pool = chain(OperatorKind.SIGMOID, OperatorKind.MAX_POOL, attrs={1: pool})
    pool_then_sig = chain(OperatorKind.MAX_POOL, OperatorKind.SIGMOID, attrs={0: pool})
    for _ in range(50):
        x = random_seed_tensor(Shape(1, 2, 4, 4), DType.F64, rng)
        a = execute_reference(sig_then_pool, x)
        b = execute_reference(pool_then_sig, x)
        assert a.bit_equal(b)


def test_eval_operator_arity_check():
    with pytest.raises(ExecError, match="input"):
        eval_operator(OperatorKind.RELU, OperatorAttrs(), [])


def test_exec_error_on_bad_shapes(rng):
    g = chain(
        OperatorKind.MAX_POOL,
        attrs={0: OperatorAttrs(kernel=(4, 4), stride=(1, 1), padding=Padding.VALID)},
    )
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F32, rng)
    with pytest.raises(ExecError):
        execute_reference(g, x)


def test_bf16_execution_quantizes_intermediates(rng):
    g = chain(OperatorKind.SCALAR_ADD, attrs={0: OperatorAttrs(scalar=0.1)})
    x = random_seed_tensor(Shape(1, 1, 2, 2), DType.F32, rng)
    out = run_graph(g, x, exec_dtype=DType.BF16)
    # every produced value lies on the bf16 grid
    from optifuzz.tensors import quantize_array

    np.testing.assert_array_equal(out.data, quantize_array(out.data, DType.BF16))
