/**
 * Executes a fuzzer model on TensorFlow.js.
 *
 * Graph semantics mirror the coordinator's interpreter: edges apply their
 * operator to the value at their src vertex; a pair of matmul edges into one
 * vertex forms a single ordered matrix product; any other multi-edge fan-in
 * sums elementwise and passes through the canonical fusion normalization
 * (divide by sqrt(1 + 1e-3)).  Convolution and pooling hop through NHWC, the
 * layout the framework's kernels expect; everything elementwise stays NCHW.
 *
 * TensorFlow.js computes in float32: f64 inputs are downcast for execution
 * and the output is written back at the input's declared dtype.  bfloat16 is
 * not supported by the framework and is reported as a crash.
 */

import type * as tfTypes from "@tensorflow/tfjs";

import { DljtTensor, elementCount } from "./dljt.js";
import { Model, ModelEdge, edgesInto, topologicalOrder } from "./model.js";

type TF = typeof tfTypes;
type T4 = tfTypes.Tensor4D;

const MERGE_BN_EPSILON = 1e-3;

export class UnsupportedOpError extends Error {
  readonly errorKind = "unsupported-op";
}

export class UnsupportedDtypeError extends Error {
  readonly errorKind = "unsupported-dtype";
}

export class ExecutionTimeout extends Error {}

export class ExecutionError extends Error {
  readonly errorKind: string;
  constructor(kind: string, message: string) {
    super(message);
    this.errorKind = kind;
  }
}

const SUPPORTED_OPS = new Set([
  "identity", "none", "dropout", "relu", "sigmoid", "softmax", "batch_norm",
  "scale", "scalar_add", "scalar_mul", "conv2d", "depthwise_conv2d",
  "separable_conv2d", "fused_cbr", "max_pool", "average_pool",
  "reduce_mean_hw", "transpose", "reshape", "matmul", "add",
]);

function paramTensor(tf: TF, edge: ModelEdge, name: string): T4 {
  const p = edge.params[name];
  if (p === undefined) {
    throw new ExecutionError("missing-param", `${edge.op} edge ${edge.id} lacks param ${name}`);
  }
  if (p.dtype === "bf16") {
    throw new UnsupportedDtypeError(`param ${name} uses bfloat16`);
  }
  return tf.tensor4d(p.data, p.shape, "float32");
}

function channelVector(tf: TF, edge: ModelEdge, name: string): tfTypes.Tensor {
  // stored (1, C, 1, 1); broadcastable against NCHW activations as-is
  return paramTensor(tf, edge, name);
}

const toNHWC = (tf: TF, x: T4): T4 => tf.transpose(x, [0, 2, 3, 1]);
const toNCHW = (tf: TF, x: T4): T4 => tf.transpose(x, [0, 3, 1, 2]);

function convFilter(tf: TF, weight: T4): T4 {
  // (Cout, Cin, kh, kw) -> HWIO (kh, kw, Cin, Cout)
  return tf.transpose(weight, [2, 3, 1, 0]);
}

function conv2dNCHW(
  tf: TF, x: T4, weight: T4,
  stride: [number, number], padding: "same" | "valid"
): T4 {
  const out = tf.conv2d(toNHWC(tf, x), convFilter(tf, weight), stride, padding);
  return toNCHW(tf, out);
}

function scalarOperand(tf: TF, edge: ModelEdge): tfTypes.Tensor {
  if (edge.params["scalar"] !== undefined) {
    return tf.scalar(edge.params["scalar"].data[0], "float32");
  }
  if (edge.attrs.scalar === undefined) {
    throw new ExecutionError("missing-param", `edge ${edge.id} lacks a scalar`);
  }
  return tf.scalar(edge.attrs.scalar, "float32");
}

function applyEdge(tf: TF, edge: ModelEdge, x: T4): T4 {
  const attrs = edge.attrs;
  switch (edge.op) {
    case "identity":
    case "none":
    case "dropout":
      return x;
    case "relu":
      return tf.relu(x);
    case "sigmoid":
      return tf.sigmoid(x);
    case "softmax": {
      // over channels with max-subtraction, axis support varies across kernels
      const shifted = tf.sub(x, tf.max(x, 1, true));
      const exp = tf.exp(shifted);
      return tf.div(exp, tf.sum(exp, 1, true));
    }
    case "batch_norm": {
      const gamma = channelVector(tf, edge, "gamma");
      const beta = channelVector(tf, edge, "beta");
      const mean = channelVector(tf, edge, "mean");
      const variance = channelVector(tf, edge, "var");
      const eps = attrs.bn_epsilon ?? MERGE_BN_EPSILON;
      const scaled = tf.div(
        tf.mul(gamma, tf.sub(x, mean)),
        tf.sqrt(tf.add(variance, tf.scalar(eps)))
      );
      return tf.add(scaled, beta) as T4;
    }
    case "scale":
      return tf.add(
        tf.mul(channelVector(tf, edge, "alpha"), x),
        channelVector(tf, edge, "bias")
      ) as T4;
    case "scalar_add":
      return tf.add(x, scalarOperand(tf, edge)) as T4;
    case "scalar_mul":
      return tf.mul(x, scalarOperand(tf, edge)) as T4;
    case "conv2d":
      return conv2dNCHW(tf, x, paramTensor(tf, edge, "weight"), attrs.stride!, attrs.padding!);
    case "depthwise_conv2d": {
      const weight = paramTensor(tf, edge, "weight"); // (C, 1, kh, kw)
      const filter = tf.transpose(weight, [2, 3, 0, 1]) as T4; // (kh, kw, C, 1)
      const out = tf.depthwiseConv2d(toNHWC(tf, x), filter, attrs.stride!, attrs.padding!);
      return toNCHW(tf, out);
    }
    case "separable_conv2d": {
      const depthwise = tf.transpose(paramTensor(tf, edge, "depthwise"), [2, 3, 0, 1]) as T4;
      const pointwise = tf.transpose(paramTensor(tf, edge, "pointwise"), [2, 3, 1, 0]) as T4;
      const out = tf.separableConv2d(
        toNHWC(tf, x), depthwise, pointwise, attrs.stride!, attrs.padding!
      );
      return toNCHW(tf, out);
    }
    case "fused_cbr": {
      const conv = conv2dNCHW(tf, x, paramTensor(tf, edge, "weight"), attrs.stride!, attrs.padding!);
      return tf.relu(tf.add(conv, channelVector(tf, edge, "bias")));
    }
    case "max_pool": {
      const out = tf.maxPool(toNHWC(tf, x), attrs.kernel!, attrs.stride!, attrs.padding!);
      return toNCHW(tf, out);
    }
    case "average_pool": {
      const out = tf.avgPool(toNHWC(tf, x), attrs.kernel!, attrs.stride!, attrs.padding!);
      return toNCHW(tf, out);
    }
    case "reduce_mean_hw":
      return tf.mean(x, [2, 3], true) as T4;
    case "transpose":
      return tf.transpose(x, attrs.permutation!);
    case "reshape":
      return tf.reshape(x, attrs.target_shape!);
    default:
      throw new UnsupportedOpError(`operator "${edge.op}" has no framework mapping`);
  }
}

export function executeModel(
  tf: TF,
  model: Model,
  input: DljtTensor,
  deadlineExceeded: () => boolean = () => false
): DljtTensor {
  if (input.dtype === "bf16") {
    throw new UnsupportedDtypeError("the framework lacks bfloat16 tensors");
  }
  for (const edge of model.edges) {
    if (!SUPPORTED_OPS.has(edge.op)) {
      throw new UnsupportedOpError(`operator "${edge.op}" has no framework mapping`);
    }
  }

  const sinkValue = tf.tidy(() => {
    const values = new Map<number, T4>();
    const incoming = edgesInto(model);
    const source = tf.tensor4d(Array.from(input.data), input.dims, "float32");
    for (const vertex of topologicalOrder(model)) {
      if (deadlineExceeded()) {
        throw new ExecutionTimeout("deadline exceeded during execution");
      }
      if (vertex === model.source) {
        values.set(vertex, source);
        continue;
      }
      const edges = incoming.get(vertex) ?? [];
      const matmuls = edges.filter((e) => e.op === "matmul");
      let value: T4;
      if (matmuls.length > 0) {
        if (matmuls.length !== edges.length || matmuls.length !== 2) {
          throw new ExecutionError("bad-merge", `vertex ${vertex} has a malformed matmul merge`);
        }
        const [lhs, rhs] = matmuls.map((e) => values.get(e.src)!);
        value = tf.matMul(lhs, rhs) as unknown as T4;
      } else if (edges.length === 1) {
        value = applyEdge(tf, edges[0], values.get(edges[0].src)!);
      } else if (edges.length > 1) {
        let total = applyEdge(tf, edges[0], values.get(edges[0].src)!);
        for (const e of edges.slice(1)) {
          total = tf.add(total, applyEdge(tf, e, values.get(e.src)!));
        }
        value = tf.div(total, tf.scalar(Math.sqrt(1 + MERGE_BN_EPSILON))) as T4;
      } else {
        throw new ExecutionError("bad-merge", `vertex ${vertex} has no incoming edges`);
      }
      values.set(vertex, value);
    }
    return values.get(model.sink)!;
  });

  const dims = sinkValue.shape as [number, number, number, number];
  const flat = sinkValue.dataSync() as Float32Array;
  sinkValue.dispose();
  if (flat.length !== elementCount(dims)) {
    throw new ExecutionError("bad-output", "sink element count mismatch");
  }
  return {
    dims,
    dtype: input.dtype,
    data: input.dtype === "f64" ? Float64Array.from(flat) : Float32Array.from(flat),
  };
}
