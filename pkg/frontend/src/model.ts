/** Model JSON schema shared with the fuzzer coordinator. */

import type { DTypeName } from "./dljt.js";

export interface ParamTensor {
  dtype: DTypeName;
  shape: [number, number, number, number];
  data: number[];
}

export interface ModelEdge {
  id: number;
  src: number;
  dst: number;
  op: string;
  attrs: {
    kernel?: [number, number];
    stride?: [number, number];
    padding?: "same" | "valid";
    bn_epsilon?: number;
    permutation?: [number, number, number, number];
    target_shape?: [number, number, number, number];
    scalar?: number;
  };
  params: Record<string, ParamTensor>;
}

export interface Model {
  version: number;
  source: number;
  sink: number;
  vertices: { id: number }[];
  edges: ModelEdge[];
}

export class ModelParseError extends Error {}

export function parseModel(text: string): Model {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (err) {
    throw new ModelParseError(`model is not valid JSON: ${(err as Error).message}`);
  }
  const obj = raw as Model;
  for (const key of ["version", "source", "sink", "vertices", "edges"] as const) {
    if (obj[key] === undefined) {
      throw new ModelParseError(`model is missing key "${key}"`);
    }
  }
  if (obj.version !== 1) {
    throw new ModelParseError(`unsupported model version ${obj.version}`);
  }
  return obj;
}

/** Vertices in topological order, smallest ready id first. */
export function topologicalOrder(model: Model): number[] {
  const ids = model.vertices.map((v) => v.id);
  const indegree = new Map<number, number>(ids.map((v) => [v, 0]));
  const adjacency = new Map<number, number[]>(ids.map((v) => [v, []]));
  for (const e of model.edges) {
    indegree.set(e.dst, (indegree.get(e.dst) ?? 0) + 1);
    adjacency.get(e.src)?.push(e.dst);
  }
  const ready = ids.filter((v) => indegree.get(v) === 0).sort((a, b) => a - b);
  const order: number[] = [];
  while (ready.length > 0) {
    const v = ready.shift()!;
    order.push(v);
    for (const w of adjacency.get(v) ?? []) {
      const d = indegree.get(w)! - 1;
      indegree.set(w, d);
      if (d === 0) {
        ready.push(w);
        ready.sort((a, b) => a - b);
      }
    }
  }
  if (order.length !== ids.length) {
    throw new ModelParseError("model graph has a cycle");
  }
  return order;
}

export function edgesInto(model: Model): Map<number, ModelEdge[]> {
  const byDst = new Map<number, ModelEdge[]>();
  for (const e of [...model.edges].sort((a, b) => a.id - b.id)) {
    const bucket = byDst.get(e.dst) ?? [];
    bucket.push(e);
    byDst.set(e.dst, bucket);
  }
  return byDst;
}
