import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ChildProcessWithoutNullStreams, spawn } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { createInterface, Interface } from "node:readline";
import { join } from "node:path";

import { DljtTensor, readDljt, writeDljt } from "../src/dljt.js";
import { Model } from "../src/model.js";

let workdir: string;
let child: ChildProcessWithoutNullStreams;
let lines: Interface;
const pending: ((line: string) => void)[] = [];

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "tfjs-backend-"));
  child = spawn("node", [join(import.meta.dirname, "..", "dist", "main.js")], {
    stdio: ["pipe", "pipe", "ignore"],
  });
  lines = createInterface({ input: child.stdout });
  lines.on("line", (line) => pending.shift()?.(line));
});

afterAll(() => {
  child.stdin.end();
  child.kill();
  rmSync(workdir, { recursive: true, force: true });
});

function request(req: object, timeoutMs = 30000): Promise<string> {
  return new Promise((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("no response line")), timeoutMs);
    pending.push((line) => {
      clearTimeout(timer);
      resolve(line);
    });
    child.stdin.write(JSON.stringify(req) + "\n");
  });
}

let counter = 0;

function stage(model: Model, tensor: DljtTensor, timeout_ms = 30000) {
  const tag = `case-${counter++}`;
  const modelPath = join(workdir, `${tag}.model.json`);
  const tensorPath = join(workdir, `${tag}.input.dljt`);
  const outputPath = join(workdir, `${tag}.output.dljt`);
  writeFileSync(modelPath, JSON.stringify(model));
  writeFileSync(tensorPath, writeDljt(tensor));
  return { model_path: modelPath, tensor_path: tensorPath, output_path: outputPath, timeout_ms };
}

function identityChain(length: number): Model {
  return {
    version: 1,
    source: 0,
    sink: length,
    vertices: Array.from({ length: length + 1 }, (_, id) => ({ id })),
    edges: Array.from({ length }, (_, i) => ({
      id: i, src: i, dst: i + 1, op: "identity", attrs: {}, params: {},
    })),
  };
}

function convChain(length: number, channels: number, extent: number): Model {
  const weight = {
    dtype: "f32" as const,
    shape: [channels, channels, 3, 3] as [number, number, number, number],
    data: Array.from({ length: channels * channels * 9 }, (_, i) => ((i % 7) - 3) / 63),
  };
  return {
    version: 1,
    source: 0,
    sink: length,
    vertices: Array.from({ length: length + 1 }, (_, id) => ({ id })),
    edges: Array.from({ length }, (_, i) => ({
      id: i, src: i, dst: i + 1, op: "conv2d",
      attrs: { kernel: [3, 3] as [number, number], stride: [1, 1] as [number, number], padding: "same" as const },
      params: { weight },
    })),
  };
}

function randomTensor(dims: [number, number, number, number]): DljtTensor {
  const count = dims.reduce((a, b) => a * b, 1);
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) data[i] = Math.fround(Math.sin(i * 12.9898) % 1);
  return { dims, dtype: "f32", data };
}

describe("wire protocol", () => {
  it("answers ok with an output within 1e-5 of the input on identity chains", async () => {
    const tensor = randomTensor([1, 1, 3, 3]);
    const req = stage(identityChain(3), tensor);
    const response = JSON.parse(await request(req));
    expect(response.status).toBe("ok");
    expect(response.output_path).toBe(req.output_path);
    const out = readDljt(readFileSync(req.output_path));
    expect(out.dims).toEqual(tensor.dims);
    for (let i = 0; i < out.data.length; i++) {
      expect(Math.abs(out.data[i] - tensor.data[i])).toBeLessThan(1e-5);
    }
  });

  it("answers crash with unsupported-op for unknown operators", async () => {
    const model = identityChain(1);
    model.edges[0].op = "hyperdrive";
    const response = JSON.parse(await request(stage(model, randomTensor([1, 1, 2, 2]))));
    expect(response.status).toBe("crash");
    expect(response.error_kind).toBe("unsupported-op");
  });

  it("answers crash with unsupported-dtype for bfloat16 tensors", async () => {
    const tensor: DljtTensor = {
      dims: [1, 1, 1, 2],
      dtype: "bf16",
      data: Float32Array.from([0.5, 0.25]),
    };
    const response = JSON.parse(await request(stage(identityChain(2), tensor)));
    expect(response.status).toBe("crash");
    expect(response.error_kind).toBe("unsupported-dtype");
  });

  it("answers timeout when the budget is instantly exhausted", async () => {
    const req = stage(convChain(40, 4, 32), randomTensor([1, 4, 32, 32]), 1);
    const response = JSON.parse(await request(req, 60000));
    expect(response.status).toBe("timeout");
  });

  it("answers exactly one valid JSON line even for garbage requests", async () => {
    const response = JSON.parse(await request({ nonsense: true }));
    expect(response.status).toBe("crash");
  });

  it("keeps serving after failures", async () => {
    const req = stage(identityChain(1), randomTensor([1, 1, 2, 2]));
    const response = JSON.parse(await request(req));
    expect(response.status).toBe("ok");
  });

  it("writes bit-valid output files", async () => {
    const tensor = randomTensor([2, 3, 4, 5]);
    const req = stage(identityChain(2), tensor);
    const response = JSON.parse(await request(req));
    expect(response.status).toBe("ok");
    const blob = readFileSync(req.output_path);
    expect(blob.subarray(0, 4).toString("ascii")).toBe("DLJT");
    const out = readDljt(blob); // header/extent agreement enforced by the reader
    expect(out.dims).toEqual([2, 3, 4, 5]);
  });
});
