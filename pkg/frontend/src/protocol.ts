/**
 * Newline-delimited JSON wire protocol over stdin/stdout.
 *
 * One request per line, exactly one response line per request, always valid
 * JSON.  A model-level failure is a crash *response*; the process itself only
 * exits when its stdin closes.
 */

import { createInterface } from "node:readline";
import { readFileSync, writeFileSync } from "node:fs";

import type * as tfTypes from "@tensorflow/tfjs";

import { readDljt, writeDljt } from "./dljt.js";
import {
  ExecutionTimeout,
  UnsupportedDtypeError,
  UnsupportedOpError,
  executeModel,
} from "./executor.js";
import { parseModel } from "./model.js";

export interface WireRequest {
  model_path: string;
  tensor_path: string;
  output_path: string;
  timeout_ms: number;
}

export type WireResponse =
  | { status: "ok"; output_path: string }
  | { status: "crash"; error_kind: string; message: string }
  | { status: "timeout" };

function crash(kind: string, message: string): WireResponse {
  return { status: "crash", error_kind: kind, message };
}

export function handleRequest(tf: typeof tfTypes, request: WireRequest): WireResponse {
  const deadline = Date.now() + (request.timeout_ms > 0 ? request.timeout_ms : 3_600_000);
  try {
    const model = parseModel(readFileSync(request.model_path, "utf-8"));
    const input = readDljt(readFileSync(request.tensor_path));
    const output = executeModel(tf, model, input, () => Date.now() > deadline);
    writeFileSync(request.output_path, writeDljt(output));
    return { status: "ok", output_path: request.output_path };
  } catch (err) {
    if (err instanceof ExecutionTimeout) {
      return { status: "timeout" };
    }
    if (err instanceof UnsupportedOpError) {
      return crash("unsupported-op", err.message);
    }
    if (err instanceof UnsupportedDtypeError) {
      return crash("unsupported-dtype", err.message);
    }
    const name = err instanceof Error ? err.constructor.name : "unknown";
    const message = err instanceof Error ? err.message : String(err);
    return crash(name, message);
  }
}

export function serve(tf: typeof tfTypes, input: NodeJS.ReadableStream, output: NodeJS.WritableStream): Promise<void> {
  const reader = createInterface({ input, terminal: false });
  return new Promise((resolve) => {
    reader.on("line", (line) => {
      const text = line.trim();
      if (text.length === 0) return;
      let response: WireResponse;
      try {
        const request = JSON.parse(text) as WireRequest;
        response = handleRequest(tf, request);
      } catch (err) {
        response = crash("protocol-error", err instanceof Error ? err.message : String(err));
      }
      output.write(JSON.stringify(response) + "\n");
    });
    reader.on("close", resolve);
  });
}
