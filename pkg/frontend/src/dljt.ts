/**
 * DLJT tensor binary format.
 *
 * Layout: magic "DLJT" | u8 version=1 | u8 dtype (0=f32, 1=f64, 2=bf16) |
 * u8 rank=4 | u8 reserved=0 | four u32 LE extents (N, C, H, W) | raw
 * little-endian elements (bf16 stored as the upper 16 bits of the f32
 * pattern).
 */

export type DTypeName = "f32" | "f64" | "bf16";

export interface DljtTensor {
  dims: [number, number, number, number];
  dtype: DTypeName;
  /** bf16 payloads are widened to f32 values on read. */
  data: Float32Array | Float64Array;
}

const MAGIC = 0x444c4a54; // "DLJT" big-endian
const HEADER_BYTES = 24;

const DTYPE_CODES: Record<DTypeName, number> = { f32: 0, f64: 1, bf16: 2 };
const CODE_TO_DTYPE: Record<number, DTypeName> = { 0: "f32", 1: "f64", 2: "bf16" };

export class FormatError extends Error {}

export function elementCount(dims: readonly number[]): number {
  return dims.reduce((a, b) => a * b, 1);
}

export function readDljt(buffer: Buffer): DljtTensor {
  if (buffer.length < HEADER_BYTES) {
    throw new FormatError(`truncated header: ${buffer.length} bytes`);
  }
  if (buffer.readUInt32BE(0) !== MAGIC) {
    throw new FormatError("bad magic");
  }
  const version = buffer.readUInt8(4);
  const dtypeCode = buffer.readUInt8(5);
  const rank = buffer.readUInt8(6);
  const reserved = buffer.readUInt8(7);
  if (version !== 1 || rank !== 4 || reserved !== 0) {
    throw new FormatError(`unsupported header: version=${version} rank=${rank}`);
  }
  const dtype = CODE_TO_DTYPE[dtypeCode];
  if (dtype === undefined) {
    throw new FormatError(`unknown dtype code ${dtypeCode}`);
  }
  const dims: [number, number, number, number] = [
    buffer.readUInt32LE(8),
    buffer.readUInt32LE(12),
    buffer.readUInt32LE(16),
    buffer.readUInt32LE(20),
  ];
  const count = elementCount(dims);
  const width = dtype === "f64" ? 8 : dtype === "f32" ? 4 : 2;
  if (buffer.length < HEADER_BYTES + count * width) {
    throw new FormatError(
      `truncated data: need ${count * width} bytes, got ${buffer.length - HEADER_BYTES}`
    );
  }
  const payload = buffer.subarray(HEADER_BYTES, HEADER_BYTES + count * width);
  if (dtype === "f64") {
    const data = new Float64Array(count);
    for (let i = 0; i < count; i++) data[i] = payload.readDoubleLE(i * 8);
    return { dims, dtype, data };
  }
  if (dtype === "f32") {
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) data[i] = payload.readFloatLE(i * 4);
    return { dims, dtype, data };
  }
  const data = new Float32Array(count);
  const view = new DataView(new ArrayBuffer(4));
  for (let i = 0; i < count; i++) {
    view.setUint32(0, payload.readUInt16LE(i * 2) << 16);
    data[i] = view.getFloat32(0);
  }
  return { dims, dtype, data };
}

/** Round a float32 bit pattern to the nearest bf16 (ties to even). */
function bf16Bits(value: number): number {
  const view = new DataView(new ArrayBuffer(4));
  view.setFloat32(0, Math.fround(value));
  const bits = view.getUint32(0);
  if (Number.isNaN(value)) return 0x7fc0;
  const rounded = (bits + 0x7fff + ((bits >>> 16) & 1)) >>> 16;
  return rounded & 0xffff;
}

export function writeDljt(tensor: DljtTensor): Buffer {
  const count = elementCount(tensor.dims);
  if (tensor.data.length !== count) {
    throw new FormatError(`data length ${tensor.data.length} != ${count}`);
  }
  const width = tensor.dtype === "f64" ? 8 : tensor.dtype === "f32" ? 4 : 2;
  const buffer = Buffer.alloc(HEADER_BYTES + count * width);
  buffer.writeUInt32BE(MAGIC, 0);
  buffer.writeUInt8(1, 4);
  buffer.writeUInt8(DTYPE_CODES[tensor.dtype], 5);
  buffer.writeUInt8(4, 6);
  buffer.writeUInt8(0, 7);
  tensor.dims.forEach((d, i) => buffer.writeUInt32LE(d, 8 + 4 * i));
  for (let i = 0; i < count; i++) {
    const v = tensor.data[i];
    if (tensor.dtype === "f64") buffer.writeDoubleLE(v, HEADER_BYTES + i * 8);
    else if (tensor.dtype === "f32") buffer.writeFloatLE(Math.fround(v), HEADER_BYTES + i * 4);
    else buffer.writeUInt16LE(bf16Bits(v), HEADER_BYTES + i * 2);
  }
  return buffer;
}
