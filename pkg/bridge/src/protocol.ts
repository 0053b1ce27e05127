/**
 * Byte protocol for denoise requests (little-endian, one request per
 * message, responses strictly in order):
 *
 *   request:  'PPD1' | u32 height | u32 width | f64 tau
 *             | height*width f64 real plane | height*width f64 imag plane
 *   response: 'PPR1' | u8 status
 *             status 0: two f64 planes as above
 *             status 1: u32 msgLen | UTF-8 message
 */

export const REQUEST_MAGIC = Buffer.from("PPD1");
export const RESPONSE_MAGIC = Buffer.from("PPR1");

export const REQUEST_HEAD_BYTES = 4 + 4 + 4 + 8;

export interface DenoiseRequest {
  height: number;
  width: number;
  tau: number;
  real: Float64Array;
  imag: Float64Array;
}

export class ProtocolError extends Error {}

export function encodeRequest(req: DenoiseRequest): Buffer {
  const n = req.height * req.width;
  if (req.real.length !== n || req.imag.length !== n) {
    throw new ProtocolError(`plane length mismatch for ${req.height}x${req.width}`);
  }
  const buf = Buffer.alloc(REQUEST_HEAD_BYTES + 16 * n);
  REQUEST_MAGIC.copy(buf, 0);
  buf.writeUInt32LE(req.height, 4);
  buf.writeUInt32LE(req.width, 8);
  buf.writeDoubleLE(req.tau, 12);
  Buffer.from(req.real.buffer, req.real.byteOffset, 8 * n).copy(buf, REQUEST_HEAD_BYTES);
  Buffer.from(req.imag.buffer, req.imag.byteOffset, 8 * n).copy(buf, REQUEST_HEAD_BYTES + 8 * n);
  return buf;
}

/**
 * Parse one request from the front of a stream buffer.
 * Returns null while the buffer does not yet hold a complete message;
 * throws ProtocolError on a bad magic (the stream is unrecoverable then).
 */
export function decodeRequest(
  pending: Buffer
): { request: DenoiseRequest; remaining: Buffer } | null {
  if (pending.length < REQUEST_HEAD_BYTES) return null;
  if (!pending.subarray(0, 4).equals(REQUEST_MAGIC)) {
    throw new ProtocolError(`bad request magic ${pending.subarray(0, 4).toString("hex")}`);
  }
  const height = pending.readUInt32LE(4);
  const width = pending.readUInt32LE(8);
  const tau = pending.readDoubleLE(12);
  const n = height * width;
  const total = REQUEST_HEAD_BYTES + 16 * n;
  if (pending.length < total) return null;
  const planes = pending.subarray(REQUEST_HEAD_BYTES, total);
  // copy out so the request owns its data independent of the stream buffer
  const real = new Float64Array(n);
  const imag = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    real[i] = planes.readDoubleLE(8 * i);
    imag[i] = planes.readDoubleLE(8 * (n + i));
  }
  return { request: { height, width, tau, real, imag }, remaining: pending.subarray(total) };
}

export function encodeOkResponse(real: Float64Array, imag: Float64Array): Buffer {
  const n = real.length;
  const buf = Buffer.alloc(5 + 16 * n);
  RESPONSE_MAGIC.copy(buf, 0);
  buf.writeUInt8(0, 4);
  Buffer.from(real.buffer, real.byteOffset, 8 * n).copy(buf, 5);
  Buffer.from(imag.buffer, imag.byteOffset, 8 * n).copy(buf, 5 + 8 * n);
  return buf;
}

export function encodeErrorResponse(message: string): Buffer {
  const msg = Buffer.from(message, "utf-8");
  const buf = Buffer.alloc(5 + 4 + msg.length);
  RESPONSE_MAGIC.copy(buf, 0);
  buf.writeUInt8(1, 4);
  buf.writeUInt32LE(msg.length, 5);
  msg.copy(buf, 9);
  return buf;
}

/** Decode a full response buffer (test helper; expects exactly one message). */
export function decodeResponse(
  buf: Buffer,
  n: number
): { status: 0; real: Float64Array; imag: Float64Array } | { status: 1; message: string } {
  if (buf.length < 5 || !buf.subarray(0, 4).equals(RESPONSE_MAGIC)) {
    throw new ProtocolError("bad response magic");
  }
  const status = buf.readUInt8(4);
  if (status === 1) {
    const len = buf.readUInt32LE(5);
    return { status: 1, message: buf.subarray(9, 9 + len).toString("utf-8") };
  }
  if (status !== 0) throw new ProtocolError(`unknown status ${status}`);
  if (buf.length < 5 + 16 * n) throw new ProtocolError("short ok response");
  const real = new Float64Array(n);
  const imag = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    real[i] = buf.readDoubleLE(5 + 8 * i);
    imag[i] = buf.readDoubleLE(5 + 8 * (n + i));
  }
  return { status: 0, real, imag };
}
