/** Binary protocol: container header, entropy-coded payloads, wire framing,
 * snapshots. Mirrors the server byte-for-byte; every length and table is
 * validated before use and malformed input throws CodecError. */

export const MAGIC = 0x31534743; // "CGS1" little-endian
export const FORMAT_VERSION = 1;
export const HEADER_SIZE = 29;

export const TAG_WIRE_HEADER = 0x00;
export const TAG_INIT = 0x01;
export const TAG_MOTION = 0x02;
export const TAG_KEYCORR = 0x03;

export const MAX_BODY_BYTES = 256 * 1024 * 1024;
export const MAX_CODE_LEN = 15;
export const KEYPOINT_RECORD_BYTES = 4 + 14 * 4;
export const SNAPSHOT_FLOATS_PER_POINT = 23;

export class CodecError extends Error {}

export interface StreamHeader {
  nPoints: number;
  shDegree: number;
  gofInterval: number;
  k: number;
  tauAdap: number;
  phiThres: number;
  frameCount: number;
  version: number;
}

export interface Keypoint {
  index: number;
  deltaMu: Float32Array; // 3
  deltaQ: Float32Array;  // 4, (w, x, y, z)
  qAdap: Float32Array;   // 4
  sAdap: Float32Array;   // 3, positive extents
}

export interface MotionField {
  keypoints: Keypoint[];
  tauAdap: number;
}

export interface MaskedResiduals {
  nPoints: number;
  indices: Uint32Array;      // masked rows, ascending
  dMu: Float32Array;         // [m, 3]
  dQ: Float32Array;          // [m, 4]
  dLogS: Float32Array;       // [m, 3]
  dLogitSigma: Float32Array; // [m]
  dSh: Float32Array;         // [m, 12]
}

export interface ScenePlanes {
  n: number;
  mu: Float32Array;         // [n, 3]
  q: Float32Array;          // [n, 4]
  logS: Float32Array;       // [n, 3]
  logitSigma: Float32Array; // [n]
  sh: Float32Array;         // [n, 12]
}

export type Payload =
  | { tag: typeof TAG_INIT; scene: ScenePlanes }
  | { tag: typeof TAG_MOTION; motion: MotionField }
  | { tag: typeof TAG_KEYCORR; residuals: MaskedResiduals };

class Cursor {
  private view: DataView;
  off = 0;

  constructor(private buf: Uint8Array) {
    this.view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  }

  get length(): number {
    return this.buf.length;
  }

  take(n: number): Uint8Array {
    if (n < 0 || this.off + n > this.buf.length) {
      throw new CodecError("truncated data");
    }
    const out = this.buf.subarray(this.off, this.off + n);
    this.off += n;
    return out;
  }

  u8(): number {
    return this.take(1)[0];
  }

  u16(): number {
    const v = this.view.getUint16(this.boundsCheck(2), true);
    this.off += 2;
    return v;
  }

  u32(): number {
    const v = this.view.getUint32(this.boundsCheck(4), true);
    this.off += 4;
    return v;
  }

  f32(): number {
    const v = this.view.getFloat32(this.boundsCheck(4), true);
    this.off += 4;
    return v;
  }

  expectEnd(): void {
    if (this.off !== this.buf.length) {
      throw new CodecError(`${this.buf.length - this.off} trailing bytes`);
    }
  }

  private boundsCheck(n: number): number {
    if (this.off + n > this.buf.length) {
      throw new CodecError("truncated data");
    }
    return this.off;
  }
}

export function parseHeader(raw: Uint8Array): StreamHeader {
  if (raw.length < HEADER_SIZE) {
    throw new CodecError("truncated header");
  }
  const cur = new Cursor(raw.subarray(0, HEADER_SIZE));
  const magic = cur.u32();
  if (magic !== MAGIC) {
    throw new CodecError(`bad magic 0x${magic.toString(16)}`);
  }
  const version = cur.u16();
  if (version !== FORMAT_VERSION) {
    throw new CodecError(`unsupported format version ${version}`);
  }
  const h: StreamHeader = {
    version,
    nPoints: cur.u32(),
    shDegree: cur.u8(),
    gofInterval: cur.u16(),
    k: cur.u32(),
    tauAdap: cur.f32(),
    phiThres: cur.f32(),
    frameCount: cur.u32(),
  };
  if (!Number.isFinite(h.tauAdap) || !Number.isFinite(h.phiThres)) {
    throw new CodecError("non-finite header threshold");
  }
  if (h.nPoints < 1) {
    throw new CodecError("n_points out of range");
  }
  if (h.shDegree !== 1) {
    throw new CodecError("only SH degree 1 is supported");
  }
  if (h.gofInterval < 1) {
    throw new CodecError("gof_interval must be >= 1");
  }
  if (!(h.tauAdap > 0 && h.tauAdap < 1) || !(h.phiThres > 0 && h.phiThres < 1)) {
    throw new CodecError("threshold out of range");
  }
  return h;
}

// --- canonical Huffman ---------------------------------------------------------

function canonicalCodes(entries: Array<[number, number]>): number[] {
  const codes: number[] = [];
  let code = 0;
  let prevLen: number | null = null;
  for (const [, ln] of entries) {
    if (prevLen !== null) {
      code = (code + 1) << (ln - prevLen);
    }
    if (code >= 1 << ln) {
      throw new CodecError("code lengths overfill the code space");
    }
    codes.push(code);
    prevLen = ln;
  }
  return codes;
}

/** Decode one self-contained canonical-Huffman block into exactly
 * expectedCount bytes. Layout: u16 n_symbols, (u8 symbol, u8 length) pairs
 * in canonical order, then an MSB-first bitstream padded with zero bits. */
export function entropyDecode(block: Uint8Array, expectedCount: number): Uint8Array {
  const cur = new Cursor(block);
  const n = cur.u16();
  if (n === 0) {
    if (expectedCount !== 0) {
      throw new CodecError("empty code table for non-empty plane");
    }
    cur.expectEnd();
    return new Uint8Array(0);
  }
  if (n > 256) {
    throw new CodecError("oversized code table");
  }
  const entries: Array<[number, number]> = [];
  for (let i = 0; i < n; i++) {
    entries.push([cur.u8(), cur.u8()]);
  }
  if (n === 1) {
    const [sym, ln] = entries[0];
    if (ln !== 0) {
      throw new CodecError("single-symbol table must have length 0");
    }
    if (expectedCount === 0) {
      throw new CodecError("code table for empty plane");
    }
    cur.expectEnd();
    return new Uint8Array(expectedCount).fill(sym);
  }
  if (expectedCount === 0) {
    throw new CodecError("code table for empty plane");
  }
  const seen = new Set<number>();
  let prevKey = -1;
  for (const [sym, ln] of entries) {
    if (ln < 1 || ln > MAX_CODE_LEN) {
      throw new CodecError("code length out of range");
    }
    const key = ln * 256 + sym;
    if (key <= prevKey) {
      throw new CodecError("table not in canonical order");
    }
    prevKey = key;
    seen.add(sym);
  }
  if (seen.size !== n) {
    throw new CodecError("duplicate symbol in code table");
  }
  const codes = canonicalCodes(entries);

  const firstCode = new Map<number, number>();
  const firstIdx = new Map<number, number>();
  const count = new Map<number, number>();
  entries.forEach(([, ln], i) => {
    count.set(ln, (count.get(ln) ?? 0) + 1);
    if (!firstCode.has(ln)) {
      firstCode.set(ln, codes[i]);
      firstIdx.set(ln, i);
    }
  });

  const data = cur.take(block.length - cur.off);
  const out = new Uint8Array(expectedCount);
  let produced = 0;
  let code = 0;
  let ln = 0;
  let bitpos = 0;
  const totalBits = data.length * 8;
  while (produced < expectedCount) {
    if (bitpos >= totalBits) {
      throw new CodecError("bitstream truncated");
    }
    const bit = (data[bitpos >> 3] >> (7 - (bitpos & 7))) & 1;
    bitpos += 1;
    code = (code << 1) | bit;
    ln += 1;
    if (ln > MAX_CODE_LEN) {
      throw new CodecError("invalid code in bitstream");
    }
    const fc = firstCode.get(ln);
    if (fc !== undefined) {
      const off = code - fc;
      if (off >= 0 && off < count.get(ln)!) {
        out[produced++] = entries[firstIdx.get(ln)! + off][0];
        code = 0;
        ln = 0;
      }
    }
  }
  if (data.length !== (bitpos + 7) >> 3) {
    throw new CodecError("coded block length mismatch");
  }
  if (bitpos % 8 && data[data.length - 1] & ((1 << (8 - (bitpos % 8))) - 1)) {
    throw new CodecError("nonzero padding bits");
  }
  return out;
}

// --- attribute planes ------------------------------------------------------------

/** One quantized plane: u8 bits, u8 channels, per-channel f32 min/max,
 * u32 coded length, entropy block of channel-planar codes (16-bit planes
 * split lo-then-hi). Returns row-major [m, channels] float32. */
function decodeAttribute(
  cur: Cursor,
  m: number,
  expectBits: number,
  expectChannels: number,
): Float32Array {
  const bits = cur.u8();
  const channels = cur.u8();
  if (bits !== expectBits || channels !== expectChannels) {
    throw new CodecError(`attribute header mismatch: bits=${bits} channels=${channels}`);
  }
  const mins = new Float32Array(channels);
  const maxs = new Float32Array(channels);
  for (let c = 0; c < channels; c++) {
    mins[c] = cur.f32();
    maxs[c] = cur.f32();
    if (!Number.isFinite(mins[c]) || !Number.isFinite(maxs[c])) {
      throw new CodecError("non-finite quantization range");
    }
    if (maxs[c] < mins[c]) {
      throw new CodecError("max < min");
    }
  }
  const codedLen = cur.u32();
  if (codedLen > MAX_BODY_BYTES) {
    throw new CodecError("oversized coded block");
  }
  const raw = entropyDecode(cur.take(codedLen), m * channels * (bits / 8));
  const levels = (1 << bits) - 1;
  const out = new Float32Array(m * channels);
  for (let c = 0; c < channels; c++) {
    const step = (maxs[c] - mins[c]) / levels;
    const lo = c * m * (bits / 8);
    for (let i = 0; i < m; i++) {
      const codeValue = bits === 8 ? raw[lo + i] : raw[lo + i] | (raw[lo + m + i] << 8);
      out[i * channels + c] = Math.fround(mins[c] + codeValue * step);
    }
  }
  return out;
}

export function decodeInit(body: Uint8Array, nPoints: number): ScenePlanes {
  const cur = new Cursor(body);
  const planes = {
    mu: decodeAttribute(cur, nPoints, 16, 3),
    q: decodeAttribute(cur, nPoints, 8, 4),
    logS: decodeAttribute(cur, nPoints, 8, 3),
    logitSigma: decodeAttribute(cur, nPoints, 8, 1),
    sh: decodeAttribute(cur, nPoints, 8, 12),
  };
  cur.expectEnd();
  return { n: nPoints, ...planes };
}

export function decodeMotion(body: Uint8Array, tauAdap: number, nPoints: number): MotionField {
  const cur = new Cursor(body);
  const k = cur.u16();
  if (body.length !== 2 + k * KEYPOINT_RECORD_BYTES) {
    throw new CodecError("motion body length mismatch");
  }
  const keypoints: Keypoint[] = [];
  const seen = new Set<number>();
  for (let i = 0; i < k; i++) {
    const index = cur.u32();
    if (index >= nPoints) {
      throw new CodecError(`keypoint index ${index} out of range`);
    }
    if (seen.has(index)) {
      throw new CodecError("keypoint indices must be distinct");
    }
    seen.add(index);
    const params = new Float32Array(14);
    for (let p = 0; p < 14; p++) {
      params[p] = cur.f32();
      if (!Number.isFinite(params[p])) {
        throw new CodecError("non-finite keypoint parameters");
      }
    }
    for (let p = 11; p < 14; p++) {
      if (params[p] <= 0) {
        throw new CodecError("non-positive influence extent");
      }
    }
    keypoints.push({
      index,
      deltaMu: params.slice(0, 3),
      deltaQ: params.slice(3, 7),
      qAdap: params.slice(7, 11),
      sAdap: params.slice(11, 14),
    });
  }
  cur.expectEnd();
  return { keypoints, tauAdap };
}

export function decodeKeycorr(body: Uint8Array, nPoints: number): MaskedResiduals {
  const cur = new Cursor(body);
  const codedLen = cur.u32();
  if (codedLen > MAX_BODY_BYTES) {
    throw new CodecError("oversized mask block");
  }
  const maskBytes = entropyDecode(cur.take(codedLen), (nPoints + 7) >> 3);
  const indices: number[] = [];
  for (let i = 0; i < nPoints; i++) {
    if ((maskBytes[i >> 3] >> (i & 7)) & 1) {
      indices.push(i);
    }
  }
  for (let i = nPoints; i < maskBytes.length * 8; i++) {
    if ((maskBytes[i >> 3] >> (i & 7)) & 1) {
      throw new CodecError("nonzero padding in mask bitset");
    }
  }
  const m = cur.u32();
  if (m !== indices.length) {
    throw new CodecError(`mask popcount ${indices.length} != declared ${m}`);
  }
  if (m === 0) {
    cur.expectEnd();
    return {
      nPoints,
      indices: new Uint32Array(0),
      dMu: new Float32Array(0),
      dQ: new Float32Array(0),
      dLogS: new Float32Array(0),
      dLogitSigma: new Float32Array(0),
      dSh: new Float32Array(0),
    };
  }
  const out: MaskedResiduals = {
    nPoints,
    indices: Uint32Array.from(indices),
    dMu: decodeAttribute(cur, m, 8, 3),
    dQ: decodeAttribute(cur, m, 8, 4),
    dLogS: decodeAttribute(cur, m, 8, 3),
    dLogitSigma: decodeAttribute(cur, m, 8, 1),
    dSh: decodeAttribute(cur, m, 8, 12),
  };
  cur.expectEnd();
  return out;
}

export function decodePayload(tag: number, body: Uint8Array, header: StreamHeader): Payload {
  if (tag === TAG_INIT) {
    return { tag, scene: decodeInit(body, header.nPoints) };
  }
  if (tag === TAG_MOTION) {
    return { tag, motion: decodeMotion(body, header.tauAdap, header.nPoints) };
  }
  if (tag === TAG_KEYCORR) {
    return { tag, residuals: decodeKeycorr(body, header.nPoints) };
  }
  throw new CodecError(`unknown record tag 0x${tag.toString(16)}`);
}

// --- container and wire framing ----------------------------------------------------

export interface WireMessage {
  tag: number;
  body: Uint8Array;
}

/** Records of a `.cgs` container: u8 tag + u32 length + body after the header. */
export function readContainer(data: Uint8Array): { header: StreamHeader; records: WireMessage[] } {
  const header = parseHeader(data);
  const cur = new Cursor(data);
  cur.take(HEADER_SIZE);
  const records: WireMessage[] = [];
  while (cur.off < data.length) {
    const tag = cur.u8();
    if (tag !== TAG_INIT && tag !== TAG_MOTION && tag !== TAG_KEYCORR) {
      throw new CodecError(`unknown record tag 0x${tag.toString(16)}`);
    }
    const blen = cur.u32();
    if (blen > MAX_BODY_BYTES) {
      throw new CodecError("record body exceeds size cap");
    }
    records.push({ tag, body: cur.take(blen) });
  }
  return { header, records };
}

/** Incremental live-wire parser (u32 body length + u8 tag + body). */
export class MessageParser {
  private chunks: Uint8Array[] = [];
  private buffered = 0;

  constructor(private maxBody: number = MAX_BODY_BYTES) {}

  get atBoundary(): boolean {
    return this.buffered === 0;
  }

  feed(data: Uint8Array): void {
    if (data.length) {
      this.chunks.push(data);
      this.buffered += data.length;
    }
  }

  /** Drain every complete message currently buffered. */
  messages(): WireMessage[] {
    const out: WireMessage[] = [];
    for (;;) {
      if (this.buffered < 5) {
        return out;
      }
      const head = this.peek(5);
      const blen = head[0] + head[1] * 0x100 + head[2] * 0x10000 + head[3] * 0x1000000;
      if (blen > this.maxBody) {
        throw new CodecError(`declared body length ${blen} exceeds cap`);
      }
      if (this.buffered < 5 + blen) {
        return out;
      }
      const msg = this.consume(5 + blen);
      out.push({ tag: msg[4], body: msg.subarray(5) });
    }
  }

  private peek(n: number): Uint8Array {
    const out = new Uint8Array(n);
    let filled = 0;
    for (const chunk of this.chunks) {
      const take = Math.min(chunk.length, n - filled);
      out.set(chunk.subarray(0, take), filled);
      filled += take;
      if (filled === n) break;
    }
    return out;
  }

  private consume(n: number): Uint8Array {
    const out = new Uint8Array(n);
    let filled = 0;
    while (filled < n) {
      const chunk = this.chunks[0];
      const take = Math.min(chunk.length, n - filled);
      out.set(chunk.subarray(0, take), filled);
      filled += take;
      if (take === chunk.length) {
        this.chunks.shift();
      } else {
        this.chunks[0] = chunk.subarray(take);
      }
    }
    this.buffered -= n;
    return out;
  }
}

export function unpackWireHeader(body: Uint8Array): { header: StreamHeader; startFrame: number } {
  const header = parseHeader(body);
  if (body.length !== HEADER_SIZE + 4) {
    throw new CodecError("wire header length mismatch");
  }
  const view = new DataView(body.buffer, body.byteOffset + HEADER_SIZE, 4);
  return { header, startFrame: view.getUint32(0, true) };
}

// --- snapshots -------------------------------------------------------------------

/** u32 frame, u32 N, then row-major f32 planes in INIT attribute order. */
export function parseSnapshot(raw: Uint8Array): { frame: number; scene: ScenePlanes } {
  if (raw.length < 8) {
    throw new CodecError("snapshot too short");
  }
  const view = new DataView(raw.buffer, raw.byteOffset, 8);
  const frame = view.getUint32(0, true);
  const n = view.getUint32(4, true);
  const expect = 8 + n * SNAPSHOT_FLOATS_PER_POINT * 4;
  if (raw.length !== expect) {
    throw new CodecError(`snapshot length ${raw.length} != expected ${expect}`);
  }
  // copy: realign, and detach from the transport buffer
  const flat = new Float32Array(n * SNAPSHOT_FLOATS_PER_POINT);
  const src = new DataView(raw.buffer, raw.byteOffset + 8);
  for (let i = 0; i < flat.length; i++) {
    flat[i] = src.getFloat32(i * 4, true);
  }
  let off = 0;
  const take = (count: number) => {
    const out = flat.slice(off, off + count);
    off += count;
    return out;
  };
  return {
    frame,
    scene: {
      n,
      mu: take(3 * n),
      q: take(4 * n),
      logS: take(3 * n),
      logitSigma: take(n),
      sh: take(12 * n),
    },
  };
}
