"""Bit-exact serialization: quantization, entropy coding, payloads, container.

Everything on the wire is little-endian. Scene attributes are min-max
quantized per channel (16-bit positions, 8-bit everything else) and
entropy-coded with a canonical Huffman code; keypoint records are raw
32-bit floats. The `.cgs` container is a fixed 29-byte header followed by
tagged, length-prefixed records. Decoders validate every length and table
before allocating, and raise CodecError on any malformed input.

Byte layouts are documented with hex examples in FORMAT.md.
"""

from __future__ import annotations

import heapq
import math
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

from .core import SceneState
from .corrector import MaskedResiduals
from .motion import Keypoint, MotionField

MAGIC = b"CGS1"
FORMAT_VERSION = 1

TAG_INIT = 0x01
TAG_MOTION = 0x02
TAG_KEYCORR = 0x03
_KNOWN_TAGS = (TAG_INIT, TAG_MOTION, TAG_KEYCORR)

MAX_BODY_BYTES = 256 * 1024 * 1024
MAX_POINTS = 50_000_000
MAX_FRAMES = 10_000_000
MAX_CODE_LEN = 15

KEYPOINT_RECORD_BYTES = 4 + 14 * 4  # u32 index + 14 f32 params


class CodecError(Exception):
    """Malformed or inconsistent coded data."""


class _Cursor:
    """Bounds-checked reader over a byte buffer."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.buf):
            raise CodecError("truncated data")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def expect_end(self):
        if self.off != len(self.buf):
            raise CodecError(f"{len(self.buf) - self.off} trailing bytes")


# --- quantization -------------------------------------------------------------


@dataclass
class QuantSpec:
    """Per-channel min-max quantization grid."""

    bits: int
    mins: np.ndarray    # [C] float32
    maxs: np.ndarray    # [C] float32

    def __post_init__(self):
        if self.bits not in (8, 16):
            raise ValueError("bits must be 8 or 16")
        self.mins = np.asarray(self.mins, dtype=np.float32).reshape(-1)
        self.maxs = np.asarray(self.maxs, dtype=np.float32).reshape(-1)
        if self.mins.shape != self.maxs.shape:
            raise ValueError("min/max channel count mismatch")
        if not (np.isfinite(self.mins).all() and np.isfinite(self.maxs).all()):
            raise ValueError("non-finite quantization range")
        if (self.maxs < self.mins).any():
            raise ValueError("max < min")

    @property
    def n_channels(self) -> int:
        return int(self.mins.shape[0])

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def step(self) -> np.ndarray:
        """Per-channel grid spacing in float64 (0 for degenerate ranges)."""
        return (self.maxs.astype(np.float64) - self.mins.astype(np.float64)) / self.levels


def make_quant_spec(values: np.ndarray, bits: int) -> QuantSpec:
    """Fit a per-channel range to a [M, C] plane."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 2:
        raise ValueError("expected a [M, C] plane")
    if not np.isfinite(v).all():
        raise ValueError("non-finite values")
    if v.shape[0] == 0:
        raise ValueError("empty plane")
    return QuantSpec(bits=bits, mins=v.min(axis=0), maxs=v.max(axis=0))


def quantize(values: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Map a [M, C] float plane onto integer codes in [0, 2^bits - 1].

    Rounding is half-away-from-zero on the non-negative normalized offset;
    a degenerate (max = min) channel maps everything to code 0.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != spec.n_channels:
        raise ValueError("plane shape does not match spec")
    if not np.isfinite(v).all():
        raise CodecError("non-finite values")
    step = spec.step()
    safe = np.where(step > 0, step, 1.0)
    codes = np.floor((v - spec.mins.astype(np.float64)) / safe + 0.5)
    codes = np.clip(codes, 0, spec.levels)
    codes = np.where(step > 0, codes, 0.0)
    return codes.astype(np.uint16 if spec.bits == 16 else np.uint8)


def dequantize(codes: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Inverse map: min + code * step, as float32."""
    c = np.asarray(codes, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != spec.n_channels:
        raise ValueError("code shape does not match spec")
    return (spec.mins.astype(np.float64) + c * spec.step()).astype(np.float32)


# --- canonical Huffman --------------------------------------------------------


def _huffman_lengths(freqs: list[tuple[int, int]]) -> dict[int, int]:
    """Unrestricted Huffman code lengths; deterministic tie-break."""
    heap = [(w, i, (s,)) for i, (s, w) in enumerate(freqs)]
    heapq.heapify(heap)
    uid = len(heap)
    lengths = {s: 0 for s, _ in freqs}
    while len(heap) > 1:
        w1, _, s1 = heapq.heappop(heap)
        w2, _, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, uid, s1 + s2))
        uid += 1
    return lengths


def _package_merge(freqs: list[tuple[int, int]], max_len: int) -> dict[int, int]:
    """Optimal length-limited code lengths (coin-collector formulation)."""
    n = len(freqs)
    if n > (1 << max_len):
        raise CodecError("alphabet too large for code-length limit")
    base = sorted((w, (s,)) for s, w in freqs)
    level = list(base)
    for _ in range(max_len - 1):
        packages = [
            (level[i][0] + level[i + 1][0], level[i][1] + level[i + 1][1])
            for i in range(0, len(level) - 1, 2)
        ]
        level = sorted(base + packages)
    counts: Counter = Counter()
    for _, syms in level[: 2 * (n - 1)]:
        counts.update(syms)
    return dict(counts)


def _code_lengths(freqs: list[tuple[int, int]]) -> dict[int, int]:
    lengths = _huffman_lengths(freqs)
    if max(lengths.values()) > MAX_CODE_LEN:
        lengths = _package_merge(freqs, MAX_CODE_LEN)
    return lengths


def _canonical_codes(ordered: list[tuple[int, int]]) -> list[int]:
    """Assign canonical codes to (symbol, length) pairs already in canonical order."""
    codes = []
    code = 0
    prev_len = None
    for _, ln in ordered:
        if prev_len is not None:
            code = (code + 1) << (ln - prev_len)
        if code >= (1 << ln):
            raise CodecError("code lengths overfill the code space")
        codes.append(code)
        prev_len = ln
    return codes


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, code: int, length: int):
        self.acc = (self.acc << length) | code
        self.nbits += length
        while self.nbits >= 8:
            self.nbits -= 8
            self.buf.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def finish(self) -> bytes:
        if self.nbits:
            self.buf.append((self.acc << (8 - self.nbits)) & 0xFF)
            self.acc = 0
            self.nbits = 0
        return bytes(self.buf)


def entropy_encode(data: bytes) -> bytes:
    """Self-contained canonical-Huffman block.

    Layout: u16 n_symbols, then n (u8 symbol, u8 code_length) entries in
    canonical order, then the MSB-first bitstream padded with zero bits.
    A single-symbol alphabet stores length 0 and emits no bits; the symbol
    count travels out of band.
    """
    freq = Counter(data)
    n = len(freq)
    if n == 0:
        return struct.pack("<H", 0)
    if n == 1:
        (sym,) = freq
        return struct.pack("<HBB", 1, sym, 0)
    lengths = _code_lengths(sorted(freq.items()))
    ordered = sorted(lengths.items(), key=lambda kv: (kv[1], kv[0]))
    codes = _canonical_codes(ordered)
    table = struct.pack("<H", n) + b"".join(struct.pack("<BB", s, ln) for s, ln in ordered)
    lut = {s: (c, ln) for (s, ln), c in zip(ordered, codes)}
    w = _BitWriter()
    for b in data:
        code, ln = lut[b]
        w.write(code, ln)
    return table + w.finish()


def entropy_decode(block: bytes, expected_count: int) -> bytes:
    """Decode a block produced by entropy_encode into exactly expected_count bytes."""
    cur = _Cursor(block)
    n = cur.u16()
    if n == 0:
        if expected_count != 0:
            raise CodecError("empty code table for non-empty plane")
        cur.expect_end()
        return b""
    if n > 256:
        raise CodecError("oversized code table")
    entries = [(cur.u8(), cur.u8()) for _ in range(n)]
    if n == 1:
        sym, ln = entries[0]
        if ln != 0:
            raise CodecError("single-symbol table must have length 0")
        if expected_count == 0:
            raise CodecError("code table for empty plane")
        cur.expect_end()
        return bytes([sym]) * expected_count
    if expected_count == 0:
        raise CodecError("code table for empty plane")
    prev = None
    for sym, ln in entries:
        if not (1 <= ln <= MAX_CODE_LEN):
            raise CodecError("code length out of range")
        if prev is not None and (ln, sym) <= prev:
            raise CodecError("table not in canonical order")
        prev = (ln, sym)
    if len({s for s, _ in entries}) != n:
        raise CodecError("duplicate symbol in code table")
    codes = _canonical_codes(entries)

    # per-length canonical ranges for bitwise decoding
    first_code = {}
    first_idx = {}
    count = Counter(ln for _, ln in entries)
    for i, ((_, ln), c) in enumerate(zip(entries, codes)):
        if ln not in first_code:
            first_code[ln] = c
            first_idx[ln] = i

    data = cur.take(len(block) - cur.off)
    out = bytearray()
    code = 0
    ln = 0
    bitpos = 0
    total_bits = len(data) * 8
    while len(out) < expected_count:
        if bitpos >= total_bits:
            raise CodecError("bitstream truncated")
        bit = (data[bitpos >> 3] >> (7 - (bitpos & 7))) & 1
        bitpos += 1
        code = (code << 1) | bit
        ln += 1
        if ln > MAX_CODE_LEN:
            raise CodecError("invalid code in bitstream")
        if ln in first_code:
            off = code - first_code[ln]
            if 0 <= off < count[ln]:
                out.append(entries[first_idx[ln] + off][0])
                code = 0
                ln = 0
    if len(data) != (bitpos + 7) // 8:
        raise CodecError("coded block length mismatch")
    # zero padding enforced so every byte of the block is determined
    if bitpos % 8:
        if data[-1] & ((1 << (8 - bitpos % 8)) - 1):
            raise CodecError("nonzero padding bits")
    return bytes(out)


# --- attribute planes ---------------------------------------------------------


def _plane_to_bytes(codes: np.ndarray, bits: int) -> bytes:
    """Channel-planar byte blob; 16-bit planes split into lo then hi bytes."""
    if bits == 8:
        return b"".join(codes[:, c].astype(np.uint8).tobytes() for c in range(codes.shape[1]))
    blob = b""
    for c in range(codes.shape[1]):
        col = codes[:, c].astype(np.uint16)
        blob += (col & 0xFF).astype(np.uint8).tobytes() + (col >> 8).astype(np.uint8).tobytes()
    return blob


def _bytes_to_plane(raw: bytes, m: int, n_channels: int, bits: int) -> np.ndarray:
    a = np.frombuffer(raw, dtype=np.uint8)
    if bits == 8:
        return a.reshape(n_channels, m).T.astype(np.uint8)
    pairs = a.reshape(n_channels, 2, m)
    return (pairs[:, 0, :].astype(np.uint16) | (pairs[:, 1, :].astype(np.uint16) << 8)).T


def _encode_attribute(values: np.ndarray, bits: int) -> bytes:
    """QuantSpec header + u32-prefixed entropy-coded channel-planar block."""
    spec = make_quant_spec(values, bits)
    codes = quantize(values, spec)
    coded = entropy_encode(_plane_to_bytes(codes, bits))
    head = struct.pack("<BB", bits, spec.n_channels)
    for c in range(spec.n_channels):
        head += struct.pack("<ff", float(spec.mins[c]), float(spec.maxs[c]))
    return head + struct.pack("<I", len(coded)) + coded


def _decode_attribute(cur: _Cursor, m: int, expect_bits: int, expect_channels: int) -> np.ndarray:
    bits = cur.u8()
    n_channels = cur.u8()
    if bits != expect_bits or n_channels != expect_channels:
        raise CodecError(f"attribute header mismatch: bits={bits} channels={n_channels}")
    mins = np.empty(n_channels, dtype=np.float32)
    maxs = np.empty(n_channels, dtype=np.float32)
    for c in range(n_channels):
        mins[c] = cur.f32()
        maxs[c] = cur.f32()
    try:
        spec = QuantSpec(bits=bits, mins=mins, maxs=maxs)
    except ValueError as e:
        raise CodecError(str(e)) from e
    coded_len = cur.u32()
    if coded_len > MAX_BODY_BYTES:
        raise CodecError("oversized coded block")
    raw = entropy_decode(cur.take(coded_len), m * n_channels * (bits // 8))
    return dequantize(_bytes_to_plane(raw, m, n_channels, bits), spec)


# scene attribute order, channel counts, and bit widths for INIT bodies
_INIT_LAYOUT = (("mu", 3, 16), ("q", 4, 8), ("log_s", 3, 8), ("logit_sigma", 1, 8), ("sh", 12, 8))
# residual order for KEYCORR bodies
_KEYCORR_LAYOUT = (("d_mu", 3, 8), ("d_q", 4, 8), ("d_log_s", 3, 8), ("d_logit_sigma", 1, 8), ("d_sh", 12, 8))


def _scene_planes(scene: SceneState) -> dict[str, np.ndarray]:
    n = scene.n_points
    f = lambda t: t.detach().to(torch.float32).numpy().astype(np.float32)
    return {
        "mu": f(scene.mu).reshape(n, 3),
        "q": f(scene.q).reshape(n, 4),
        "log_s": f(scene.log_s).reshape(n, 3),
        "logit_sigma": f(scene.logit_sigma).reshape(n, 1),
        "sh": f(scene.sh).reshape(n, 12),
    }


def encode_init(scene: SceneState) -> bytes:
    """Full quantized scene snapshot."""
    planes = _scene_planes(scene)
    return b"".join(_encode_attribute(planes[name], bits) for name, _, bits in _INIT_LAYOUT)


def decode_init(body: bytes, n_points: int) -> SceneState:
    cur = _Cursor(body)
    planes = {}
    for name, channels, bits in _INIT_LAYOUT:
        planes[name] = _decode_attribute(cur, n_points, bits, channels)
    cur.expect_end()
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))
    return SceneState(
        mu=t(planes["mu"]),
        q=t(planes["q"]),
        log_s=t(planes["log_s"]),
        logit_sigma=t(planes["logit_sigma"].reshape(-1)),
        sh=t(planes["sh"].reshape(n_points, 4, 3)),
        timestep=0,
    )


def encode_motion(fld: MotionField) -> bytes:
    """u16 k then raw 60-byte keypoint records (u32 index + 14 f32)."""
    if fld.k > 0xFFFF:
        raise ValueError("too many keypoints for a u16 count")
    out = [struct.pack("<H", fld.k)]
    for kp in fld.keypoints:
        out.append(struct.pack("<I", kp.index))
        out.append(kp.params().to(torch.float32).numpy().astype("<f4").tobytes())
    return b"".join(out)


def decode_motion(body: bytes, tau_adap: float, n_points: int) -> MotionField:
    cur = _Cursor(body)
    k = cur.u16()
    if len(body) != 2 + k * KEYPOINT_RECORD_BYTES:
        raise CodecError("motion body length mismatch")
    kps = []
    for _ in range(k):
        idx = cur.u32()
        if idx >= n_points:
            raise CodecError(f"keypoint index {idx} out of range")
        params = np.frombuffer(cur.take(56), dtype="<f4").astype(np.float32)
        if not np.isfinite(params).all():
            raise CodecError("non-finite keypoint parameters")
        if (params[11:14] <= 0).any():
            raise CodecError("non-positive influence extent")
        kps.append(
            Keypoint(
                index=idx,
                delta_mu=torch.from_numpy(params[0:3].copy()),
                delta_q=torch.from_numpy(params[3:7].copy()),
                q_adap=torch.from_numpy(params[7:11].copy()),
                s_adap=torch.from_numpy(params[11:14].copy()),
            )
        )
    cur.expect_end()
    try:
        return MotionField(keypoints=kps, tau_adap=tau_adap)
    except ValueError as e:
        raise CodecError(str(e)) from e


def _pack_mask(hard: torch.Tensor) -> bytes:
    bits = hard.to(torch.bool).numpy()
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_mask(raw: bytes, n: int) -> np.ndarray:
    if len(raw) != (n + 7) // 8:
        raise CodecError("mask bitset length mismatch")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if bits[n:].any():
        raise CodecError("nonzero padding in mask bitset")
    return bits[:n].astype(bool)


def encode_keycorr(mr: MaskedResiduals) -> bytes:
    """Entropy-coded mask bitset, u32 M, then residual planes for M rows."""
    coded_mask = entropy_encode(_pack_mask(mr.hard))
    out = [struct.pack("<I", len(coded_mask)), coded_mask, struct.pack("<I", mr.popcount)]
    if mr.popcount > 0:
        planes = {
            "d_mu": mr.d_mu.numpy().reshape(-1, 3),
            "d_q": mr.d_q.numpy().reshape(-1, 4),
            "d_log_s": mr.d_log_s.numpy().reshape(-1, 3),
            "d_logit_sigma": mr.d_logit_sigma.numpy().reshape(-1, 1),
            "d_sh": mr.d_sh.numpy().reshape(-1, 12),
        }
        for name, _, bits in _KEYCORR_LAYOUT:
            out.append(_encode_attribute(planes[name], bits))
    return b"".join(out)


def decode_keycorr(body: bytes, n_points: int) -> MaskedResiduals:
    cur = _Cursor(body)
    coded_len = cur.u32()
    if coded_len > MAX_BODY_BYTES:
        raise CodecError("oversized mask block")
    mask = _unpack_mask(entropy_decode(cur.take(coded_len), (n_points + 7) // 8), n_points)
    m = cur.u32()
    if m != int(mask.sum()):
        raise CodecError(f"mask popcount {int(mask.sum())} != declared {m}")
    if m == 0:
        cur.expect_end()
        return MaskedResiduals.empty(n_points)
    planes = {}
    for name, channels, bits in _KEYCORR_LAYOUT:
        planes[name] = _decode_attribute(cur, m, bits, channels)
    cur.expect_end()
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))
    return MaskedResiduals(
        hard=torch.from_numpy(mask),
        d_mu=t(planes["d_mu"]),
        d_q=t(planes["d_q"]),
        d_log_s=t(planes["d_log_s"]),
        d_logit_sigma=t(planes["d_logit_sigma"].reshape(-1)),
        d_sh=t(planes["d_sh"].reshape(m, 4, 3)),
    )


# --- tagged payloads ----------------------------------------------------------


@dataclass
class InitPayload:
    scene: SceneState
    tag: int = TAG_INIT


@dataclass
class MotionPayload:
    motion: MotionField
    tag: int = TAG_MOTION


@dataclass
class KeycorrPayload:
    residuals: MaskedResiduals
    tag: int = TAG_KEYCORR


FramePayload = InitPayload | MotionPayload | KeycorrPayload


def encode_payload(payload: FramePayload) -> tuple[int, bytes]:
    if isinstance(payload, InitPayload):
        return TAG_INIT, encode_init(payload.scene)
    if isinstance(payload, MotionPayload):
        return TAG_MOTION, encode_motion(payload.motion)
    if isinstance(payload, KeycorrPayload):
        return TAG_KEYCORR, encode_keycorr(payload.residuals)
    raise ValueError(f"unknown payload type {type(payload)!r}")


def decode_payload(tag: int, body: bytes, header: "StreamHeader") -> FramePayload:
    if tag == TAG_INIT:
        return InitPayload(decode_init(body, header.n_points))
    if tag == TAG_MOTION:
        return MotionPayload(decode_motion(body, header.tau_adap, header.n_points))
    if tag == TAG_KEYCORR:
        return KeycorrPayload(decode_keycorr(body, header.n_points))
    raise CodecError(f"unknown record tag 0x{tag:02x}")


# --- container ----------------------------------------------------------------

_HEADER_STRUCT = struct.Struct("<4sHIBHIffI")
HEADER_SIZE = _HEADER_STRUCT.size


@dataclass
class StreamHeader:
    """Everything a decoder needs before the first record."""

    n_points: int
    sh_degree: int = 1
    gof_interval: int = 10
    k: int = 200
    tau_adap: float = 0.01
    phi_thres: float = 0.5
    frame_count: int = 0
    version: int = FORMAT_VERSION

    def __post_init__(self):
        # thresholds travel as f32; canonicalize so the encoder's in-memory
        # header and a receiver's unpacked header compare bit-equal
        self.tau_adap = float(np.float32(self.tau_adap))
        self.phi_thres = float(np.float32(self.phi_thres))
        if not (1 <= self.n_points <= MAX_POINTS):
            raise ValueError(f"n_points out of range: {self.n_points}")
        if self.sh_degree != 1:
            raise ValueError("only SH degree 1 is supported")
        if self.gof_interval < 1:
            raise ValueError("gof_interval must be >= 1")
        if not (0 <= self.k <= 0xFFFFFFFF):
            raise ValueError("k out of range")
        if not (0.0 < self.tau_adap < 1.0):
            raise ValueError("tau_adap must lie in (0, 1)")
        if not (0.0 < self.phi_thres < 1.0):
            raise ValueError("phi_thres must lie in (0, 1)")
        if not (0 <= self.frame_count <= MAX_FRAMES):
            raise ValueError("frame_count out of range")

    def pack(self) -> bytes:
        return _HEADER_STRUCT.pack(
            MAGIC,
            self.version,
            self.n_points,
            self.sh_degree,
            self.gof_interval,
            self.k,
            self.tau_adap,
            self.phi_thres,
            self.frame_count,
        )

    @staticmethod
    def unpack(raw: bytes) -> "StreamHeader":
        if len(raw) < HEADER_SIZE:
            raise CodecError("truncated header")
        magic, version, n, deg, s, k, tau, phi, frames = _HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise CodecError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CodecError(f"unsupported format version {version}")
        if not (math.isfinite(tau) and math.isfinite(phi)):
            raise CodecError("non-finite header threshold")
        try:
            return StreamHeader(
                n_points=n, sh_degree=deg, gof_interval=s, k=k,
                tau_adap=tau, phi_thres=phi, frame_count=frames,
            )
        except ValueError as e:
            raise CodecError(str(e)) from e


def pack_record(tag: int, body: bytes) -> bytes:
    """Container record: u8 tag, u32 body length, body."""
    if tag not in _KNOWN_TAGS:
        raise ValueError(f"unknown tag 0x{tag:02x}")
    if len(body) > MAX_BODY_BYTES:
        raise ValueError("body exceeds size cap")
    return struct.pack("<BI", tag, len(body)) + body


def write_container(header: StreamHeader, records: list[tuple[int, bytes]]) -> bytes:
    return header.pack() + b"".join(pack_record(tag, body) for tag, body in records)


def read_container(data: bytes) -> tuple[StreamHeader, list[tuple[int, bytes]]]:
    header = StreamHeader.unpack(data)
    cur = _Cursor(data)
    cur.take(HEADER_SIZE)
    records = []
    while cur.off < len(data):
        tag = cur.u8()
        if tag not in _KNOWN_TAGS:
            raise CodecError(f"unknown record tag 0x{tag:02x}")
        blen = cur.u32()
        if blen > MAX_BODY_BYTES:
            raise CodecError("record body exceeds size cap")
        records.append((tag, bytes(cur.take(blen))))
    return header, records
