"""Codec tests: quantization bounds, entropy coding, payload layout, container."""

import hashlib
import heapq
import struct
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gstream.codec import (
    MAX_CODE_LEN,
    TAG_INIT,
    TAG_KEYCORR,
    TAG_MOTION,
    CodecError,
    HEADER_SIZE,
    InitPayload,
    KeycorrPayload,
    MotionPayload,
    QuantSpec,
    StreamHeader,
    decode_init,
    decode_keycorr,
    decode_motion,
    decode_payload,
    dequantize,
    encode_init,
    encode_keycorr,
    encode_motion,
    entropy_decode,
    entropy_encode,
    make_quant_spec,
    pack_record,
    quantize,
    read_container,
    write_container,
)
from gstream.corrector import MaskedResiduals
from gstream.core import SceneState
from gstream.motion import Keypoint, MotionField

from conftest import rand_scene


# --- quantization -------------------------------------------------------------


def test_quantize_endpoints_hit_extreme_codes():
    spec = QuantSpec(bits=8, mins=np.array([-2.0]), maxs=np.array([3.0]))
    codes = quantize(np.array([[-2.0], [3.0]]), spec)
    assert codes[0, 0] == 0 and codes[1, 0] == 255
    back = dequantize(codes, spec)
    assert back[0, 0] == np.float32(-2.0)
    assert back[1, 0] == np.float32(3.0)


def test_quantize_midpoint_rounds_half_up():
    spec = QuantSpec(bits=8, mins=np.array([0.0]), maxs=np.array([255.0]))
    codes = quantize(np.array([[0.5], [1.5], [2.4]]), spec)
    assert codes.reshape(-1).tolist() == [1, 2, 2]

    unit = QuantSpec(bits=8, mins=np.array([0.0]), maxs=np.array([1.0]))
    code = quantize(np.array([[0.5]]), unit)
    assert code[0, 0] == 128
    assert dequantize(code, unit)[0, 0] == pytest.approx(128 / 255, abs=1e-7)


def floor_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def test_quantize_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    v = rng.uniform(-4.0, 7.0, size=(64, 3))
    spec = make_quant_spec(v, 8)
    codes = quantize(v, spec)
    step = spec.step()
    for i in range(v.shape[0]):
        for c in range(3):
            expect = floor_half_up((v[i, c] - float(spec.mins[c])) / step[c])
            assert codes[i, c] == min(max(expect, 0), 255)


@pytest.mark.parametrize("bits", [8, 16])
def test_roundtrip_error_within_half_step(bits):
    rng = np.random.default_rng(1 + bits)
    for _ in range(20):
        v = rng.uniform(-5, 5, size=(rng.integers(1, 200), rng.integers(1, 5)))
        spec = make_quant_spec(v, bits)
        back = dequantize(quantize(v, spec), spec).astype(np.float64)
        bound = spec.step() / 2 + 1e-6
        assert (np.abs(back - v) <= bound).all()


def test_degenerate_channel_encodes_zero_codes():
    v = np.full((10, 2), 1.25)
    spec = make_quant_spec(v, 8)
    codes = quantize(v, spec)
    assert (codes == 0).all()
    assert (dequantize(codes, spec) == np.float32(1.25)).all()


def test_sixteen_bit_grid_points_roundtrip_exactly():
    spec = QuantSpec(bits=16, mins=np.array([0.0]), maxs=np.array([1.0]))
    ks = np.array([0, 1, 77, 32768, 65535], dtype=np.float64).reshape(-1, 1)
    v = ks * float(spec.step()[0])
    codes = quantize(v, spec)
    assert codes.reshape(-1).tolist() == ks.reshape(-1).astype(int).tolist()


def test_quantize_validation_errors():
    spec = QuantSpec(bits=8, mins=np.array([0.0]), maxs=np.array([1.0]))
    with pytest.raises(CodecError):
        quantize(np.array([[np.nan]]), spec)
    with pytest.raises(ValueError):
        quantize(np.ones((3, 2)), spec)
    with pytest.raises(ValueError):
        QuantSpec(bits=12, mins=np.array([0.0]), maxs=np.array([1.0]))
    with pytest.raises(ValueError):
        QuantSpec(bits=8, mins=np.array([2.0]), maxs=np.array([1.0]))
    with pytest.raises(ValueError):
        make_quant_spec(np.empty((0, 3)), 8)


@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=64),
    st.sampled_from([8, 16]),
)
def test_quantize_roundtrip_property(values, bits):
    v = np.array(values, dtype=np.float64).reshape(-1, 1)
    spec = make_quant_spec(v, bits)
    back = dequantize(quantize(v, spec), spec).astype(np.float64)
    bound = float(spec.step()[0]) / 2
    assert (np.abs(back - v) <= bound + 1e-3 * max(bound, 1e-30) + 1e-7).all()


# --- canonical Huffman --------------------------------------------------------


def ref_huffman_cost(freq: Counter) -> int:
    """Total bits of an optimal (unrestricted) prefix code."""
    if len(freq) < 2:
        return 0
    heap = sorted(freq.values())
    heapq.heapify(heap)
    total = 0
    while len(heap) > 1:
        a, b = heapq.heappop(heap), heapq.heappop(heap)
        total += a + b
        heapq.heappush(heap, a + b)
    return total


def parse_code_table(block: bytes) -> list[tuple[int, int]]:
    (n,) = struct.unpack_from("<H", block, 0)
    return [(block[2 + 2 * i], block[3 + 2 * i]) for i in range(n)]


def table_size(block: bytes) -> int:
    (n,) = struct.unpack_from("<H", block, 0)
    return 2 + 2 * n


def test_entropy_empty_input():
    block = entropy_encode(b"")
    assert block == struct.pack("<H", 0)
    assert entropy_decode(block, 0) == b""


def test_entropy_single_symbol_run():
    block = entropy_encode(b"a" * 500)
    assert block == struct.pack("<HBB", 1, ord("a"), 0)
    assert entropy_decode(block, 500) == b"a" * 500


def test_entropy_known_bytes_for_aab():
    # two symbols get 1-bit codes a=0, b=1; bits 001 pad to one byte
    block = entropy_encode(b"aab")
    expect = struct.pack("<H", 2) + bytes([ord("a"), 1, ord("b"), 1]) + bytes([0b00100000])
    assert block == expect
    assert entropy_decode(block, 3) == b"aab"


def test_entropy_roundtrip_random_inputs():
    rng = np.random.default_rng(7)
    for trial in range(300):
        n_sym = int(rng.integers(1, 257))
        length = int(rng.integers(0, 2000))
        alphabet = rng.choice(256, size=n_sym, replace=False)
        data = rng.choice(alphabet, size=length).astype(np.uint8).tobytes()
        assert entropy_decode(entropy_encode(data), len(data)) == data


def test_entropy_roundtrip_adversarial_inputs():
    cases = [
        b"",
        b"\x00" * 4096,
        b"\xff" + b"\x00" * 10000,
        bytes(range(256)) * 3,
        b"".join(bytes([i % 7]) * (i % 13 + 1) for i in range(500)),
    ]
    for data in cases:
        assert entropy_decode(entropy_encode(data), len(data)) == data


def test_entropy_cost_matches_huffman_oracle():
    rng = np.random.default_rng(3)
    for _ in range(25):
        data = rng.choice(
            rng.choice(256, size=int(rng.integers(2, 40)), replace=False),
            size=int(rng.integers(50, 1500)),
            p=None,
        ).astype(np.uint8).tobytes()
        freq = Counter(data)
        block = entropy_encode(data)
        entries = parse_code_table(block)
        lengths = dict(entries)
        if max(lengths.values()) < MAX_CODE_LEN:
            cost = sum(freq[s] * ln for s, ln in lengths.items())
            assert cost == ref_huffman_cost(freq)
            assert len(block) - table_size(block) == (cost + 7) // 8


def test_entropy_skewed_input_compresses():
    data = b"\x05" * 9000 + bytes(range(64))
    block = entropy_encode(data)
    assert len(block) < len(data) // 4


def test_package_merge_respects_length_limit():
    # Fibonacci frequencies force unrestricted depths beyond the cap
    freqs = [1, 1]
    while len(freqs) < 40:
        freqs.append(freqs[-1] + freqs[-2])
    data = b"".join(bytes([i]) * min(f, 100000) for i, f in enumerate(freqs))
    block = entropy_encode(data)
    entries = parse_code_table(block)
    lengths = [ln for _, ln in entries]
    assert max(lengths) == MAX_CODE_LEN
    assert sum(2.0 ** -ln for ln in lengths) <= 1.0 + 1e-12
    assert entropy_decode(block, len(data)) == data


def test_entropy_decode_rejects_corruption():
    data = bytes(np.random.default_rng(9).integers(0, 8, size=400, dtype=np.uint8))
    block = entropy_encode(data)
    with pytest.raises(CodecError):
        entropy_decode(block[:-1], len(data))
    with pytest.raises(CodecError):
        entropy_decode(block, len(data) + 50)
    bad_table = bytearray(block)
    bad_table[3] = 0  # zero code length in a multi-symbol table
    with pytest.raises(CodecError):
        entropy_decode(bytes(bad_table), len(data))
    with pytest.raises(CodecError):
        entropy_decode(struct.pack("<H", 300) + b"\x00" * 600, 5)
    with pytest.raises(CodecError):
        entropy_decode(struct.pack("<H", 0), 3)


def test_entropy_decode_rejects_nonzero_padding():
    block = bytearray(entropy_encode(b"aab"))
    block[-1] |= 0x01
    with pytest.raises(CodecError):
        entropy_decode(bytes(block), 3)


@settings(deadline=None, max_examples=60)
@given(st.binary(min_size=0, max_size=3000))
def test_entropy_roundtrip_property(data):
    assert entropy_decode(entropy_encode(data), len(data)) == data


# --- MOTION payloads ----------------------------------------------------------


def make_keypoint(index=0, delta_mu=(0.0, 0.0, 0.0), delta_q=(1.0, 0.0, 0.0, 0.0),
                  q_adap=(1.0, 0.0, 0.0, 0.0), s_adap=(1.0, 1.0, 1.0)) -> Keypoint:
    t = lambda v: torch.tensor(v, dtype=torch.float32)
    return Keypoint(index=index, delta_mu=t(delta_mu), delta_q=t(delta_q),
                    q_adap=t(q_adap), s_adap=t(s_adap))


def test_motion_body_size_is_exact():
    for k in (0, 1, 7, 200):
        fld = MotionField(keypoints=[make_keypoint(index=i) for i in range(k)], tau_adap=0.01)
        assert len(encode_motion(fld)) == 2 + 60 * k


def test_motion_wire_bytes_match_struct_layout():
    kp = make_keypoint(index=7, delta_mu=(0.5, -1.25, 2.0), delta_q=(0.5, 0.5, 0.5, 0.5),
                       q_adap=(1.0, 0.0, 0.0, 0.0), s_adap=(0.25, 0.5, 0.75))
    body = encode_motion(MotionField(keypoints=[kp], tau_adap=0.01))
    expect = struct.pack("<H", 1) + struct.pack("<I", 7) + struct.pack(
        "<14f", 0.5, -1.25, 2.0, 0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 0.0, 0.25, 0.5, 0.75
    )
    assert body == expect


def test_motion_roundtrip_is_bit_exact():
    rng = np.random.default_rng(21)
    kps = []
    for i in sorted(rng.choice(500, size=16, replace=False).tolist()):
        kps.append(make_keypoint(
            index=int(i),
            delta_mu=rng.normal(size=3).tolist(),
            delta_q=rng.normal(size=4).tolist(),
            q_adap=rng.normal(size=4).tolist(),
            s_adap=np.abs(rng.normal(size=3) + 2.0).tolist(),
        ))
    fld = MotionField(keypoints=kps, tau_adap=0.01)
    body = encode_motion(fld)
    dec = decode_motion(body, tau_adap=0.01, n_points=500)
    assert encode_motion(dec) == body
    for a, b in zip(fld.keypoints, dec.keypoints):
        assert a.index == b.index
        assert torch.equal(a.params(), b.params())


def test_motion_decode_validation():
    body = encode_motion(MotionField(keypoints=[make_keypoint(index=3)], tau_adap=0.01))
    with pytest.raises(CodecError, match="length mismatch"):
        decode_motion(body[:-4], tau_adap=0.01, n_points=100)
    with pytest.raises(CodecError, match="out of range"):
        decode_motion(body, tau_adap=0.01, n_points=3)

    nan_body = bytearray(body)
    nan_body[6:10] = struct.pack("<f", float("nan"))
    with pytest.raises(CodecError, match="non-finite"):
        decode_motion(bytes(nan_body), tau_adap=0.01, n_points=100)

    neg_body = bytearray(body)
    neg_body[2 + 4 + 11 * 4 : 2 + 4 + 12 * 4] = struct.pack("<f", -1.0)
    with pytest.raises(CodecError, match="extent"):
        decode_motion(bytes(neg_body), tau_adap=0.01, n_points=100)


# --- KEYCORR payloads ---------------------------------------------------------


def rand_residuals(rng: np.random.Generator, n: int, m: int) -> MaskedResiduals:
    hard = torch.zeros(n, dtype=torch.bool)
    hard[np.sort(rng.choice(n, size=m, replace=False))] = True
    t = lambda *shape: torch.tensor(rng.normal(size=shape), dtype=torch.float32)
    return MaskedResiduals(hard=hard, d_mu=t(m, 3), d_q=t(m, 4), d_log_s=t(m, 3),
                           d_logit_sigma=t(m), d_sh=t(m, 4, 3))


def test_keycorr_empty_mask_layout():
    body = encode_keycorr(MaskedResiduals.empty(16))
    coded = struct.pack("<HBB", 1, 0, 0)   # two zero bytes collapse to one table entry
    assert body == struct.pack("<I", len(coded)) + coded + struct.pack("<I", 0)
    dec = decode_keycorr(body, n_points=16)
    assert dec.popcount == 0 and dec.n_points == 16


def test_keycorr_roundtrip_mask_exact_planes_within_half_step():
    rng = np.random.default_rng(5)
    mr = rand_residuals(rng, n=300, m=40)
    dec = decode_keycorr(encode_keycorr(mr), n_points=300)
    assert torch.equal(dec.hard, mr.hard)
    for name in ("d_mu", "d_q", "d_log_s", "d_sh"):
        a = getattr(mr, name).numpy().reshape(40, -1).astype(np.float64)
        b = getattr(dec, name).numpy().reshape(40, -1).astype(np.float64)
        step = (a.max(axis=0) - a.min(axis=0)) / 255.0
        assert (np.abs(a - b) <= step / 2 + 1e-6).all()
    a = mr.d_logit_sigma.numpy().astype(np.float64)
    b = dec.d_logit_sigma.numpy().astype(np.float64)
    assert (np.abs(a - b) <= (a.max() - a.min()) / 255.0 / 2 + 1e-6).all()


def test_keycorr_size_monotone_in_popcount():
    rng = np.random.default_rng(13)
    sizes = []
    for m in (10, 50, 100, 200):
        mr = rand_residuals(np.random.default_rng(13), n=400, m=m)
        sizes.append(len(encode_keycorr(mr)))
    assert sizes == sorted(sizes)
    assert sizes[0] < sizes[-1]


def test_keycorr_rejects_popcount_mismatch():
    mr = rand_residuals(np.random.default_rng(2), n=64, m=8)
    body = bytearray(encode_keycorr(mr))
    (coded_len,) = struct.unpack_from("<I", body, 0)
    struct.pack_into("<I", body, 4 + coded_len, 9)
    with pytest.raises(CodecError, match="popcount"):
        decode_keycorr(bytes(body), n_points=64)


def test_keycorr_rejects_wrong_scene_size():
    # needing 8 extra mask bytes cannot be satisfied by <= 7 padding bits
    mr = rand_residuals(np.random.default_rng(2), n=64, m=8)
    body = encode_keycorr(mr)
    with pytest.raises(CodecError):
        decode_keycorr(body, n_points=128)


# --- INIT payloads ------------------------------------------------------------


def test_init_roundtrip_within_quantization_bounds():
    scene = rand_scene(np.random.default_rng(17), n=200)
    dec = decode_init(encode_init(scene), n_points=200)
    for name, bits in (("mu", 16), ("q", 8), ("log_s", 8), ("logit_sigma", 8), ("sh", 8)):
        a = getattr(scene, name).numpy().reshape(200, -1).astype(np.float64)
        b = getattr(dec, name).numpy().reshape(200, -1).astype(np.float64)
        step = (a.max(axis=0) - a.min(axis=0)) / ((1 << bits) - 1)
        assert (np.abs(a - b) <= step / 2 + 1e-6).all(), name


def test_init_decode_validation():
    scene = rand_scene(np.random.default_rng(4), n=20)
    body = encode_init(scene)
    with pytest.raises(CodecError, match="trailing"):
        decode_init(body + b"\x00", n_points=20)
    with pytest.raises(CodecError, match="truncated"):
        decode_init(body[:-1], n_points=20)
    bad = bytearray(body)
    bad[0] = 8  # position plane must be 16-bit
    with pytest.raises(CodecError, match="header mismatch"):
        decode_init(bytes(bad), n_points=20)


# --- container ----------------------------------------------------------------


def test_header_roundtrip_and_size():
    h = StreamHeader(n_points=1234, gof_interval=5, k=17, tau_adap=0.01,
                     phi_thres=0.5, frame_count=99)
    raw = h.pack()
    assert len(raw) == HEADER_SIZE == 29
    back = StreamHeader.unpack(raw)
    assert back == h


def test_header_validation():
    with pytest.raises(CodecError, match="truncated"):
        StreamHeader.unpack(b"CGS1\x01")
    raw = bytearray(StreamHeader(n_points=10).pack())
    raw[0:4] = b"NOPE"
    with pytest.raises(CodecError, match="magic"):
        StreamHeader.unpack(bytes(raw))
    raw = bytearray(StreamHeader(n_points=10).pack())
    raw[4] = 99
    with pytest.raises(CodecError, match="version"):
        StreamHeader.unpack(bytes(raw))
    with pytest.raises(ValueError):
        StreamHeader(n_points=0)
    with pytest.raises(ValueError):
        StreamHeader(n_points=10, tau_adap=0.0)
    with pytest.raises(ValueError):
        StreamHeader(n_points=10, gof_interval=0)


def test_pack_record_layout():
    rec = pack_record(TAG_MOTION, b"xy")
    assert rec == b"\x02\x02\x00\x00\x00xy"
    with pytest.raises(ValueError):
        pack_record(0x7F, b"")


def test_container_roundtrip_and_tag_check():
    header = StreamHeader(n_points=50, frame_count=2)
    records = [(TAG_MOTION, b"\x00\x00"), (TAG_KEYCORR, b"abc")]
    blob = write_container(header, records)
    back_header, back_records = read_container(blob)
    assert back_header == header
    assert back_records == records

    bad = bytearray(blob)
    bad[HEADER_SIZE] = 0x7F
    with pytest.raises(CodecError, match="unknown record tag"):
        read_container(bytes(bad))
    with pytest.raises(CodecError, match="truncated"):
        read_container(blob[:-1])


def test_decode_payload_dispatch_and_unknown_tag():
    header = StreamHeader(n_points=30)
    scene = rand_scene(np.random.default_rng(8), n=30)
    p = decode_payload(TAG_INIT, encode_init(scene), header)
    assert isinstance(p, InitPayload) and p.scene.n_points == 30
    fld = MotionField(keypoints=[make_keypoint(index=2)], tau_adap=0.01)
    p = decode_payload(TAG_MOTION, encode_motion(fld), header)
    assert isinstance(p, MotionPayload) and p.motion.k == 1
    mr = rand_residuals(np.random.default_rng(3), n=30, m=4)
    p = decode_payload(TAG_KEYCORR, encode_keycorr(mr), header)
    assert isinstance(p, KeycorrPayload) and p.residuals.popcount == 4
    with pytest.raises(CodecError, match="unknown"):
        decode_payload(0x09, b"", header)


# --- determinism and robustness -----------------------------------------------

GOLDEN_SHA256 = "d5e8ff41fdca239315a3a75ebc3cb2187f44ac50e45d8605bd2d783dc958402f"


def golden_container() -> bytes:
    rng = np.random.default_rng(2024)
    scene = rand_scene(rng, n=64)
    kps = [
        make_keypoint(index=3, delta_mu=(0.125, -0.25, 0.5), delta_q=(0.96, 0.0, 0.28, 0.0),
                      q_adap=(1.0, 0.0, 0.0, 0.0), s_adap=(0.5, 0.25, 0.125)),
        make_keypoint(index=40, delta_mu=(-1.0, 2.0, -3.0), delta_q=(1.0, 0.0, 0.0, 0.0),
                      q_adap=(0.707, 0.707, 0.0, 0.0), s_adap=(1.0, 1.0, 1.0)),
    ]
    mr = rand_residuals(rng, n=64, m=9)
    header = StreamHeader(n_points=64, gof_interval=10, k=2, frame_count=3)
    return write_container(header, [
        (TAG_INIT, encode_init(scene)),
        (TAG_MOTION, encode_motion(MotionField(keypoints=kps, tau_adap=0.01))),
        (TAG_KEYCORR, encode_keycorr(mr)),
    ])


def test_golden_container_bytes_are_stable():
    blob = golden_container()
    assert hashlib.sha256(blob).hexdigest() == GOLDEN_SHA256
    assert hashlib.sha256(golden_container()).hexdigest() == GOLDEN_SHA256


def test_fuzzed_streams_raise_codec_error_only():
    rng = np.random.default_rng(99)
    blob = bytearray(golden_container())
    header = StreamHeader(n_points=64)
    for _ in range(3000):
        mutated = bytearray(blob)
        op = rng.integers(0, 3)
        if op == 0:
            mutated[rng.integers(0, len(mutated))] = rng.integers(0, 256)
        elif op == 1:
            mutated = mutated[: rng.integers(0, len(mutated))]
        else:
            for _ in range(int(rng.integers(2, 12))):
                mutated[rng.integers(0, len(mutated))] = rng.integers(0, 256)
        try:
            h, records = read_container(bytes(mutated))
            for tag, body in records:
                decode_payload(tag, body, header)
        except CodecError:
            pass
