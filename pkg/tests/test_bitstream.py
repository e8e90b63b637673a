import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhc.bitstream import (HEADER, TokenStream, bandwidth, bandwidth_line, bits_per_token, pack,
                           read_hhc, read_lm_corpus, unpack, vocab_note_path, write_hhc,
                           write_lm_corpus)
from hhc.errors import BitstreamError, TokenRangeError

SIZES = [1024, 2048, 4096, 8192, 16384]


def _stream(tokens, k, n=None):
    tokens = np.asarray(tokens, dtype=np.int64)
    return TokenStream(tokens, k, n if n is not None else tokens.size * 1024)


def _bits_oracle(tokens, bits):
    """Reference packer built from a string of '0'/'1' characters."""
    s = "".join(format(int(t), f"0{bits}b") for t in tokens)
    s += "0" * (-len(s) % 8)
    return bytes(int(s[i:i + 8], 2) for i in range(0, len(s), 8))


def test_header_size_and_layout():
    assert HEADER.size == 26
    raw = pack(_stream([0, 8191, 4096], 8192, 3000))
    assert raw[:4] == b"HHC1"
    assert struct.unpack(">H", raw[4:6]) == (1,)
    assert struct.unpack(">III", raw[6:18]) == (24000, 1024, 8192)
    assert struct.unpack(">Q", raw[18:26]) == (3000,)
    assert len(raw) - 26 == 5


def test_worked_example_bytes():
    raw = pack(_stream([0, 8191, 4096], 8192, 3000))
    # 0000000000000 1111111111111 1000000000000 + 1 padding bit
    assert raw[26:] == bytes([0x00, 0x07, 0xFF, 0xE0, 0x00])
    assert unpack(raw).tokens.tolist() == [0, 8191, 4096]


def test_empty_stream():
    raw = pack(_stream([], 8192, 0))
    assert len(raw) == 26
    ts = unpack(raw)
    assert len(ts) == 0 and ts.source_sample_count == 0


@pytest.mark.parametrize("k", SIZES)
def test_bits_per_token(k):
    assert bits_per_token(k) == int(math.log2(k))
    assert bits_per_token(k + 1) == int(math.log2(k)) + 1


@settings(max_examples=2000, deadline=None)
@given(st.sampled_from(SIZES + [2, 3, 1000, 5000]), st.integers(0, 300), st.integers(0, 1023),
       st.integers(0, 2**31))
def test_pack_unpack_identity(k, n_tokens, tail, seed):
    n = max(0, n_tokens * 1024 - tail) if n_tokens else 0
    count = math.ceil(n / 1024)
    tokens = np.random.default_rng(seed).integers(0, k, count)
    ts = TokenStream(tokens, k, n)
    raw = pack(ts)
    assert raw[26:] == _bits_oracle(tokens, bits_per_token(k))
    back = unpack(raw)
    assert np.array_equal(back.tokens, ts.tokens)
    assert (back.codebook_size, back.source_sample_count) == (k, n)


def test_fuzzed_roundtrip_ten_thousand():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        k = int(rng.choice(SIZES))
        count = int(rng.integers(0, 64))
        ts = _stream(rng.integers(0, k, count), k, count * 1024 - int(rng.integers(0, 1024)) * (count > 0))
        assert np.array_equal(unpack(pack(ts)).tokens, ts.tokens)


def _valid():
    return pack(_stream([5, 1000, 8191, 0, 77], 8192))


@pytest.mark.parametrize("mutate, offset", [
    (lambda b: b[:10], 10),
    (lambda b: b"XHC1" + b[4:], 0),
    (lambda b: b[:4] + b"\x00\x02" + b[6:], 4),
    (lambda b: b[:6] + struct.pack(">I", 16000) + b[10:], 6),
    (lambda b: b[:10] + struct.pack(">I", 512) + b[14:], 10),
    (lambda b: b[:14] + struct.pack(">I", 1) + b[18:], 14),
    (lambda b: b[:-1], 34),
    (lambda b: b + b"\x00", 35),
])
def test_parse_errors_carry_offsets(mutate, offset):
    with pytest.raises(BitstreamError) as info:
        unpack(mutate(_valid()))
    assert info.value.offset == offset


def test_nonzero_padding_detected():
    raw = bytearray(_valid())
    raw[-1] |= 0x01
    with pytest.raises(BitstreamError):
        unpack(bytes(raw))


def test_out_of_range_token_in_payload():
    raw = bytearray(pack(_stream([0, 0], 5000)))
    raw[26] = 0xFF
    raw[27] = 0xF8      # first 13 bits all ones -> 8191 >= 5000
    with pytest.raises(BitstreamError) as info:
        unpack(bytes(raw))
    assert info.value.offset == 26


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_every_truncation_is_detected(seed):
    rng = np.random.default_rng(seed)
    raw = pack(_stream(rng.integers(0, 16384, 20), 16384))
    cut = int(rng.integers(0, len(raw)))
    with pytest.raises(BitstreamError):
        unpack(raw[:cut])


def test_token_range_error_names_index():
    with pytest.raises(TokenRangeError, match="index 2"):
        _stream([1, 2, 9000, 3], 8192)


def test_file_roundtrip(tmp_path):
    ts = _stream([1, 2, 3], 1024, 2500)
    write_hhc(tmp_path / "a.hhc", ts)
    assert read_hhc(tmp_path / "a.hhc").tokens.tolist() == [1, 2, 3]


def test_bandwidth_numbers():
    b = bandwidth(8192, 24000)
    assert b["steady_bps"] == 304.6875
    assert b["padded_bps"] == 312 and b["payload_bps"] == 312
    assert b["tokens_per_second_steady"] == 23.4375
    assert b["tokens_per_second_padded"] == 24
    assert "304.688" in bandwidth_line(8192) or "304.6875" in bandwidth_line(8192)


def test_lm_corpus(tmp_path):
    rng = np.random.default_rng(0)
    recs = [("utt_a", rng.integers(0, 8192, 24)), ("utt_b", rng.integers(0, 8192, 24))]
    p = tmp_path / "lm.txt"
    write_lm_corpus(p, recs, 8192)
    first = p.read_bytes()
    write_lm_corpus(p, recs, 8192)
    assert p.read_bytes() == first
    lines = p.read_text().splitlines()
    assert len(lines) == 2 and all(len(l.split()) == 25 for l in lines)
    back = read_lm_corpus(p)
    assert back[0][0] == "utt_a" and back[0][1] == list(recs[0][1])
    assert "codebook_size 8192" in vocab_note_path(p).read_text()
    with pytest.raises(ValueError):
        write_lm_corpus(p, [("bad id", [1])], 8192)
