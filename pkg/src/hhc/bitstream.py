"""Token streams, the packed ``.hhc`` bitstream, and LM-corpus export.

File layout (all integers big-endian)::

    offset  size  field
    0       4     magic "HHC1"
    4       2     version (u16, currently 1)
    6       4     sample_rate (u32, 24000)
    10      4     hop (u32, 1024)
    14      4     codebook_size K (u32)
    18      8     source_sample_count (u64)
    26      ...   payload: ceil(n/hop) tokens, ceil(log2 K) bits each,
                  MSB first, zero bits up to the next byte boundary
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import SAMPLE_RATE
from .errors import BitstreamError, TokenRangeError

MAGIC = b"HHC1"
VERSION = 1
HOP = 1024
HEADER = struct.Struct(">4sHIIIQ")
FRAME_RATE = SAMPLE_RATE / HOP  # 23.4375 Hz


def bits_per_token(codebook_size: int) -> int:
    if codebook_size < 2:
        raise ValueError(f"codebook_size must be >= 2, got {codebook_size}")
    return int(math.ceil(math.log2(codebook_size)))


@dataclass(frozen=True)
class TokenStream:
    tokens: np.ndarray
    codebook_size: int
    source_sample_count: int
    frame_rate: float = FRAME_RATE
    hop: int = HOP

    def __post_init__(self):
        toks = np.asarray(self.tokens, dtype=np.int64).reshape(-1).copy()
        toks.setflags(write=False)
        object.__setattr__(self, "tokens", toks)
        bad = np.flatnonzero((toks < 0) | (toks >= self.codebook_size))
        if bad.size:
            i = int(bad[0])
            raise TokenRangeError(
                f"token {int(toks[i])} at index {i} outside [0, {self.codebook_size})")
        expected = int(math.ceil(self.source_sample_count / self.hop))
        if toks.size != expected:
            raise ValueError(
                f"{toks.size} tokens for {self.source_sample_count} samples; expected {expected}")

    def __len__(self):
        return self.tokens.size

    @property
    def duration(self) -> float:
        return self.source_sample_count / SAMPLE_RATE


def pack(ts: TokenStream) -> bytes:
    bits = bits_per_token(ts.codebook_size)
    header = HEADER.pack(MAGIC, VERSION, SAMPLE_RATE, ts.hop, ts.codebook_size,
                         ts.source_sample_count)
    if len(ts) == 0:
        return header
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bitmat = ((ts.tokens[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return header + np.packbits(bitmat.reshape(-1)).tobytes()


def unpack(data: bytes) -> TokenStream:
    if len(data) < HEADER.size:
        raise BitstreamError(f"truncated header: {len(data)} of {HEADER.size} bytes",
                             offset=len(data))
    magic, version, sr, hop, k, n = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}", offset=4)
    if sr != SAMPLE_RATE:
        raise BitstreamError(f"unsupported sample rate {sr}", offset=6)
    if hop != HOP:
        raise BitstreamError(f"unsupported hop {hop}", offset=10)
    if k < 2:
        raise BitstreamError(f"invalid codebook size {k}", offset=14)
    bits = bits_per_token(k)
    count = int(math.ceil(n / hop))
    n_bytes = (count * bits + 7) // 8
    payload = data[HEADER.size:]
    if len(payload) < n_bytes:
        raise BitstreamError(f"truncated payload: {len(payload)} of {n_bytes} bytes",
                             offset=len(data))
    if len(payload) > n_bytes:
        raise BitstreamError(f"{len(payload) - n_bytes} unexpected trailing bytes",
                             offset=HEADER.size + n_bytes)
    if count == 0:
        return TokenStream(np.zeros(0, dtype=np.int64), k, n)
    flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if flat[count * bits:].any():
        raise BitstreamError("nonzero padding bits", offset=len(data) - 1)
    bitmat = flat[:count * bits].reshape(count, bits).astype(np.int64)
    tokens = bitmat @ (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    bad = np.flatnonzero(tokens >= k)
    if bad.size:
        i = int(bad[0])
        raise BitstreamError(f"token {int(tokens[i])} >= codebook size {k}",
                             offset=HEADER.size + (i * bits) // 8)
    return TokenStream(tokens, k, n)


def write_hhc(path, ts: TokenStream) -> None:
    Path(path).write_bytes(pack(ts))


def read_hhc(path) -> TokenStream:
    return unpack(Path(path).read_bytes())


def bandwidth(codebook_size: int, n_samples: int | None = None) -> dict:
    """Token-rate and bit-rate accounting.

    ``steady_bps`` is the asymptotic rate (frame rate x bits); ``padded_bps``
    counts the whole tokens a one-second clip needs; ``payload_bps`` is the
    packed payload over the given clip's duration.
    """
    bits = bits_per_token(codebook_size)
    out = {
        "codebook_size": codebook_size,
        "bits_per_token": bits,
        "tokens_per_second_steady": FRAME_RATE,
        "tokens_per_second_padded": int(math.ceil(SAMPLE_RATE / HOP)),
        "steady_bps": FRAME_RATE * bits,
        "padded_bps": int(math.ceil(SAMPLE_RATE / HOP)) * bits,
    }
    if n_samples:
        count = int(math.ceil(n_samples / HOP))
        out["payload_bits"] = count * bits
        out["payload_bps"] = count * bits / (n_samples / SAMPLE_RATE)
    return out


def bandwidth_line(codebook_size: int) -> str:
    b = bandwidth(codebook_size)
    return (f"bandwidth: {b['steady_bps']:g} bits/s steady-state "
            f"({b['tokens_per_second_steady']:g} tokens/s x {b['bits_per_token']} bits); "
            f"{b['padded_bps']} bits/s for a padded 1 s clip "
            f"({b['tokens_per_second_padded']} tokens)")


def write_lm_corpus(path, records: Iterable[tuple], codebook_size: int) -> None:
    """One ``<utt_id> <tok> <tok> ...`` line per utterance; vocabulary note beside it."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for utt_id, tokens in records:
            if any(ch.isspace() for ch in utt_id):
                raise ValueError(f"utterance id {utt_id!r} contains whitespace")
            fh.write(utt_id + " " + " ".join(str(int(t)) for t in tokens) + "\n")
    vocab_note_path(path).write_text(
        f"codebook_size {codebook_size}\nbits_per_token {bits_per_token(codebook_size)}\n"
        f"frame_rate {FRAME_RATE}\n", encoding="utf-8")


def vocab_note_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab")


def read_lm_corpus(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt, *toks = line.split(" ")
        out.append((utt, [int(t) for t in toks]))
    return out
