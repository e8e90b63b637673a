"""Audio ingestion: WAV loading, resampling to 24 kHz, window cropping, manifests."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import AudioError, EmptyInputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 24000


@dataclass(frozen=True)
class AudioBuffer:
    """Immutable mono waveform.

    ``samples`` is a read-only float array; ``sample_rate`` is in Hz.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float32, copy=True).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        if not np.all(np.isfinite(arr)):
            raise AudioError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy returns 24-bit PCM left-justified in int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"unsupported WAV sample type {data.dtype}")


def resample(x: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling; identity when rates match."""
    if orig_sr == target_sr:
        return np.asarray(x)
    ratio = Fraction(target_sr, orig_sr)
    return resample_poly(np.asarray(x, dtype=np.float64), ratio.numerator, ratio.denominator)


def peak_normalize(x: np.ndarray) -> np.ndarray:
    return x / max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)


def load_audio(path) -> AudioBuffer:
    """Read a PCM/float WAV file as mono 24 kHz audio in [-1, 1]."""
    path = Path(path)
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyInputError(f"{path} contains no samples")
    x = resample(x, sr, SAMPLE_RATE)
    return AudioBuffer(peak_normalize(x).astype(np.float32), SAMPLE_RATE)


def save_wav(path, buf: AudioBuffer) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(np.round(buf.samples.astype(np.float64) * 32767.0), -32768, 32767)
    wavfile.write(str(path), buf.sample_rate, pcm.astype(np.int16))


def sample_window(buf: AudioBuffer, window_seconds: float, rng_seed: int,
                  pad_short: bool = False) -> AudioBuffer:
    """Random contiguous crop of ``round(window_seconds * sr)`` samples."""
    n = int(round(window_seconds * buf.sample_rate))
    if len(buf) < n:
        if not pad_short:
            raise AudioError(
                f"buffer of {len(buf)} samples is shorter than the {n}-sample window")
        out = np.zeros(n, dtype=np.float32)
        out[:len(buf)] = buf.samples
        return AudioBuffer(out, buf.sample_rate)
    offset = window_offset(len(buf), n, rng_seed)
    return AudioBuffer(buf.samples[offset:offset + n], buf.sample_rate)


def window_offset(n_total: int, n_window: int, rng_seed: int) -> int:
    if n_total <= n_window:
        return 0
    return int(np.random.default_rng(rng_seed).integers(0, n_total - n_window + 1))


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    duration_seconds: float
    split_tag: str = "train"


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    excluded: List[Tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ordered(self, seed: int) -> List[ManifestEntry]:
        """Entry order as a pure function of (content, seed)."""
        base = sorted(self.entries, key=lambda e: str(e.path))
        perm = np.random.default_rng(seed).permutation(len(base))
        return [base[i] for i in perm]


def read_manifest(path, min_seconds: float = 0.0, split_tag: str = "train") -> DatasetManifest:
    """Parse a manifest: one audio path per line, relative to the manifest.

    Lines may carry an optional tab-separated split tag. Files that cannot be
    decoded or are shorter than ``min_seconds`` are excluded and logged.
    """
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"manifest not found: {path}")
    manifest = DatasetManifest()
    root = path.parent
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t")
        tag = parts[1].strip() if len(parts) > 1 else split_tag
        audio_path = Path(parts[0].strip())
        if not audio_path.is_absolute():
            audio_path = root / audio_path
        try:
            sr, data = wavfile.read(str(audio_path), mmap=True)
            duration = data.shape[0] / sr
        except (OSError, ValueError) as exc:
            reason = f"line {lineno}: unreadable ({exc})"
            manifest.excluded.append((str(audio_path), reason))
            logger.warning("excluding %s: %s", audio_path, reason)
            continue
        if duration < min_seconds or data.shape[0] == 0:
            reason = f"line {lineno}: {duration:.3f}s shorter than {min_seconds}s"
            manifest.excluded.append((str(audio_path), reason))
            logger.warning("excluding %s: %s", audio_path, reason)
            continue
        manifest.entries.append(ManifestEntry(audio_path, duration, tag))
    return manifest


def write_manifest(path, audio_paths: Sequence[os.PathLike]) -> None:
    path = Path(path)
    lines = []
    for p in audio_paths:
        p = Path(p)
        try:
            lines.append(str(p.relative_to(path.parent)))
        except ValueError:
            lines.append(str(p))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(manifest: DatasetManifest, seed: int = 0) -> List[AudioBuffer]:
    return [load_audio(e.path) for e in manifest.ordered(seed)]


def make_batch(corpus: Sequence[AudioBuffer], batch_size: int, window_seconds: float,
               seed: int, step: int, pad_short: bool = True, return_meta: bool = False):
    """Random crops for training step ``step``; a pure function of (corpus, seed, step).

    With ``return_meta`` also returns ``[(corpus_index, offset), ...]``.
    """
    rng = np.random.default_rng([seed, step])
    picks = rng.integers(0, len(corpus), size=batch_size)
    n = int(round(window_seconds * SAMPLE_RATE))
    crops, meta = [], []
    for i in picks:
        crop_seed = int(rng.integers(2**31))
        crops.append(sample_window(corpus[i], window_seconds, crop_seed, pad_short).samples)
        meta.append((int(i), window_offset(len(corpus[i]), n, crop_seed)))
    batch = np.stack(crops)
    return (batch, meta) if return_meta else batch


def pad_to_multiple(x: np.ndarray, multiple: int) -> Tuple[np.ndarray, int]:
    """Right-pad the last axis with zeros to a multiple; returns (padded, original length)."""
    n = x.shape[-1]
    target = max(multiple, int(math.ceil(n / multiple)) * multiple)
    if target == n:
        return x, n
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target - n)]
    return np.pad(x, pad), n


def frames_for(n_samples: int, hop: int = 1024) -> int:
    return int(math.ceil(n_samples / hop))


def as_buffer(x, sample_rate: Optional[int] = None) -> AudioBuffer:
    if isinstance(x, AudioBuffer):
        return x
    return AudioBuffer(np.asarray(x, dtype=np.float32), sample_rate or SAMPLE_RATE)
