"""STFT, log-mel spectrogram and constant-Q transform.

Everything here runs on torch tensors so the same code serves the training
losses (which need gradients through the vocoder output) and evaluation.
Functions also accept :class:`~hhc.audio.AudioBuffer` / numpy input.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import SAMPLE_RATE, AudioBuffer
from .errors import ConfigError, EmptyInputError

LOG_CLAMP = 1e-5
# keeps sqrt differentiable at zero without lifting silence above the clamp
_MAG_EPS = 1e-14


@dataclass(frozen=True)
class SpectrogramConfig:
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    n_mels: int = 100
    fmin: float = 0.0
    fmax: float = 12000.0
    center: bool = True
    sample_rate: int = SAMPLE_RATE

    def validate(self) -> "SpectrogramConfig":
        if self.n_fft < self.win:
            raise ConfigError(f"n_fft ({self.n_fft}) must be >= win ({self.win})")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= {self.sample_rate / 2}, got {self.fmin}, {self.fmax}")
        if self.hop <= 0 or self.n_mels <= 0:
            raise ConfigError("hop and n_mels must be positive")
        return self


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel frames, shape (time, n_mels)."""

    frames: np.ndarray
    hop: int = 256
    win: int = 1024
    n_mels: int = 100

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, AudioBuffer):
        x = x.samples
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.array(x, copy=not x.flags.writeable or not x.flags.c_contiguous))
    return x


def stft(x, cfg: SpectrogramConfig = SpectrogramConfig()) -> torch.Tensor:
    """Hann-windowed STFT, returns complex (..., time, n_fft // 2 + 1)."""
    cfg.validate()
    x = _as_tensor(x)
    if x.shape[-1] == 0:
        raise EmptyInputError("stft of empty input")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    window = torch.hann_window(cfg.win, dtype=flat.dtype, device=flat.device)
    center = cfg.center
    if center and flat.shape[-1] <= cfg.n_fft // 2:
        # reflect padding needs more samples than the pad width
        pad = cfg.n_fft // 2
        flat = torch.nn.functional.pad(flat, (pad, pad))
        center = False
    spec = torch.stft(flat, cfg.n_fft, hop_length=cfg.hop, win_length=cfg.win, window=window,
                      center=center, pad_mode="reflect", return_complex=True)
    return spec.transpose(-1, -2).reshape(*lead, spec.shape[-1], spec.shape[-2])


def n_stft_frames(n_samples: int, hop: int = 256) -> int:
    return n_samples // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def _mel_filterbank_np(sample_rate, n_fft, n_mels, fmin, fmax) -> np.ndarray:
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Triangular HTK-spaced filterbank, shape (n_mels, n_fft // 2 + 1)."""
    cfg.validate()
    return _mel_filterbank_np(cfg.sample_rate, cfg.n_fft, cfg.n_mels, float(cfg.fmin),
                              float(cfg.fmax))


def log_mel(x: torch.Tensor, cfg: SpectrogramConfig = SpectrogramConfig()) -> torch.Tensor:
    """Differentiable log-mel of a waveform tensor (..., T) -> (..., frames, n_mels)."""
    x = _as_tensor(x)
    spec = stft(x, cfg)
    mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + _MAG_EPS)
    fb = torch.tensor(mel_filterbank(cfg), dtype=mag.dtype, device=mag.device)
    mel = mag @ fb.T
    return torch.log(torch.clamp(mel, min=LOG_CLAMP))


def mel_spectrogram(buf, cfg: SpectrogramConfig = SpectrogramConfig()) -> MelSpectrogram:
    x = _as_tensor(buf)
    with torch.no_grad():
        frames = log_mel(x.to(torch.float64), cfg).cpu().numpy()
    return MelSpectrogram(frames, cfg.hop, cfg.win, cfg.n_mels)


# --- constant-Q transform ---------------------------------------------------

@dataclass(frozen=True)
class CQTConfig:
    bins_per_octave: int = 24
    n_octaves: int = 8
    fmin: float = 32.7
    hop: int = 256
    sample_rate: int = SAMPLE_RATE

    def validate(self) -> "CQTConfig":
        top = self.fmin * 2 ** self.n_octaves
        if top > self.sample_rate / 2:
            raise ConfigError(
                f"fmin * 2**n_octaves = {top:.1f} Hz exceeds Nyquist {self.sample_rate / 2}")
        if self.fmin <= 0 or self.bins_per_octave <= 0 or self.n_octaves <= 0:
            raise ConfigError("CQT parameters must be positive")
        return self

    @property
    def n_bins(self) -> int:
        return self.bins_per_octave * self.n_octaves


@functools.lru_cache(maxsize=8)
def _cqt_kernel(bins_per_octave, n_octaves, fmin, sample_rate):
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    n_bins = bins_per_octave * n_octaves
    freqs = fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)
    lengths = np.ceil(q * sample_rate / freqs).astype(int)
    n_fft = int(2 ** math.ceil(math.log2(lengths.max())))
    kernels = np.zeros((n_bins, n_fft), dtype=np.complex128)
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        t = np.arange(n) - (n - 1) / 2.0
        w = np.hanning(n) if n > 1 else np.ones(1)
        atom = w / w.sum() * np.exp(2j * np.pi * f * t / sample_rate)
        start = (n_fft - n) // 2
        kernels[k, start:start + n] = atom
    # x . conj(atom) == (1/N) X . conj(FFT(atom))
    # atoms are analytic, so the non-negative half of the spectrum suffices
    spectral = np.conj(np.fft.fft(kernels, axis=1)[:, :n_fft // 2 + 1]) / n_fft
    return spectral, n_fft, freqs


@functools.lru_cache(maxsize=8)
def _cqt_kernel_tensor(cfg: CQTConfig, dtype) -> torch.Tensor:
    spectral, _, _ = _cqt_kernel(cfg.bins_per_octave, cfg.n_octaves, float(cfg.fmin),
                                 cfg.sample_rate)
    return torch.tensor(spectral, dtype=dtype)


def cqt_frequencies(cfg: CQTConfig = CQTConfig()) -> np.ndarray:
    cfg.validate()
    return cfg.fmin * 2.0 ** (np.arange(cfg.n_bins) / cfg.bins_per_octave)


def cqt(x, cfg: CQTConfig = CQTConfig()) -> torch.Tensor:
    """Constant-Q transform, complex (..., time, n_bins), hop ``cfg.hop``.

    Each bin correlates the signal with a Hann-windowed complex exponential
    whose length spans a fixed number of cycles; correlation is evaluated in
    the frequency domain over centred, zero-padded frames.
    """
    cfg.validate()
    x = _as_tensor(x)
    spectral, n_fft, _ = _cqt_kernel(cfg.bins_per_octave, cfg.n_octaves, float(cfg.fmin),
                                     cfg.sample_rate)
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    real_dtype = flat.dtype if flat.dtype in (torch.float32, torch.float64) else torch.float32
    flat = flat.to(real_dtype)
    padded = torch.nn.functional.pad(flat, (n_fft // 2, n_fft // 2))
    frames = padded.unfold(-1, n_fft, cfg.hop)
    spec = torch.fft.rfft(frames, dim=-1)
    kernel = _cqt_kernel_tensor(cfg, spec.dtype).to(spec.device)
    out = spec @ kernel.T
    return out.reshape(*lead, out.shape[-2], out.shape[-1])


# --- spectrogram dump container ---------------------------------------------

_SPEC_MAGIC = b"HHCS"


def save_spectrogram(path, frames: np.ndarray) -> None:
    """Write ``magic | u32 ndim | u32 dims... | float32 row-major`` little-endian."""
    arr = np.ascontiguousarray(frames, dtype="<f4")
    header = _SPEC_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_spectrogram(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _SPEC_MAGIC:
        raise ValueError("not a spectrogram dump")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).copy()
