"""Evaluation metrics: codebook utilization, STOI, V/UV F1, mel distance, embedding similarity."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
from scipy.signal import resample_poly

from . import dsp
from .audio import SAMPLE_RATE, AudioBuffer
from .errors import MetricError


def _samples(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return x.samples.astype(np.float64)
    return np.asarray(x, dtype=np.float64).reshape(-1)


# --- codebook utilization ---------------------------------------------------

@dataclass(frozen=True)
class UtilizationReport:
    codebook_size: int
    codes_used: int
    utilization: float
    perplexity: float


def code_histogram(streams, codebook_size: int) -> np.ndarray:
    counts = np.zeros(codebook_size, dtype=np.int64)
    for s in streams:
        toks = np.asarray(getattr(s, "tokens", s), dtype=np.int64).reshape(-1)
        if toks.size and (toks.min() < 0 or toks.max() >= codebook_size):
            raise MetricError(f"token outside [0, {codebook_size})")
        counts += np.bincount(toks, minlength=codebook_size)
    return counts


def codebook_utilization(streams, codebook_size: int) -> UtilizationReport:
    """Distinct codes used over all streams, and exp(entropy) of their frequencies."""
    streams = list(streams)
    counts = code_histogram(streams, codebook_size)
    total = counts.sum()
    if not streams or total == 0:
        raise MetricError("codebook utilization of an empty token set")
    p = counts[counts > 0] / total
    entropy = float(-(p * np.log(p)).sum())
    used = int((counts > 0).sum())
    return UtilizationReport(codebook_size, used, used / codebook_size, math.exp(entropy))


# --- STOI -------------------------------------------------------------------

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_NFFT = 512
_STOI_BANDS = 15
_STOI_MINFREQ = 150
_STOI_SEGMENT = 30          # 384 ms of 128-sample hops
_STOI_BETA = -15.0
_STOI_DYN_RANGE = 40.0


def _third_octave_matrix(fs, nfft, num_bands, min_freq):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    cf = 2.0 ** (k / 3.0) * min_freq
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo_bin = np.argmin((f - lo[i]) ** 2)
        hi_bin = np.argmin((f - hi[i]) ** 2)
        obm[i, lo_bin:hi_bin] = 1.0
    return obm, cf


def _frames(x, win, hop):
    n = (len(x) - win) // hop + 1
    if n <= 0:
        return np.zeros((0, win))
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _stoi_window():
    return np.hanning(_STOI_FRAME + 2)[1:-1]


def _remove_silent_frames(x, y, dyn_range, win_len, hop):
    """Drop frames more than ``dyn_range`` dB below the loudest clean frame, then overlap-add."""
    w = np.hanning(win_len + 2)[1:-1]
    xf = _frames(x, win_len, hop) * w
    yf = _frames(y, win_len, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = (energy.max() - dyn_range - energy) < 0
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    out_len = (n - 1) * hop + win_len if n else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(n):
        xs[i * hop:i * hop + win_len] += xf[i]
        ys[i * hop:i * hop + win_len] += yf[i]
    return xs, ys


def _stft_mag(x):
    frames = _frames(x, _STOI_FRAME, _STOI_FRAME // 2) * _stoi_window()
    return np.abs(np.fft.rfft(frames, n=_STOI_NFFT, axis=1)).T   # (bins, frames)


def stoi(clean, processed, sample_rate: int = SAMPLE_RATE) -> float:
    """Short-time objective intelligibility of ``processed`` against ``clean``.

    ``processed`` is truncated or zero-padded to the clean length.
    """
    x = _samples(clean)
    y = _samples(processed)
    if x.size < 0.5 * sample_rate:
        raise MetricError(f"STOI needs >= 0.5 s of audio, got {x.size / sample_rate:.3f} s")
    if y.size < x.size:
        y = np.pad(y, (0, x.size - y.size))
    y = y[:x.size]
    if sample_rate != _STOI_FS:
        g = math.gcd(_STOI_FS, sample_rate)
        x = resample_poly(x, _STOI_FS // g, sample_rate // g)
        y = resample_poly(y, _STOI_FS // g, sample_rate // g)
    x, y = _remove_silent_frames(x, y, _STOI_DYN_RANGE, _STOI_FRAME, _STOI_FRAME // 2)
    obm, _ = _third_octave_matrix(_STOI_FS, _STOI_NFFT, _STOI_BANDS, _STOI_MINFREQ)
    x_tob = np.sqrt(obm @ _stft_mag(x) ** 2)
    y_tob = np.sqrt(obm @ _stft_mag(y) ** 2)
    n_frames = x_tob.shape[1]
    if n_frames < _STOI_SEGMENT:
        raise MetricError("not enough non-silent audio for a single STOI segment")
    clip = 10 ** (-_STOI_BETA / 20)
    eps = np.finfo(float).eps
    scores = []
    for m in range(_STOI_SEGMENT, n_frames + 1):
        xs = x_tob[:, m - _STOI_SEGMENT:m]
        ys = y_tob[:, m - _STOI_SEGMENT:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (
            np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yc = np.minimum(ys * alpha, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yc - yc.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + eps
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + eps
        scores.append((xc * yc).sum(axis=1))
    return float(np.mean(scores))


# --- voiced / unvoiced F1 ---------------------------------------------------

VUV_FRAME_SECONDS = 0.025
VUV_HOP_SECONDS = 0.010
VUV_THRESHOLD = 0.3
VUV_MIN_RMS = 1e-3
VUV_F0_RANGE = (60.0, 500.0)


def voicing(x, sample_rate: int = SAMPLE_RATE, threshold: float = VUV_THRESHOLD) -> np.ndarray:
    """Per-frame voiced decisions from the normalized autocorrelation peak."""
    x = _samples(x)
    win = int(round(VUV_FRAME_SECONDS * sample_rate))
    hop = int(round(VUV_HOP_SECONDS * sample_rate))
    lag_lo = int(sample_rate / VUV_F0_RANGE[1])
    lag_hi = min(int(sample_rate / VUV_F0_RANGE[0]), win - 1)
    frames = _frames(x, win, hop)
    out = np.zeros(frames.shape[0], dtype=bool)
    for i, f in enumerate(frames):
        f = f - f.mean()
        if np.sqrt(np.mean(f ** 2)) < VUV_MIN_RMS:
            continue
        best = 0.0
        for lag in range(lag_lo, lag_hi + 1):
            a, b = f[:-lag], f[lag:]
            denom = math.sqrt(float(a @ a) * float(b @ b))
            if denom > 0:
                best = max(best, float(a @ b) / denom)
        out[i] = best > threshold
    return out


def f1_from_decisions(ref: np.ndarray, rec: np.ndarray) -> float:
    n = min(ref.size, rec.size)
    ref, rec = ref[:n], rec[:n]
    if not ref.any():
        raise MetricError("V/UV F1 undefined: reference has no voiced frames")
    tp = int(np.sum(ref & rec))
    fp = int(np.sum(~ref & rec))
    fn = int(np.sum(ref & ~rec))
    return 2 * tp / (2 * tp + fp + fn)


def vuv_f1(ref, rec, sample_rate: int = SAMPLE_RATE) -> float:
    return f1_from_decisions(voicing(ref, sample_rate), voicing(rec, sample_rate))


# --- mel distance / similarity ----------------------------------------------

def mel_l1(ref, rec, cfg: dsp.SpectrogramConfig = dsp.SpectrogramConfig()) -> float:
    """Mean absolute log-mel difference; lengths may differ by at most one hop."""
    a, b = _samples(ref), _samples(rec)
    if abs(a.size - b.size) > cfg.hop:
        raise MetricError(f"length mismatch {a.size} vs {b.size} exceeds one hop")
    n = min(a.size, b.size)
    ma = dsp.mel_spectrogram(a[:n], cfg).frames
    mb = dsp.mel_spectrogram(b[:n], cfg).frames
    return float(np.mean(np.abs(ma - mb)))


def similarity(ref_emb, rec_emb) -> float:
    a = np.asarray(ref_emb, dtype=np.float64).reshape(-1)
    b = np.asarray(rec_emb, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity with a zero vector")
    return float(a @ b / (na * nb))


def load_embedding(path) -> np.ndarray:
    """Embedding from ``.npy`` or whitespace-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).reshape(-1)
    return np.loadtxt(path).reshape(-1)


# --- evaluation report -------------------------------------------------------

METRIC_KEYS = ("mel_l1", "stoi", "vuv_f1", "sim")


def summarize(records: Sequence[Dict]) -> Dict[str, Dict[str, float]]:
    """Mean/std per metric over the records that carry it."""
    out = {}
    for key in METRIC_KEYS:
        vals = [r[key] for r in records if r.get(key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


def write_report(path, records: Sequence[Dict], extra: Dict | None = None) -> Dict:
    """Line-delimited per-utterance records followed by one summary record."""
    summary = {"summary": summarize(records)}
    if extra:
        summary.update(extra)
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: r["utt_id"]):
            fh.write(json.dumps(r, sort_keys=True) + "\n")
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    return summary
