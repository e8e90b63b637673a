"""Deterministic synthetic single-speaker corpus for overfit tests and demos.

Utterances are sequences of syllables: a fricative or plosive onset followed by
a vowel made of a glottal harmonic source shaped by three formant resonators,
with a declining pitch contour, word-level pauses and a faint noise floor.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .audio import SAMPLE_RATE, AudioBuffer, save_wav, write_manifest

# (F1, F2, F3) in Hz
VOWELS = {
    "a": (730, 1090, 2440),
    "i": (270, 2290, 3010),
    "u": (300, 870, 2240),
    "e": (530, 1840, 2480),
    "o": (570, 840, 2410),
}
FORMANT_BANDWIDTHS = (80.0, 100.0, 140.0)


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return lfilter(b, a, x)


def _envelope(n, attack, release):
    env = np.ones(n)
    a = min(attack, n // 2)
    r = min(release, n // 2)
    if a:
        env[:a] = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, a))
    if r:
        env[n - r:] = 0.5 + 0.5 * np.cos(np.linspace(0, np.pi, r))
    return env


def _vowel(rng, n, f0_start, f0_end, vowel, sr):
    f0 = np.linspace(f0_start, f0_end, n) * (1 + 0.01 * rng.standard_normal(n).cumsum() / np.sqrt(n))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(0.45 * sr / max(f0.max(), 1.0))
    src = np.zeros(n)
    for h in range(1, n_harm + 1):
        src += np.sin(h * phase) / h
    out = np.zeros(n)
    for (f, bw), gain in zip(zip(VOWELS[vowel], FORMANT_BANDWIDTHS), (1.0, 0.6, 0.3)):
        out += gain * _resonator(src, f, bw, sr)
    out += 0.02 * rng.standard_normal(n)   # aspiration
    return out / (np.abs(out).max() + 1e-9)


def _fricative(rng, n, sr):
    lo, hi = sorted(rng.uniform(1800, 7000, size=2))
    hi = max(hi, lo + 800)
    sos = butter(4, [lo, min(hi, 0.45 * sr)], btype="bandpass", fs=sr, output="sos")
    x = sosfilt(sos, rng.standard_normal(n))
    return x / (np.abs(x).max() + 1e-9)


def synth_utterance(seed: int, seconds: float = 10.0, sr: int = SAMPLE_RATE,
                    base_f0: float = 120.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    total = int(round(seconds * sr))
    out = np.zeros(total)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    vowels = list(VOWELS)
    while pos < total:
        n_syll = int(rng.integers(2, 5))
        declination = np.linspace(1.1, 0.9, n_syll)
        for s in range(n_syll):
            if rng.random() < 0.7:
                n = int(rng.uniform(0.04, 0.12) * sr)
                seg = 0.25 * _fricative(rng, n, sr) * _envelope(n, n // 4, n // 4)
                end = min(pos + n, total)
                out[pos:end] += seg[:end - pos]
                pos = end
            n = int(rng.uniform(0.12, 0.3) * sr)
            f0a = base_f0 * declination[s] * rng.uniform(0.95, 1.1)
            f0b = f0a * rng.uniform(0.85, 1.05)
            seg = 0.8 * _vowel(rng, n, f0a, f0b, vowels[rng.integers(len(vowels))], sr)
            seg *= _envelope(n, int(0.02 * sr), int(0.04 * sr))
            end = min(pos + n, total)
            out[pos:end] += seg[:end - pos]
            pos = end
        pos += int(rng.uniform(0.1, 0.35) * sr)
    out += 1e-3 * rng.standard_normal(total)
    return (0.5 * out / np.abs(out).max()).astype(np.float32)


def make_fixture_corpus(out_dir, n_clips: int = 12, seconds: float = 10.0,
                        seed: int = 0) -> Path:
    """Write ``n_clips`` WAVs plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: List[Path] = []
    for i in range(n_clips):
        p = out_dir / f"spk0_{i:03d}.wav"
        save_wav(p, AudioBuffer(synth_utterance(seed * 1000 + i, seconds)))
        paths.append(p)
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, paths)
    return manifest
