import math

import numpy as np
import pytest
from pystoi import stoi as reference_stoi

from hhc import dsp
from hhc.errors import MetricError
from hhc.metrics import (codebook_utilization, f1_from_decisions, mel_l1, similarity, stoi,
                         voicing, vuv_f1, write_report)
from hhc.quantize import quantize_layer


@pytest.fixture(scope="module")
def clip(fixture_corpus):
    return fixture_corpus[0].samples[:24000 * 4].astype(np.float64)


def test_utilization_examples():
    r = codebook_utilization([np.zeros(50, int)], 16)
    assert r.codes_used == 1 and r.utilization == 1 / 16 and r.perplexity == pytest.approx(1.0)
    r = codebook_utilization([np.arange(16), np.arange(16)], 16)
    assert r.utilization == 1.0 and r.perplexity == pytest.approx(16.0)
    with pytest.raises(MetricError):
        codebook_utilization([], 16)
    with pytest.raises(MetricError):
        codebook_utilization([np.array([16])], 16)


def test_utilization_on_64_cluster_data_matches_brute_force():
    rng = np.random.default_rng(0)
    centres = rng.standard_normal((64, 4)) * 3
    x = centres[rng.integers(0, 64, 2000)] + 0.2 * rng.standard_normal((2000, 4))
    book = rng.standard_normal((128, 4)) * 3
    codes, _ = quantize_layer(x, book)
    brute = {int(np.argmin([np.sum((xi - b) ** 2) for b in book])) for xi in x}
    assert codebook_utilization([codes], 128).codes_used == len(brute)


def test_stoi_self_similarity(clip):
    assert stoi(clip, clip) >= 0.99


def test_stoi_matches_reference_implementation(clip):
    rng = np.random.default_rng(1)
    for snr in (20, 5, -5):
        noise = rng.standard_normal(clip.size)
        noise *= np.sqrt(np.mean(clip ** 2) / np.mean(noise ** 2)) * 10 ** (-snr / 20)
        noisy = clip + noise
        assert stoi(clip, noisy) == pytest.approx(reference_stoi(clip, noisy, 24000), abs=1e-3)


def test_stoi_noise_against_chirp():
    # harmonic pitch glide with a 4 Hz syllabic envelope
    t = np.arange(48000) / 24000
    chirp = sum(np.sin(2 * np.pi * k * (120 * t + 20 * t ** 2)) / k for k in range(1, 30))
    chirp *= 0.6 + 0.4 * np.sin(2 * np.pi * 4 * t)
    noise = np.random.default_rng(0).standard_normal(t.size) * 0.3
    score = stoi(chirp, noise)
    assert score < 0.3
    assert score == pytest.approx(reference_stoi(chirp, noise, 24000), abs=1e-2)


def test_stoi_monotone_under_snr_sweep(clip):
    noise = np.random.default_rng(2).standard_normal(clip.size)
    noise *= np.sqrt(np.mean(clip ** 2) / np.mean(noise ** 2))
    scores = [stoi(clip, clip + noise * 10 ** (-snr / 20)) for snr in (30, 20, 10, 5, 0, -5, -10)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_stoi_too_short():
    with pytest.raises(MetricError):
        stoi(np.ones(1000), np.ones(1000))


def test_vuv_examples(clip):
    assert vuv_f1(clip, clip) == 1.0
    assert vuv_f1(clip, np.zeros_like(clip)) == 0.0
    with pytest.raises(MetricError):
        vuv_f1(np.zeros(24000), clip[:24000])


def test_vuv_confusion_oracle(clip):
    rec = clip + 0.3 * np.random.default_rng(3).standard_normal(clip.size) * clip.std()
    a, b = voicing(clip), voicing(rec)
    tp = sum(1 for x, y in zip(a, b) if x and y)
    fp = sum(1 for x, y in zip(a, b) if not x and y)
    fn = sum(1 for x, y in zip(a, b) if x and not y)
    assert vuv_f1(clip, rec) == pytest.approx(2 * tp / (2 * tp + fp + fn))
    assert f1_from_decisions(a, b) == vuv_f1(clip, rec)


def test_voicing_frame_rate():
    assert voicing(np.zeros(24000)).size == 1 + (24000 - 600) // 240


def test_mel_l1_examples(clip, rng):
    assert mel_l1(clip, clip) == 0.0
    assert mel_l1(clip, 0.5 * clip) > 0
    a, b = rng.standard_normal(6000), rng.standard_normal(6000)
    ma, mb = dsp.mel_spectrogram(a).frames, dsp.mel_spectrogram(b).frames
    assert mel_l1(a, b) == pytest.approx(np.abs(ma - mb).sum() / ma.size, rel=1e-12)
    with pytest.raises(MetricError):
        mel_l1(a, b[:4000])


def test_similarity():
    v = np.array([1.0, 2.0, 3.0])
    assert similarity(v, v) == pytest.approx(1.0)
    assert similarity(v, -v) == pytest.approx(-1.0)
    assert similarity([1, 0], [0, 1]) == 0.0
    with pytest.raises(MetricError):
        similarity(v, np.zeros(3))


def test_report_layout(tmp_path):
    recs = [{"utt_id": "b", "mel_l1": 1.0, "stoi": 0.5}, {"utt_id": "a", "mel_l1": 3.0, "stoi": None}]
    summary = write_report(tmp_path / "r.jsonl", recs, {"bandwidth": "x"})
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 3 and '"utt_id": "a"' in lines[0]
    assert summary["summary"]["mel_l1"]["mean"] == 2.0 and summary["summary"]["stoi"]["n"] == 1
    assert math.isclose(summary["summary"]["mel_l1"]["std"], 1.0)
