import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from hhc.audio import (SAMPLE_RATE, AudioBuffer, load_audio, make_batch, read_manifest,
                       resample, sample_window, save_wav, write_manifest)
from hhc.errors import AudioError, EmptyInputError


def test_stereo_48k_downmixed_and_resampled(tmp_path):
    t = np.arange(96000) / 48000
    left = 0.3 * np.sin(2 * np.pi * 300 * t)
    stereo = np.stack([left, -0.5 * left], axis=1).astype(np.float32)
    p = tmp_path / "s.wav"
    wavfile.write(p, 48000, stereo)
    buf = load_audio(p)
    assert buf.sample_rate == SAMPLE_RATE
    assert len(buf) == 48000
    # channel average: 0.25 * left
    assert abs(np.abs(buf.samples[1000:-1000]).max() - 0.075) < 2e-3


def test_24k_mono_passthrough_is_bit_identical(tmp_path, rng):
    x = (0.8 * rng.uniform(-1, 1, 24000)).astype(np.float32)
    p = tmp_path / "m.wav"
    wavfile.write(p, 24000, x)
    assert np.array_equal(load_audio(p).samples, x)


def test_loud_file_is_peak_normalized(tmp_path):
    x = np.array([0.0, 2.0, -4.0, 1.0], dtype=np.float32)
    p = tmp_path / "loud.wav"
    wavfile.write(p, 24000, x)
    np.testing.assert_allclose(load_audio(p).samples, x / 4.0)


def test_int16_pcm_scaling(tmp_path):
    p = tmp_path / "i16.wav"
    wavfile.write(p, 24000, np.array([0, 16384, -32768], dtype=np.int16))
    np.testing.assert_allclose(load_audio(p).samples, [0.0, 0.5, -1.0])


def test_resampled_sine_keeps_its_frequency(tmp_path):
    # FFT-peak oracle: 1 kHz at 8 kHz -> 24 kHz stays at 1 kHz within one bin
    t = np.arange(8000) / 8000
    p = tmp_path / "s8k.wav"
    wavfile.write(p, 8000, (0.5 * np.sin(2 * np.pi * 1000 * t)).astype(np.float32))
    buf = load_audio(p)
    spec = np.abs(np.fft.rfft(buf.samples))
    freqs = np.fft.rfftfreq(len(buf), 1 / SAMPLE_RATE)
    assert abs(freqs[np.argmax(spec)] - 1000) <= freqs[1]


@settings(max_examples=30, deadline=None)
@given(st.integers(100, 5000), st.sampled_from([8000, 16000, 22050, 44100, 48000]))
def test_resampling_preserves_duration(n, sr):
    out = resample(np.zeros(n), sr, SAMPLE_RATE)
    assert abs(len(out) - n * SAMPLE_RATE / sr) <= 1


def test_empty_file_is_rejected(tmp_path):
    p = tmp_path / "empty.wav"
    wavfile.write(p, 24000, np.zeros(0, dtype=np.float32))
    with pytest.raises(EmptyInputError):
        load_audio(p)


def test_unreadable_file(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"not a wav file")
    with pytest.raises(AudioError):
        load_audio(p)


def test_window_crop_is_deterministic():
    buf = AudioBuffer(np.arange(240000, dtype=np.float32) / 240000)
    a = sample_window(buf, 3.0, 0)
    b = sample_window(buf, 3.0, 0)
    assert len(a) == 72000
    assert np.array_equal(a.samples, b.samples)


def test_window_equal_to_buffer_returns_whole_buffer():
    buf = AudioBuffer(np.linspace(-1, 1, 72000, dtype=np.float32))
    assert np.array_equal(sample_window(buf, 3.0, 5).samples, buf.samples)


def test_short_buffer_padding():
    buf = AudioBuffer(np.ones(48000, dtype=np.float32) * 0.1)
    out = sample_window(buf, 3.0, 0, pad_short=True)
    assert len(out) == 72000
    assert not out.samples[-24000:].any()
    with pytest.raises(AudioError):
        sample_window(buf, 3.0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1000, 20000), st.floats(0.01, 1.0), st.integers(0, 2**31 - 1))
def test_window_is_verbatim_subsequence(n, seconds, seed):
    x = np.random.default_rng(n).standard_normal(n).astype(np.float32) * 0.1
    buf = AudioBuffer(x)
    out = sample_window(buf, seconds, seed, pad_short=True).samples
    m = int(round(seconds * SAMPLE_RATE))
    assert len(out) == m
    if n >= m:
        starts = [i for i in range(n - m + 1) if x[i] == out[0]]
        assert any(np.array_equal(x[i:i + m], out) for i in starts)
    else:
        assert np.array_equal(out[:n], x) and not out[n:].any()


def test_audio_buffer_is_immutable_and_finite():
    buf = AudioBuffer(np.zeros(4))
    with pytest.raises(ValueError):
        buf.samples[0] = 1.0
    with pytest.raises(AudioError):
        AudioBuffer(np.array([0.0, np.nan]))


def _write_clips(tmp_path, seconds):
    paths = []
    for i, s in enumerate(seconds):
        p = tmp_path / f"c{i}.wav"
        save_wav(p, AudioBuffer(np.zeros(int(s * SAMPLE_RATE), dtype=np.float32)))
        paths.append(p)
    return paths


def test_manifest_parsing_and_exclusions(tmp_path):
    paths = _write_clips(tmp_path, [2.0, 0.5, 3.0])
    (tmp_path / "broken.wav").write_bytes(b"xx")
    text = "# corpus\nc0.wav\nc1.wav\t dev\n\nbroken.wav\nc2.wav  # trailing comment\n"
    (tmp_path / "m.txt").write_text(text)
    man = read_manifest(tmp_path / "m.txt", min_seconds=1.0)
    assert [e.path.name for e in man.entries] == ["c0.wav", "c2.wav"]
    assert {p.split("/")[-1] for p, _ in man.excluded} == {"c1.wav", "broken.wav"}
    assert man.entries[0].duration_seconds == pytest.approx(2.0)


def test_manifest_order_is_pure_function_of_content_and_seed(tmp_path):
    paths = _write_clips(tmp_path, [1.0] * 6)
    write_manifest(tmp_path / "a.txt", paths)
    write_manifest(tmp_path / "b.txt", list(reversed(paths)))
    a = read_manifest(tmp_path / "a.txt")
    b = read_manifest(tmp_path / "b.txt")
    assert [e.path for e in a.ordered(3)] == [e.path for e in b.ordered(3)]
    assert [e.path for e in a.ordered(3)] != [e.path for e in a.ordered(4)]


def test_missing_manifest_names_path(tmp_path):
    with pytest.raises(AudioError, match="nowhere.txt"):
        read_manifest(tmp_path / "nowhere.txt")


def test_batches_depend_only_on_seed_and_step():
    corpus = [AudioBuffer(np.random.default_rng(i).uniform(-.5, .5, 30000)) for i in range(3)]
    a, meta = make_batch(corpus, 4, 0.5, seed=1, step=7, return_meta=True)
    b = make_batch(corpus, 4, 0.5, seed=1, step=7)
    assert a.shape == (4, 12000)
    assert np.array_equal(a, b)
    for row, (i, off) in zip(a, meta):
        assert np.array_equal(row, corpus[i].samples[off:off + 12000])
