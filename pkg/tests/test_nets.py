import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hhc import dsp
from hhc.errors import ConfigError, InputTooShortError
from hhc.nets import (Encoder, MelDecoder, NetworkConfig, Vocoder, count_parameters, decode_mel,
                      encode, vocode)

SMALL = NetworkConfig(base_channels=4, latent_dim=16, n_convnext_blocks=1, n_attn_layers_dec=1,
                      decoder_channels=16, vocoder_channels=16)


@pytest.fixture(scope="module")
def small_nets():
    torch.manual_seed(0)
    return Encoder(SMALL).eval(), MelDecoder(SMALL).eval(), Vocoder(SMALL).eval()


def test_default_config():
    cfg = NetworkConfig().validate()
    assert cfg.hop == 1024 and cfg.latent_dim == 512 and cfg.frame_rate == 23.4375
    assert cfg.mel_upsample == 4


@pytest.mark.parametrize("bad", [dict(strides=(8, 8, 4, 3)), dict(vocoder_upsample=(8, 8, 2)),
                                 dict(recurrent="gru"), dict(vocoder_profile="x")])
def test_bad_config(bad):
    with pytest.raises(ConfigError):
        NetworkConfig(**bad).validate()


@pytest.mark.parametrize("n, frames", [(72000, 71), (24000, 24), (1024, 1), (1025, 2)])
def test_encoder_frame_count(small_nets, n, frames):
    enc, _, _ = small_nets
    lat = encode(np.zeros(n, np.float32), enc)
    assert lat.frames.shape == (frames, 16)
    assert np.all(np.isfinite(lat.frames))


def test_too_short(small_nets):
    with pytest.raises(InputTooShortError):
        encode(np.zeros(1023, np.float32), small_nets[0])


def test_encoder_length_covariant(small_nets, rng):
    enc = small_nets[0]
    a = rng.standard_normal(3072).astype(np.float32)
    b = rng.standard_normal(2500).astype(np.float32)
    whole = encode(np.concatenate([a, b]), enc).n_frames
    assert whole == encode(a, enc).n_frames + encode(b, enc).n_frames


@pytest.mark.parametrize("t", [1, 24])
def test_decoder_upsamples_by_four(small_nets, t):
    _, dec, _ = small_nets
    mel = decode_mel(np.random.default_rng(t).standard_normal((t, 16)), dec, SMALL)
    assert mel.frames.shape == (4 * t, 100) and np.all(np.isfinite(mel.frames))


def test_vocoder_length(small_nets):
    out = vocode(np.zeros((96, 100), np.float32), small_nets[2])
    assert out.samples.shape == (24576,) and np.all(np.isfinite(out.samples))


@settings(max_examples=5, deadline=None)
@given(st.integers(1024, 9000))
def test_pipeline_composes(n):
    torch.manual_seed(0)
    enc, dec, voc = Encoder(SMALL).eval(), MelDecoder(SMALL).eval(), Vocoder(SMALL).eval()
    lat = encode(np.random.default_rng(n).standard_normal(n).astype(np.float32), enc)
    mel = decode_mel(lat.frames, dec, SMALL)
    audio = vocode(mel, voc)
    assert audio.samples.shape[0] == lat.n_frames * 1024


def test_count_parameters():
    assert count_parameters([]) == 0
    assert count_parameters(torch.nn.Linear(512, 512)) == 262656
    counts = [count_parameters(Encoder(NetworkConfig(base_channels=c, latent_dim=16)))
              for c in (4, 8, 16)]
    assert counts[0] < counts[1] < counts[2]


def test_gradients_match_finite_differences():
    torch.manual_seed(1)
    enc = Encoder(SMALL).double()
    dec = MelDecoder(SMALL).double()
    audio = torch.from_numpy(np.random.default_rng(0).standard_normal((1, 2048)) * 0.3)
    target = dsp.log_mel(audio)[:, :8]

    def loss():
        return (dec(enc(audio)) - target).abs().mean()

    params = list(enc.named_parameters()) + list(dec.named_parameters())
    enc.zero_grad()
    dec.zero_grad()
    loss().backward()
    gen = np.random.default_rng(3)
    h = 1e-6
    checked = 0
    for name, p in params:
        flat = p.data.view(-1)
        for idx in gen.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
            analytic = float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(loss())
                flat[idx] = orig - h
                down = float(loss())
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-4), name
            checked += 1
    assert checked > 40
