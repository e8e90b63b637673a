"""Discriminator ensemble (multi-period, multi-resolution STFT, sub-band CQT) and GAN losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from . import dsp

logger = logging.getLogger(__name__)

FEATURE_EPS = 1e-8


@dataclass(frozen=True)
class DiscriminatorConfig:
    periods: Tuple[int, ...] = (2, 3, 5, 7, 11)
    stft_windows: Tuple[int, ...] = (512, 1024, 2048)
    use_mpd: bool = True
    use_stft: bool = True
    use_cqt: bool = True
    mpd_channels: Tuple[int, ...] = (32, 128, 512, 1024)
    stft_channels: int = 32
    cqt_channels: int = 32
    cqt_bins_per_octave: int = 24
    cqt_octaves: int = 8
    cqt_fmin: float = 32.7

    @property
    def n_heads(self) -> int:
        return (len(self.periods) * self.use_mpd + len(self.stft_windows) * self.use_stft
                + int(self.use_cqt))


@dataclass
class DiscriminatorOutput:
    logits: List[torch.Tensor] = field(default_factory=list)
    feature_maps: List[List[torch.Tensor]] = field(default_factory=list)

    @property
    def n_heads(self) -> int:
        return len(self.logits)


def _lrelu(x):
    return F.leaky_relu(x, 0.1)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels: Sequence[int]):
        super().__init__()
        self.period = period
        convs = []
        c_in = 1
        for i, c in enumerate(channels):
            stride = (3, 1) if i < len(channels) - 1 else (1, 1)
            convs.append(nn.Conv2d(c_in, c, (5, 1), stride, padding=(2, 0)))
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(c_in, 1, (3, 1), padding=(1, 0))

    def forward(self, x: torch.Tensor):
        b, t = x.shape
        if t % self.period:
            pad = self.period - t % self.period
            x = F.pad(x, (0, pad), mode="reflect" if t > pad else "constant")
            t += pad
        h = x.view(b, 1, t // self.period, self.period)
        feats = []
        for conv in self.convs:
            h = _lrelu(conv(h))
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h.flatten(1), feats


class STFTDiscriminator(nn.Module):
    """2-D conv stack over the (real, imag) STFT at one resolution."""

    def __init__(self, window: int, channels: int):
        super().__init__()
        self.cfg = dsp.SpectrogramConfig(n_fft=window, hop=window // 4, win=window, n_mels=1)
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(2, c, (3, 9), padding=(1, 4)),
            nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(1, 1), padding=(1, 4)),
            nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(2, 1), padding=(2, 4)),
            nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(4, 1), padding=(4, 4)),
            nn.Conv2d(c, c, (3, 3), padding=(1, 1)),
        ])
        self.post = nn.Conv2d(c, 1, (3, 3), padding=(1, 1))

    def forward(self, x: torch.Tensor):
        spec = dsp.stft(x, self.cfg)                      # (B, T, F) complex
        h = torch.stack([spec.real, spec.imag], dim=1)    # (B, 2, T, F)
        feats = []
        for conv in self.convs:
            h = _lrelu(conv(h))
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h.flatten(1), feats


class SubBandCQTDiscriminator(nn.Module):
    """CQT split into octave sub-bands, each with its own input conv, then a shared stack."""

    def __init__(self, channels: int, bins_per_octave: int, n_octaves: int, fmin: float):
        super().__init__()
        self.cfg = dsp.CQTConfig(bins_per_octave, n_octaves, fmin).validate()
        c = channels
        self.band_convs = nn.ModuleList([
            nn.Conv2d(2, c, (3, 9), padding=(1, 4)) for _ in range(n_octaves)])
        self.convs = nn.ModuleList([
            nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(2, 1), padding=(2, 4)),
            nn.Conv2d(c, c, (3, 3), padding=(1, 1)),
        ])
        self.post = nn.Conv2d(c, 1, (3, 3), padding=(1, 1))

    def forward(self, x: torch.Tensor):
        spec = dsp.cqt(x, self.cfg)                       # (B, T, bins)
        h = torch.stack([spec.real, spec.imag], dim=1)
        bpo = self.cfg.bins_per_octave
        bands = [conv(h[..., i * bpo:(i + 1) * bpo]) for i, conv in enumerate(self.band_convs)]
        h = _lrelu(torch.cat(bands, dim=-1))
        feats = [h]
        for conv in self.convs:
            h = _lrelu(conv(h))
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h.flatten(1), feats


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        heads: List[nn.Module] = []
        if cfg.use_mpd:
            heads += [PeriodDiscriminator(p, cfg.mpd_channels) for p in cfg.periods]
        if cfg.use_stft:
            heads += [STFTDiscriminator(w, cfg.stft_channels) for w in cfg.stft_windows]
        if cfg.use_cqt:
            heads.append(SubBandCQTDiscriminator(cfg.cqt_channels, cfg.cqt_bins_per_octave,
                                                 cfg.cqt_octaves, cfg.cqt_fmin))
        self.heads = nn.ModuleList(heads)

    def forward(self, audio: torch.Tensor) -> DiscriminatorOutput:
        out = DiscriminatorOutput()
        for head in self.heads:
            logits, feats = head(audio)
            out.logits.append(logits)
            out.feature_maps.append(feats)
        return out


def discriminate(audio, disc: Discriminator) -> DiscriminatorOutput:
    x = dsp._as_tensor(audio)
    if x.ndim == 1:
        x = x[None]
    return disc(x.to(next(disc.parameters()).dtype))


def _logits(d) -> List[torch.Tensor]:
    return d.logits if isinstance(d, DiscriminatorOutput) else list(d)


def generator_adv_loss(d_fake) -> torch.Tensor:
    """Hinge generator loss, averaged over heads with a per-head mean."""
    logits = _logits(d_fake)
    return sum(F.relu(1.0 - l).mean() for l in logits) / len(logits)


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    real, fake = _logits(d_real), _logits(d_fake)
    if len(real) != len(fake):
        raise ValueError("real and fake outputs come from different discriminator sets")
    total = sum(F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(real, fake))
    return total / len(real)


def feature_matching_loss(d_real, d_fake) -> torch.Tensor:
    """Mean over all (head, layer) pairs of L1 distance normalised by the real map's mean magnitude."""
    real = d_real.feature_maps if isinstance(d_real, DiscriminatorOutput) else d_real
    fake = d_fake.feature_maps if isinstance(d_fake, DiscriminatorOutput) else d_fake
    if len(real) != len(fake):
        raise ValueError("feature topology mismatch")
    terms = []
    for fr_k, ff_k in zip(real, fake):
        if len(fr_k) != len(ff_k):
            raise ValueError("feature topology mismatch")
        for fr, ff in zip(fr_k, ff_k):
            denom = fr.abs().mean()
            if float(denom) < FEATURE_EPS:
                logger.debug("feature matching: near-zero real feature map, clamping denominator")
            terms.append((fr - ff).abs().mean() / denom.clamp_min(FEATURE_EPS))
    return sum(terms) / len(terms)
