"""Encoder (audio -> latents), mel decoder (latents -> log-mel) and the desk vocoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import SAMPLE_RATE, AudioBuffer
from .dsp import MelSpectrogram
from .errors import ConfigError, InputTooShortError, ShapeError


@dataclass(frozen=True)
class NetworkConfig:
    strides: Tuple[int, ...] = (8, 8, 4, 4)
    base_channels: int = 32
    latent_dim: int = 512
    n_convnext_blocks: int = 8
    n_attn_layers_enc: int = 1
    n_attn_layers_dec: int = 2
    decoder_channels: int = 512
    n_mels: int = 100
    mel_hop: int = 256
    recurrent: str = "bilstm"          # "bilstm" | "lstm"
    vocoder_profile: str = "desk"      # "desk" | "external-mel-consumer"
    vocoder_channels: int = 256
    vocoder_upsample: Tuple[int, ...] = (8, 8, 4)
    vocoder_res_dilations: Tuple[int, ...] = (1, 3)

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    @property
    def frame_rate(self) -> float:
        return SAMPLE_RATE / self.hop

    @property
    def mel_upsample(self) -> int:
        return self.hop // self.mel_hop

    def validate(self) -> "NetworkConfig":
        if any(s % 2 for s in self.strides):
            raise ConfigError(f"strides must be even, got {self.strides}")
        if self.hop % self.mel_hop:
            raise ConfigError(f"hop {self.hop} is not a multiple of mel hop {self.mel_hop}")
        if int(np.prod(self.vocoder_upsample)) != self.mel_hop:
            raise ConfigError(
                f"vocoder upsampling {self.vocoder_upsample} must multiply to {self.mel_hop}")
        if self.recurrent not in ("bilstm", "lstm"):
            raise ConfigError(f"recurrent must be 'bilstm' or 'lstm', got {self.recurrent!r}")
        if self.vocoder_profile not in ("desk", "external-mel-consumer"):
            raise ConfigError(f"unknown vocoder profile {self.vocoder_profile!r}")
        return self


@dataclass(frozen=True)
class LatentSequence:
    frames: np.ndarray            # (time, latent_dim)
    frame_rate: float = SAMPLE_RATE / 1024

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _heads(dim: int) -> int:
    for h in (4, 2):
        if dim % h == 0 and dim // h >= 8:
            return h
    return 1


def variance_preserving_init(module: nn.Module) -> None:
    """He-normal weights with unit gain and zero bias for every conv and linear layer.

    Default initialisation shrinks the signal through the deep strided stack
    until the latents are nearly constant in time, which stalls training.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SelfAttention(nn.Module):
    """Pre-norm residual multi-head self-attention over (B, T, C)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, _heads(dim), batch_first=True)

    def forward(self, x):
        h = self.norm(x)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out


class ResidualUnit(nn.Module):
    def __init__(self, ch: int, dilation: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ELU(), nn.Conv1d(ch, ch, 3, dilation=dilation, padding=dilation),
            nn.ELU(), nn.Conv1d(ch, ch, 1))

    def forward(self, x):
        return x + self.block(x)


class EncoderBlock(nn.Module):
    def __init__(self, ch: int, stride: int, dilations=(1, 3)):
        super().__init__()
        self.units = nn.Sequential(*[ResidualUnit(ch, d) for d in dilations])
        # kernel 2s, padding s/2: output length is exactly input / s
        self.down = nn.Conv1d(ch, 2 * ch, 2 * stride, stride=stride, padding=stride // 2)

    def forward(self, x):
        return self.down(F.elu(self.units(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        ch = cfg.base_channels
        self.inp = nn.Conv1d(1, ch, 7, padding=3)
        blocks = []
        for s in cfg.strides:
            blocks.append(EncoderBlock(ch, s))
            ch *= 2
        self.blocks = nn.Sequential(*blocks)
        bidirectional = cfg.recurrent == "bilstm"
        self.rnn = nn.LSTM(ch, ch, batch_first=True, bidirectional=bidirectional)
        self.rnn_proj = nn.Linear(ch * (2 if bidirectional else 1), ch)
        self.attn = nn.ModuleList([SelfAttention(ch) for _ in range(cfg.n_attn_layers_enc)])
        self.out = nn.Conv1d(ch, cfg.latent_dim, 7, padding=3)
        self.hop = cfg.hop
        variance_preserving_init(self)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        """(B, T) with T a multiple of the hop -> (B, T / hop, latent_dim)."""
        if audio.shape[-1] % self.hop:
            raise ShapeError(f"input length {audio.shape[-1]} is not a multiple of {self.hop}")
        h = self.blocks(self.inp(audio[:, None, :]))
        h = F.elu(h).transpose(1, 2)
        r, _ = self.rnn(h)
        h = h + self.rnn_proj(r)
        for layer in self.attn:
            h = layer(h)
        return self.out(h.transpose(1, 2)).transpose(1, 2)


class ConvNeXtBlock(nn.Module):
    """Depthwise conv, LayerNorm, inverted-bottleneck MLP with GELU, layer scale."""

    def __init__(self, dim: int, expansion: int = 3, layer_scale: float = 1e-1):
        super().__init__()
        self.dw = nn.Conv1d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, expansion * dim)
        self.pw2 = nn.Linear(expansion * dim, dim)
        self.gamma = nn.Parameter(torch.full((dim,), layer_scale))

    def forward(self, x):
        # x: (B, T, C)
        h = self.dw(x.transpose(1, 2)).transpose(1, 2)
        h = self.pw2(F.gelu(self.pw1(self.norm(h))))
        return x + self.gamma * h


class MelDecoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        c = cfg.decoder_channels
        up = cfg.mel_upsample
        self.inp = nn.Conv1d(cfg.latent_dim, c, 7, padding=3)
        # kernel 2u, padding u/2: exactly u output frames per token
        self.up = nn.ConvTranspose1d(c, c, 2 * up, stride=up, padding=up // 2)
        n_blocks, n_attn = cfg.n_convnext_blocks, cfg.n_attn_layers_dec
        attn_after = set()
        if n_attn:
            attn_after = {round((i + 1) * n_blocks / n_attn) - 1 for i in range(n_attn)}
        layers = []
        for i in range(n_blocks):
            layers.append(ConvNeXtBlock(c))
            if i in attn_after:
                layers.append(SelfAttention(c))
        if n_blocks == 0:
            layers += [SelfAttention(c) for _ in range(n_attn)]
        self.layers = nn.ModuleList(layers)
        self.norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, cfg.n_mels)
        variance_preserving_init(self)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        """(B, t, latent_dim) -> (B, 4t, n_mels) log-mel."""
        h = self.up(self.inp(q.transpose(1, 2))).transpose(1, 2)
        for layer in self.layers:
            h = layer(h)
        return self.head(self.norm(h))


class Snake(nn.Module):
    """x + sin^2(alpha x) / alpha with a learnable per-channel frequency."""

    def __init__(self, ch: int):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(1, ch, 1))

    def forward(self, x):
        return x + torch.sin(self.alpha * x).pow(2) / (self.alpha + 1e-9)


class SnakeResBlock(nn.Module):
    def __init__(self, ch: int, dilations=(1, 3)):
        super().__init__()
        self.convs = nn.ModuleList()
        for d in dilations:
            self.convs.append(nn.Sequential(
                Snake(ch), nn.Conv1d(ch, ch, 3, dilation=d, padding=d),
                Snake(ch), nn.Conv1d(ch, ch, 3, padding=1)))

    def forward(self, x):
        for conv in self.convs:
            x = x + conv(x)
        return x


class Vocoder(nn.Module):
    """Small transposed-conv generator with snake activations, mel -> waveform."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        ch = cfg.vocoder_channels
        self.inp = nn.Conv1d(cfg.n_mels, ch, 7, padding=3)
        stages = []
        for u in cfg.vocoder_upsample:
            out_ch = max(ch // 2, 4)
            stages.append(nn.Sequential(
                Snake(ch),
                nn.ConvTranspose1d(ch, out_ch, 2 * u, stride=u, padding=u // 2),
                SnakeResBlock(out_ch, cfg.vocoder_res_dilations)))
            ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.out = nn.Sequential(Snake(ch), nn.Conv1d(ch, 1, 7, padding=3))
        self.hop = cfg.mel_hop

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, F, n_mels) -> (B, F * 256)."""
        h = self.stages(self.inp(mel.transpose(1, 2)))
        return torch.tanh(self.out(h))[:, 0, :]


def count_parameters(params) -> int:
    """Exact element count of a module, a state/param dict, or an iterable of tensors."""
    if isinstance(params, nn.Module):
        params = params.parameters()
    elif isinstance(params, dict):
        params = params.values()
    return int(sum(p.numel() for p in params))


# --- buffer-level helpers --------------------------------------------------

def _audio_tensor(buf, hop: int) -> Tuple[torch.Tensor, int]:
    x = buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float32)
    n = x.shape[-1]
    if n < hop:
        raise InputTooShortError(f"need at least {hop} samples, got {n}")
    target = int(math.ceil(n / hop)) * hop
    x = np.pad(np.asarray(x, dtype=np.float32), (0, target - n))
    return torch.from_numpy(x)[None], n


def param_dtype(module: nn.Module) -> torch.dtype:
    for p in module.parameters():
        return p.dtype
    return torch.float32


@torch.no_grad()
def encode(buf, encoder: Encoder) -> LatentSequence:
    """Right-pad to the hop and run the encoder; ``ceil(len / hop)`` frames."""
    x, _ = _audio_tensor(buf, encoder.hop)
    e = encoder(x.to(param_dtype(encoder)))[0]
    return LatentSequence(e.float().numpy(), SAMPLE_RATE / encoder.hop)


@torch.no_grad()
def decode_mel(q, decoder: MelDecoder, cfg: NetworkConfig = NetworkConfig()) -> MelSpectrogram:
    q = torch.as_tensor(np.asarray(q), dtype=param_dtype(decoder))
    if q.ndim != 2 or q.shape[0] < 1:
        raise ShapeError(f"expected (frames >= 1, dim) latents, got {tuple(q.shape)}")
    mel = decoder(q[None])[0]
    return MelSpectrogram(mel.float().numpy(), cfg.mel_hop, 1024, mel.shape[-1])


@torch.no_grad()
def vocode(mel, vocoder: Vocoder) -> AudioBuffer:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    m = torch.as_tensor(frames, dtype=param_dtype(vocoder))
    return AudioBuffer(vocoder(m[None])[0].float().numpy(), SAMPLE_RATE)
