"""The assembled codec: encoder, residual quantizer, mel decoder, vocoder, distillation head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import dsp
from .audio import SAMPLE_RATE, AudioBuffer, as_buffer, pad_to_multiple
from .bitstream import TokenStream
from .config import RunConfig
from .distill import DistillHead
from .errors import InputTooShortError, TokenRangeError
from .nets import Encoder, MelDecoder, Vocoder, param_dtype
from .quantize import QuantizerOutput, ResidualQuantizer


@dataclass
class CodecOutput:
    latents: torch.Tensor          # e, (B, t, latent_dim)
    quant: QuantizerOutput
    mel_rec: torch.Tensor          # middle mel, (B, 4t, n_mels)
    audio_rec: Optional[torch.Tensor]
    distill_proj: Optional[torch.Tensor]


class CodecModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        net = cfg.network_config()
        self.net_cfg = net
        self.spec_cfg = cfg.spectrogram_config()
        self.hop = net.hop
        self.encoder = Encoder(net)
        self.quantizer = ResidualQuantizer(
            cfg.K_codes, net.latent_dim, n_layers=cfg.vq_layers, kind=cfg.quantizer,
            reparam_depth=cfg.reparam_depth, rotation=cfg.rotation, beta=cfg.beta,
            ema_decay=cfg.ema_decay, seed=cfg.seed)
        self.decoder = MelDecoder(net)
        self.vocoder = Vocoder(net)
        self.distill_head = DistillHead(net.latent_dim, cfg.teacher_dim)

    @property
    def codebook_size(self) -> int:
        return self.cfg.K_codes

    @torch.no_grad()
    def init_quantizer(self, audio: torch.Tensor) -> None:
        """Scale the frozen codebooks to the encoder's initial latent norms."""
        self.quantizer.init_from_latents(self.encoder(audio), seed=self.cfg.seed)

    def forward(self, audio: torch.Tensor, with_audio: bool = True) -> CodecOutput:
        """``audio`` (B, T) with T a multiple of the hop."""
        e = self.encoder(audio)
        q = self.quantizer(e)
        mel_rec = self.decoder(q.first)
        wav = self.vocoder(mel_rec) if with_audio else None
        proj = self.distill_head(q.first)
        return CodecOutput(e, q, mel_rec, wav, proj)

    def target_mel(self, audio: torch.Tensor) -> torch.Tensor:
        return dsp.log_mel(audio, self.spec_cfg)

    # --- inference -------------------------------------------------------
    def _padded(self, samples: np.ndarray) -> tuple:
        if samples.shape[-1] < 1:
            raise InputTooShortError("cannot encode an empty signal")
        x, n = pad_to_multiple(np.asarray(samples, dtype=np.float32), self.hop)
        return torch.from_numpy(np.ascontiguousarray(x)).to(param_dtype(self)), n

    @torch.no_grad()
    def encode_tokens(self, audio) -> TokenStream:
        buf = as_buffer(audio)
        x, n = self._padded(buf.samples)
        was_training = self.training
        self.eval()
        codes = self.quantizer.infer(self.encoder(x[None]))[0]
        self.train(was_training)
        return TokenStream(codes.numpy(), self.codebook_size, n)

    @torch.no_grad()
    def decode_tokens(self, ts: TokenStream) -> AudioBuffer:
        if ts.codebook_size != self.codebook_size:
            raise TokenRangeError(
                f"stream codebook size {ts.codebook_size} != model codebook size {self.codebook_size}")
        if len(ts) == 0:
            return AudioBuffer(np.zeros(0, dtype=np.float32), SAMPLE_RATE)
        was_training = self.training
        self.eval()
        codes = torch.tensor(ts.tokens, dtype=torch.long)
        q = self.quantizer.lookup(codes)[None]
        wav = self.vocoder(self.decoder(q))[0]
        self.train(was_training)
        out = wav.float().numpy()[:ts.source_sample_count]
        return AudioBuffer(out, SAMPLE_RATE)

    @torch.no_grad()
    def reconstruct(self, audio) -> AudioBuffer:
        buf = as_buffer(audio)
        return self.decode_tokens(self.encode_tokens(buf))

    @torch.no_grad()
    def reconstruct_mel(self, audio) -> np.ndarray:
        """Middle mel (decoder output) for ``audio``, cropped to the reference frame count."""
        buf = as_buffer(audio)
        x, n = self._padded(buf.samples)
        was_training = self.training
        self.eval()
        codes = self.quantizer.infer(self.encoder(x[None]))
        mel = self.decoder(self.quantizer.lookup(codes))[0]
        self.train(was_training)
        return mel.float().numpy()
