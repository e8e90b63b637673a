"""scikit-learn style wrappers.

``HHCodec`` fits the full codec on a list of waveforms (or a manifest) and
maps audio to tokens with ``transform`` and back with ``inverse_transform``.
``QuantizedAutoencoder`` is a small MLP autoencoder around the same quantizers,
used to measure codebook utilization on embedding data.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn

from .audio import SAMPLE_RATE, AudioBuffer, load_corpus, read_manifest
from .bitstream import TokenStream
from .config import build_config
from .errors import AudioError, EmptyInputError
from .metrics import UtilizationReport, codebook_utilization, mel_l1
from .quantize import ResidualQuantizer


def check_audio(X) -> List[np.ndarray]:
    """Normalise audio input to a list of finite 1-D float32 arrays.

    Accepts an ``AudioBuffer``, a 1-D array, a 2-D array (one clip per row), or
    a sequence of any of these.
    """
    if isinstance(X, (AudioBuffer, np.ndarray)) or (
            isinstance(X, Sequence) and X and np.isscalar(X[0])):
        X = [X] if not (isinstance(X, np.ndarray) and X.ndim == 2) else list(X)
    out = []
    for i, x in enumerate(X):
        if isinstance(x, AudioBuffer):
            if x.sample_rate != SAMPLE_RATE:
                raise AudioError(f"clip {i}: sample rate {x.sample_rate} != {SAMPLE_RATE}")
            x = x.samples
        a = np.asarray(x, dtype=np.float32)
        if a.ndim != 1:
            raise AudioError(f"clip {i}: expected a 1-D waveform, got shape {a.shape}")
        if a.size == 0:
            raise EmptyInputError(f"clip {i} is empty")
        if not np.all(np.isfinite(a)):
            raise AudioError(f"clip {i} contains non-finite samples")
        out.append(a)
    if not out:
        raise EmptyInputError("no audio given")
    return out


class HHCodec(BaseEstimator, TransformerMixin):
    """Speech codec estimator; tokens are ``TokenStream`` objects (one per clip)."""

    def __init__(self, profile: str = "desk", ablation: tuple = (), seed: int = 0,
                 overrides: Optional[dict] = None, run_dir=None):
        self.profile = profile
        self.ablation = ablation
        self.seed = seed
        self.overrides = overrides
        self.run_dir = run_dir

    def _config(self):
        values = {"profile": self.profile, "seed": self.seed}
        values.update(self.overrides or {})
        return build_config(values, tuple(self.ablation))

    def fit(self, X, y=None):
        from .trainer import Trainer

        paths = None
        if isinstance(X, (str, Path)):
            manifest = read_manifest(X)
            paths = [e.path for e in manifest.ordered(self.seed)]
            corpus = load_corpus(manifest, self.seed)
        else:
            corpus = [AudioBuffer(a) for a in check_audio(X)]
        trainer = Trainer(self._config(), corpus, paths=paths, run_dir=self.run_dir)
        trainer.open_run_dir()
        try:
            trainer.run()
        finally:
            trainer.close()
        self.trainer_ = trainer
        self.model_ = trainer.model.eval()
        self.state_ = trainer.state
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "HHCodec":
        from .codec import load_model

        model = load_model(path)
        est = cls(profile=model.cfg.profile, ablation=model.cfg.ablation, seed=model.cfg.seed)
        est.model_ = model
        return est

    def transform(self, X) -> List[TokenStream]:
        check_is_fitted(self, "model_")
        return [self.model_.encode_tokens(a) for a in check_audio(X)]

    def inverse_transform(self, streams) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        if isinstance(streams, TokenStream):
            streams = [streams]
        return [self.model_.decode_tokens(ts).samples for ts in streams]

    def score(self, X, y=None) -> float:
        """Negative mean log-mel L1 of the reconstructions (higher is better)."""
        clips = check_audio(X)
        recs = self.inverse_transform(self.transform(clips))
        return -float(np.mean([mel_l1(a, r, self.model_.spec_cfg) for a, r in zip(clips, recs)]))


# --- quantizer benchmark estimator ---------------------------------------------

def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Module:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))


class QuantizedAutoencoder(BaseEstimator, TransformerMixin):
    """MLP encoder -> residual quantizer -> MLP decoder, trained on squared error.

    Only the first quantizer layer feeds the decoder; ``transform`` returns its
    code indices.
    """

    def __init__(self, n_codes: int = 1024, quantizer: str = "slm", n_layers: int = 2,
                 rotation: bool = True, latent_dim: int = 32, hidden: int = 128,
                 n_steps: int = 400, batch_size: int = 1024, lr: float = 1e-3,
                 random_state: int = 0):
        self.n_codes = n_codes
        self.quantizer = quantizer
        self.n_layers = n_layers
        self.rotation = rotation
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        data = torch.from_numpy(X)
        torch.manual_seed(self.random_state)
        d_in = X.shape[1]
        self.n_features_in_ = d_in
        self.encoder_ = _mlp(d_in, self.hidden, self.latent_dim)
        self.decoder_ = _mlp(self.latent_dim, self.hidden, d_in)
        rotation = self.rotation if self.quantizer == "slm" else False
        self.quantizer_ = ResidualQuantizer(self.n_codes, self.latent_dim, n_layers=self.n_layers,
                                            kind=self.quantizer, rotation=rotation,
                                            seed=self.random_state)
        gen = torch.Generator().manual_seed(self.random_state + 1)
        with torch.no_grad():
            init = data[torch.randint(0, len(data), (min(4096, len(data)),), generator=gen)]
            self.quantizer_.init_from_latents(self.encoder_(init), seed=self.random_state)
        params = (list(self.encoder_.parameters()) + list(self.decoder_.parameters())
                  + list(self.quantizer_.parameters()))
        opt = torch.optim.Adam(params, lr=self.lr)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            x = data[torch.randint(0, len(data), (self.batch_size,), generator=gen)]
            out = self.quantizer_(self.encoder_(x))
            rec = ((self.decoder_(out.first) - x) ** 2).mean()
            loss = rec + out.loss
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            self.loss_curve_.append(float(rec.detach()))
        self.quantizer_.eval()
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "quantizer_")
        X = check_array(X, dtype=np.float32)
        with torch.no_grad():
            return self.quantizer_.infer(self.encoder_(torch.from_numpy(X))).numpy()

    def inverse_transform(self, codes) -> np.ndarray:
        check_is_fitted(self, "quantizer_")
        with torch.no_grad():
            q = self.quantizer_.lookup(torch.as_tensor(np.asarray(codes), dtype=torch.long))
            return self.decoder_(q).numpy()

    def utilization(self, X) -> UtilizationReport:
        return codebook_utilization([self.transform(X)], self.n_codes)

    def score(self, X, y=None) -> float:
        X = check_array(X, dtype=np.float32)
        return -float(np.mean((self.inverse_transform(self.transform(X)) - X) ** 2))
