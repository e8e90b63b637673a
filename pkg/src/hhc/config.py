"""Flat ``key = value`` run configuration with a typed schema.

Every knob lives in :class:`RunConfig`. A config file selects a ``profile``
(``desk`` or ``full``) whose defaults apply first; explicit keys override
them, then named ablations are applied on top. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .adversary import DiscriminatorConfig
from .dsp import SpectrogramConfig
from .errors import ConfigError
from .nets import NetworkConfig

ABLATIONS = ("classic-vq", "single-slmvq", "single-supervision", "no-progressive",
             "simple-network", "short-windows")


@dataclass
class RunConfig:
    profile: str = "full"
    seed: int = 0
    deterministic: bool = True
    ablation: Tuple[str, ...] = ()

    # data
    manifest: str = ""
    window_seconds: float = 3.0
    batch_size: int = 6
    pad_short: bool = True

    # spectrogram
    n_fft: int = 1024
    mel_hop: int = 256
    win: int = 1024
    n_mels: int = 100
    fmin: float = 0.0
    fmax: float = 12000.0

    # network
    strides: Tuple[int, ...] = (8, 8, 4, 4)
    base_channels: int = 32
    latent_dim: int = 512
    n_convnext_blocks: int = 8
    n_attn_layers_enc: int = 1
    n_attn_layers_dec: int = 2
    decoder_channels: int = 512
    recurrent: str = "bilstm"
    vocoder_profile: str = "desk"
    vocoder_channels: int = 256
    vocoder_upsample: Tuple[int, ...] = (8, 8, 4)

    # quantizer
    quantizer: str = "slm"
    K_codes: int = 8192
    vq_layers: int = 2
    reparam_depth: int = 1
    rotation: bool = True
    beta: float = 1.0
    ema_decay: float = 0.99

    # distillation
    teacher_source: str = "stub"       # stub | files | command
    teacher_dim: int = 768
    teacher_rate: float = 50.0
    teacher_dir: str = ""
    teacher_command: str = ""

    # discriminators
    use_mpd: bool = True
    use_stft: bool = True
    use_cqt: bool = True
    periods: Tuple[int, ...] = (2, 3, 5, 7, 11)
    stft_windows: Tuple[int, ...] = (512, 1024, 2048)
    mpd_channels: Tuple[int, ...] = (32, 128, 512, 1024)
    stft_channels: int = 32
    cqt_channels: int = 32
    cqt_bins_per_octave: int = 24
    cqt_octaves: int = 8
    cqt_fmin: float = 32.7

    # loss weights
    lambda_rec: float = 1.0
    lambda_D: float = 1.0
    lambda_distill: float = 0.5
    lambda_vq: float = 1.0
    mel_scale: float = 45.0

    # optimisation and schedule
    lr: float = 1e-4
    lr_min: float = 1e-5
    disc_lr: float = 1e-4
    adam_beta1: float = 0.8
    adam_beta2: float = 0.99
    grad_clip: float = 0.0
    progressive: bool = True
    dual_supervision: bool = True
    phase_threshold: float = 1.0
    mel_ema_decay: float = 0.99
    phase1_max_steps: int = 2000
    phase2_steps: int = 5000
    target_mel_l1: float = 0.0          # stop phase 2 early once reached; 0 disables
    vocoder_pretrain_steps: int = 0
    vocoder_lr: float = 1e-3
    vocoder_batch_size: int = 4
    vocoder_window_seconds: float = 1.0

    # run bookkeeping
    log_every: int = 1
    checkpoint_every: int = 1000
    sample_every: int = 1000
    eval_every: int = 250
    eval_clips: int = 0                 # 0 = every training clip
    max_divergence_retries: int = 3

    # --- derived views --------------------------------------------------
    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            strides=tuple(self.strides), base_channels=self.base_channels,
            latent_dim=self.latent_dim, n_convnext_blocks=self.n_convnext_blocks,
            n_attn_layers_enc=self.n_attn_layers_enc, n_attn_layers_dec=self.n_attn_layers_dec,
            decoder_channels=self.decoder_channels, n_mels=self.n_mels, mel_hop=self.mel_hop,
            recurrent=self.recurrent, vocoder_profile=self.vocoder_profile,
            vocoder_channels=self.vocoder_channels,
            vocoder_upsample=tuple(self.vocoder_upsample))

    def spectrogram_config(self) -> SpectrogramConfig:
        return SpectrogramConfig(n_fft=self.n_fft, hop=self.mel_hop, win=self.win,
                                 n_mels=self.n_mels, fmin=self.fmin, fmax=self.fmax)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            periods=tuple(self.periods), stft_windows=tuple(self.stft_windows),
            use_mpd=self.use_mpd, use_stft=self.use_stft, use_cqt=self.use_cqt,
            mpd_channels=tuple(self.mpd_channels), stft_channels=self.stft_channels,
            cqt_channels=self.cqt_channels, cqt_bins_per_octave=self.cqt_bins_per_octave,
            cqt_octaves=self.cqt_octaves, cqt_fmin=self.cqt_fmin)

    @property
    def variant_tag(self) -> str:
        return "+".join(self.ablation) if self.ablation else "full-model"

    def validate(self) -> "RunConfig":
        problems = []
        if self.profile not in PROFILES:
            problems.append(f"profile: expected one of {sorted(PROFILES)}")
        for a in self.ablation:
            if a not in ABLATIONS:
                problems.append(f"ablation: unknown variant {a!r}")
        if self.quantizer not in ("slm", "classic"):
            problems.append("quantizer: expected 'slm' or 'classic'")
        if self.teacher_source not in ("stub", "files", "command"):
            problems.append("teacher_source: expected stub, files or command")
        if self.teacher_source == "files" and not self.teacher_dir:
            problems.append("teacher_dir: required when teacher_source = files")
        if self.teacher_source == "command" and not (self.teacher_command and self.teacher_dir):
            problems.append("teacher_command/teacher_dir: required when teacher_source = command")
        for name in ("lambda_rec", "lambda_D", "lambda_distill", "lambda_vq", "mel_scale"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if self.K_codes < 2:
            problems.append("K_codes: must be >= 2")
        if self.vq_layers < 1:
            problems.append("vq_layers: must be >= 1")
        if self.window_seconds <= 0 or self.batch_size < 1:
            problems.append("window_seconds/batch_size: must be positive")
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))
        try:
            self.network_config().validate()
            self.spectrogram_config().validate()
            if self.use_cqt:
                self.discriminator_config()
                from .dsp import CQTConfig
                CQTConfig(self.cqt_bins_per_octave, self.cqt_octaves, self.cqt_fmin).validate()
        except ConfigError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


# Desk profile: small enough to overfit the fixture corpus on one CPU core.
DESK = dict(
    profile="desk",
    window_seconds=1.0, batch_size=4,
    base_channels=8, latent_dim=128, n_convnext_blocks=4, n_attn_layers_dec=1,
    decoder_channels=128, vocoder_channels=64,
    K_codes=1024, teacher_dim=64,
    use_cqt=False, periods=(2, 3, 5), stft_windows=(1024,),
    mpd_channels=(8, 16, 32, 32), stft_channels=8,
    lr=1e-3, lr_min=1e-4, disc_lr=2e-4,
    vocoder_pretrain_steps=1500, vocoder_lr=2e-3, vocoder_window_seconds=0.5,
    phase1_max_steps=2000, phase2_steps=5000,
    checkpoint_every=500, sample_every=1000, eval_every=250,
)
FULL: Dict[str, object] = dict(profile="full")
PROFILES = {"desk": DESK, "full": FULL}


def _ablation_overrides(name: str) -> Dict[str, object]:
    return {
        "classic-vq": dict(quantizer="classic", rotation=False),
        "single-slmvq": dict(vq_layers=1),
        "single-supervision": dict(dual_supervision=False),
        "no-progressive": dict(progressive=False, vocoder_pretrain_steps=0),
        "simple-network": dict(recurrent="lstm", use_stft=False, use_cqt=False),
        "short-windows": dict(window_seconds=1.0, n_attn_layers_enc=0),
    }[name]


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _coerce(name: str, raw: str):
    hint = typing.get_type_hints(RunConfig)[name]
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        origin = typing.get_origin(hint)
        if origin is tuple:
            (elem, _) = typing.get_args(hint)
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(elem(x) for x in items)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}")
    raise ConfigError(f"{name}: unsupported type")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values: Dict[str, object] = {}
    unknown: List[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            unknown.append(key)
            continue
        values[key] = _coerce(key, value)
    if unknown:
        raise ConfigError(f"{source}: unknown config keys: {', '.join(sorted(unknown))}")
    return values


def build_config(overrides: Optional[Dict[str, object]] = None,
                 ablations: Tuple[str, ...] = ()) -> RunConfig:
    """Profile defaults, then explicit overrides, then ablation switches."""
    overrides = dict(overrides or {})
    unknown = [k for k in overrides if k not in _FIELD_TYPES]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    profile = overrides.get("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"invalid configuration: profile {profile!r} not in {sorted(PROFILES)}")
    values: Dict[str, object] = dict(PROFILES[profile])
    values.update(overrides)
    tags = tuple(values.get("ablation", ())) + tuple(a for a in ablations
                                                      if a not in values.get("ablation", ()))
    bad = [a for a in tags if a not in ABLATIONS]
    if bad:
        raise ConfigError(f"invalid configuration: unknown ablation(s) {', '.join(bad)}; "
                          f"choose from {', '.join(ABLATIONS)}")
    for a in tags:
        values.update(_ablation_overrides(a))
    values["ablation"] = tags
    return RunConfig(**values).validate()


def load_config(path, ablations: Tuple[str, ...] = (), **overrides) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    if "manifest" in values and values["manifest"] and not Path(str(values["manifest"])).is_absolute():
        values["manifest"] = str((path.parent / str(values["manifest"])).resolve())
    values.update(overrides)
    return build_config(values, ablations)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")


def config_from_dict(d: Dict[str, object]) -> RunConfig:
    """Rebuild a config from a resolved snapshot (no profile/ablation re-application)."""
    values = {}
    for k, v in d.items():
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key in snapshot: {k}")
        values[k] = tuple(v) if isinstance(v, list) else v
    return RunConfig(**values).validate()


def config_to_dict(cfg: RunConfig) -> Dict[str, object]:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
