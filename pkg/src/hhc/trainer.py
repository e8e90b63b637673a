"""Two-phase progressive training with dual mel supervision.

Phase ``mel_warmup`` trains encoder, quantizer, decoder and distillation head
on the middle mel only, with the vocoder frozen and no discriminator. Once the
exponential average of the middle-mel L1 drops below the threshold the run
switches, once, to ``full_finetune``: discriminator and generator steps
alternate and every module trains.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .adversary import (Discriminator, discriminator_loss, feature_matching_loss,
                        generator_adv_loss)
from .audio import SAMPLE_RATE, AudioBuffer, make_batch, save_wav
from .config import RunConfig, config_to_dict, save_config
from .distill import (FileTeacher, ExternalTeacher, StubTeacher, align_teacher_torch,
                      distill_loss)
from .errors import DataError, HHCError, ShapeError, TrainingDivergence
from .metrics import mel_l1
from .model import CodecModel

logger = logging.getLogger(__name__)

MEL_WARMUP = "mel_warmup"
FULL_FINETUNE = "full_finetune"
PHASES = (MEL_WARMUP, FULL_FINETUNE)


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_D: float = 1.0
    lambda_distill: float = 0.5
    lambda_vq: float = 1.0
    mel_scale: float = 45.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be >= 0, got {v}")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LossWeights":
        return cls(cfg.lambda_rec, cfg.lambda_D, cfg.lambda_distill, cfg.lambda_vq, cfg.mel_scale)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    phase: str = MEL_WARMUP
    ema_mel_loss: Optional[float] = None
    rng_state: Optional[torch.Tensor] = None
    switch_step: Optional[int] = None
    phase2_start: Optional[int] = None
    vocoder_pretrained: bool = False
    consecutive_aborts: int = 0
    best_eval_mel: Optional[float] = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass
class LossReport:
    mel: float
    adv_g: float
    feat: float
    vq: float
    distill: float
    disc: float
    total: float
    phase: str
    step: int = 0
    mel_mid: float = 0.0
    mel_final: float = 0.0

    def as_record(self) -> Dict:
        return asdict(self)


def combine(weights: LossWeights, mel, adv_g, feat, vq, distill, disc):
    """Weighted total: rec * (feat + mel_scale * mel + adv_g) + D * disc + distill + vq terms."""
    w = weights
    return (w.lambda_rec * (feat + w.mel_scale * mel + adv_g) + w.lambda_D * disc
            + w.lambda_distill * distill + w.lambda_vq * vq)


def mel_loss(mel: torch.Tensor, mel_rec: torch.Tensor, mel_hat_rec: torch.Tensor) -> torch.Tensor:
    """Sum of the middle and final mean-absolute mel errors."""
    if not (mel.shape == mel_rec.shape == mel_hat_rec.shape):
        raise ShapeError(f"mel shapes differ: {tuple(mel.shape)}, {tuple(mel_rec.shape)}, "
                         f"{tuple(mel_hat_rec.shape)}")
    return (mel - mel_rec).abs().mean() + (mel - mel_hat_rec).abs().mean()


def update_ema(state: TrainState, value: float, decay: float = 0.99) -> TrainState:
    ema = value if state.ema_mel_loss is None else decay * state.ema_mel_loss + (1 - decay) * value
    return replace(state, ema_mel_loss=float(ema))


def maybe_switch_phase(state: TrainState, threshold: float = 1.0) -> TrainState:
    """Enter ``full_finetune`` once the averaged middle-mel L1 is below ``threshold``."""
    if state.phase != MEL_WARMUP:
        return state
    if state.ema_mel_loss is not None and state.ema_mel_loss < threshold:
        return replace(state, phase=FULL_FINETUNE, switch_step=state.step)
    return state


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    t = min(max(step, 0), total) / total
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t))


def _item(t) -> float:
    return float(t.detach())


def _finite(*xs) -> bool:
    return all(bool(torch.isfinite(x).all()) for x in xs)


def _grads_finite(params) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)


class RunLock:
    """Exclusive lock file holding the owner's pid; stale locks are taken over."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "LOCK"
        self.held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and _pid_alive(pid):
                    raise DataError(f"run directory {self.path.parent} is locked by process {pid}")
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            self.held = True
            return
        raise DataError(f"could not lock {self.path.parent}")

    def release(self) -> None:
        if self.held:
            self.path.unlink(missing_ok=True)
            self.held = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def window_samples(window_seconds: float, hop: int) -> int:
    """Crop length rounded to a whole number of tokens (at least one)."""
    return max(1, int(round(window_seconds * SAMPLE_RATE / hop))) * hop


class Trainer:
    """Owns models, optimizers and the run directory for one training run.

    ``corpus`` holds the training clips; ``paths`` (same order) is needed only
    when teacher features come from files.
    """

    def __init__(self, cfg: RunConfig, corpus: Sequence[AudioBuffer],
                 paths: Optional[Sequence[Path]] = None, run_dir=None):
        if not corpus:
            raise DataError("training corpus is empty")
        self.cfg = cfg
        self.corpus = list(corpus)
        self.paths = list(paths) if paths is not None else None
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.weights = LossWeights.from_config(cfg)
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.model = CodecModel(cfg)
        self.disc = Discriminator(cfg.discriminator_config())
        self.teacher = self._make_teacher()
        self.gen_params = [p for n, p in self.model.named_parameters()]
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.gen_params, lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.disc_lr, betas=betas)
        self.opt_voc = torch.optim.Adam(self.model.vocoder.parameters(), lr=cfg.vocoder_lr,
                                        betas=betas)
        start_phase = MEL_WARMUP if cfg.progressive else FULL_FINETUNE
        self.state = TrainState(phase=start_phase,
                                phase2_start=None if cfg.progressive else 0)
        self.window = window_samples(cfg.window_seconds, self.model.hop)
        self._log_fh = None
        self._initialized = False
        self.history: List[LossReport] = []
        self.events: List[Dict] = []

    # --- setup ------------------------------------------------------------
    def _make_teacher(self):
        cfg = self.cfg
        if cfg.teacher_source == "stub":
            return StubTeacher(cfg.teacher_dim, cfg.teacher_rate, seed=cfg.seed + 1234)
        if cfg.teacher_source == "files":
            return FileTeacher(cfg.teacher_dir)
        return ExternalTeacher(cfg.teacher_command, cfg.teacher_dir, cfg.teacher_rate)

    def _ensure_initialized(self) -> None:
        if self._initialized:
            return
        if not bool(self.model.quantizer.layers[0].initialized):
            batch = self.batch(0, max(16, self.cfg.batch_size))[0]
            self.model.init_quantizer(batch)
        self._initialized = True

    def batch(self, step: int, batch_size: Optional[int] = None, window: Optional[int] = None):
        n = window or self.window
        data, meta = make_batch(self.corpus, batch_size or self.cfg.batch_size, n / SAMPLE_RATE,
                                self.cfg.seed, step, pad_short=self.cfg.pad_short,
                                return_meta=True)
        return torch.from_numpy(data), meta

    def teacher_targets(self, audio: torch.Tensor, meta, n_tokens: int) -> torch.Tensor:
        if isinstance(self.teacher, StubTeacher):
            feats = self.teacher(audio)
        else:
            if self.paths is None:
                raise DataError("file-based teacher features need the corpus paths")
            crops = [self.teacher.crop(self.paths[i], off, audio.shape[-1]) for i, off in meta]
            rows = min(c.shape[0] for c in crops)
            feats = torch.as_tensor(np.stack([c[:rows] for c in crops]), dtype=audio.dtype)
        if feats.shape[-1] != self.cfg.teacher_dim:
            raise ShapeError(f"teacher dim {feats.shape[-1]} != teacher_dim {self.cfg.teacher_dim}")
        return align_teacher_torch(feats, n_tokens)

    # --- run directory ------------------------------------------------------
    def open_run_dir(self) -> None:
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        (self.run_dir / "samples").mkdir(exist_ok=True)
        save_config(self.cfg, self.run_dir / "config.txt")
        self._log_fh = (self.run_dir / "log.jsonl").open("a", encoding="utf-8")
        self.log_event("start", weights=asdict(self.weights), variant=self.cfg.variant_tag,
                       phase=self.state.phase)

    def close(self) -> None:
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None

    def _write(self, record: Dict) -> None:
        if self._log_fh:
            self._log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_fh.flush()

    def log_event(self, event: str, **fields) -> None:
        record = {"event": event, "step": self.state.step, **fields}
        self.events.append(record)
        self._write(record)
        logger.info("%s %s", event, json.dumps(fields, sort_keys=True, default=str))

    # --- phase-dependent trainability ----------------------------------------
    def _set_trainable(self) -> None:
        freeze_vocoder = self.state.phase == MEL_WARMUP
        self.model.vocoder.requires_grad_(not freeze_vocoder)
        self.disc.requires_grad_(self.state.phase == FULL_FINETUNE)

    def _set_lr(self) -> None:
        cfg = self.cfg
        if self.state.phase == FULL_FINETUNE:
            k = self.state.step - (self.state.phase2_start or 0)
            lr_g = cosine_lr(k, cfg.phase2_steps, cfg.lr, cfg.lr_min)
            lr_d = cosine_lr(k, cfg.phase2_steps, cfg.disc_lr, cfg.lr_min * cfg.disc_lr / cfg.lr)
        else:
            lr_g, lr_d = cfg.lr, cfg.disc_lr
        for g in self.opt_g.param_groups:
            g["lr"] = lr_g
        for g in self.opt_d.param_groups:
            g["lr"] = lr_d

    def _snapshot(self) -> Dict:
        return {
            "model": {k: v.clone() for k, v in self.model.state_dict().items()},
            "disc": {k: v.clone() for k, v in self.disc.state_dict().items()},
            "opt_g": copy.deepcopy(self.opt_g.state_dict()),
            "opt_d": copy.deepcopy(self.opt_d.state_dict()),
            "fallbacks": [l.fallback_count for l in self.model.quantizer.layers],
        }

    def _restore(self, snap: Dict) -> None:
        self.model.load_state_dict(snap["model"])
        self.disc.load_state_dict(snap["disc"])
        self.opt_g.load_state_dict(snap["opt_g"])
        self.opt_d.load_state_dict(snap["opt_d"])
        for l, n in zip(self.model.quantizer.layers, snap["fallbacks"]):
            l.fallback_count = n

    # --- one optimisation step -------------------------------------------------
    def _mel_target(self, audio: torch.Tensor, n_frames: int) -> torch.Tensor:
        with torch.no_grad():
            mel = self.model.target_mel(audio)
        return mel[:, :n_frames]

    def training_step(self, audio: torch.Tensor, meta=None) -> LossReport:
        """One step on ``audio`` (B, T); T must be a multiple of the hop."""
        self._ensure_initialized()
        self._set_trainable()
        self._set_lr()
        self.model.train()
        snap = self._snapshot()
        w = self.weights
        phase = self.state.phase
        try:
            report = (self._warmup_step(audio, meta) if phase == MEL_WARMUP
                      else self._finetune_step(audio, meta))
        except FloatingPointError as exc:
            self._restore(snap)
            return self._abort(str(exc))
        self.state.consecutive_aborts = 0
        self.state = update_ema(self.state, report.mel_mid, self.cfg.mel_ema_decay)
        self.state.step += 1
        self.state.epoch = (self.state.step * audio.shape[0] * audio.shape[-1]) // max(
            1, sum(len(c) for c in self.corpus))
        self.history.append(report)
        if self.cfg.log_every and (report.step % self.cfg.log_every == 0):
            rec = report.as_record()
            rec["ema_mel"] = self.state.ema_mel_loss
            rec["lr"] = self.opt_g.param_groups[0]["lr"]
            self._write(rec)
        return report

    def _abort(self, reason: str) -> LossReport:
        self.state.consecutive_aborts += 1
        self.log_event("abort", reason=reason, consecutive=self.state.consecutive_aborts)
        step = self.state.step
        self.state.step += 1
        if self.state.consecutive_aborts >= self.cfg.max_divergence_retries:
            raise TrainingDivergence(
                f"{self.state.consecutive_aborts} consecutive non-finite steps (last at step {step}: {reason})")
        nan = float("nan")
        return LossReport(nan, nan, nan, nan, nan, nan, nan, self.state.phase, step)

    def _distill_term(self, out, audio, meta) -> torch.Tensor:
        if self.cfg.lambda_distill == 0:
            return torch.zeros((), dtype=audio.dtype)
        target = self.teacher_targets(audio, meta, out.distill_proj.shape[1])
        return distill_loss(out.distill_proj, target.to(out.distill_proj.dtype))

    def _warmup_step(self, audio, meta) -> LossReport:
        w = self.weights
        out = self.model(audio, with_audio=False)
        mel = self._mel_target(audio, out.mel_rec.shape[1])
        mel_mid = (mel - out.mel_rec).abs().mean()
        vq = out.quant.loss
        dist = self._distill_term(out, audio, meta)
        zero = torch.zeros((), dtype=mel_mid.dtype)
        loss = combine(w, mel_mid, zero, zero, vq, dist, zero)
        if not _finite(loss):
            raise FloatingPointError("non-finite warm-up loss")
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        if not _grads_finite(self.gen_params):
            raise FloatingPointError("non-finite gradients")
        self._clip(self.gen_params)
        self.opt_g.step()
        m = float(mel_mid.detach())
        return LossReport(mel=m, adv_g=0.0, feat=0.0, vq=_item(vq), distill=_item(dist), disc=0.0,
                          total=_item(loss), phase=MEL_WARMUP, step=self.state.step,
                          mel_mid=m, mel_final=float("nan"))

    def _finetune_step(self, audio, meta) -> LossReport:
        w = self.weights
        out = self.model(audio, with_audio=True)
        fake = out.audio_rec
        # discriminator update on detached reconstructions
        d_real = self.disc(audio)
        d_fake = self.disc(fake.detach())
        l_disc = discriminator_loss(d_real, d_fake)
        if not _finite(l_disc):
            raise FloatingPointError("non-finite discriminator loss")
        self.opt_d.zero_grad(set_to_none=True)
        (w.lambda_D * l_disc).backward()
        if not _grads_finite(self.disc.parameters()):
            raise FloatingPointError("non-finite discriminator gradients")
        self._clip(list(self.disc.parameters()))
        self.opt_d.step()

        # generator update against the refreshed discriminator
        mel = self._mel_target(audio, out.mel_rec.shape[1])
        mel_hat = self.model.target_mel(fake)[:, :mel.shape[1]]
        mel_mid = (mel - out.mel_rec).abs().mean()
        mel_fin = (mel - mel_hat).abs().mean()
        l_mel = mel_mid + mel_fin if self.cfg.dual_supervision else mel_fin
        with torch.no_grad():
            d_real = self.disc(audio)
        d_fake = self.disc(fake)
        adv = generator_adv_loss(d_fake)
        feat = feature_matching_loss(d_real, d_fake)
        vq = out.quant.loss
        dist = self._distill_term(out, audio, meta)
        zero = torch.zeros((), dtype=adv.dtype)
        loss_g = combine(w, l_mel, adv, feat, vq, dist, zero)
        if not _finite(loss_g):
            raise FloatingPointError("non-finite generator loss")
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.disc.zero_grad(set_to_none=True)
        if not _grads_finite(self.gen_params):
            raise FloatingPointError("non-finite generator gradients")
        self._clip(self.gen_params)
        self.opt_g.step()
        disc_v = _item(l_disc)
        total = _item(loss_g) + w.lambda_D * disc_v
        return LossReport(mel=_item(l_mel), adv_g=_item(adv), feat=_item(feat), vq=_item(vq),
                          distill=_item(dist), disc=disc_v, total=total, phase=FULL_FINETUNE,
                          step=self.state.step, mel_mid=_item(mel_mid), mel_final=_item(mel_fin))

    def _clip(self, params) -> None:
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)

    # --- vocoder pretraining ----------------------------------------------------
    def pretrain_vocoder(self, steps: Optional[int] = None) -> List[float]:
        """Fit the vocoder on ground-truth mels of random crops (mel L1 on its output)."""
        cfg = self.cfg
        steps = cfg.vocoder_pretrain_steps if steps is None else steps
        voc = self.model.vocoder
        voc.requires_grad_(True)
        voc.train()
        window = window_samples(cfg.vocoder_window_seconds, self.model.hop)
        losses = []
        for k in range(steps):
            audio, _ = self.batch(10_000_000 + k, cfg.vocoder_batch_size, window)
            with torch.no_grad():
                mel = self.model.target_mel(audio)
            n = audio.shape[-1] // cfg.mel_hop
            mel = mel[:, :n]
            lr = cosine_lr(k, steps, cfg.vocoder_lr, cfg.vocoder_lr * 0.1)
            for g in self.opt_voc.param_groups:
                g["lr"] = lr
            wav = voc(mel)
            loss = (self.model.target_mel(wav)[:, :n] - mel).abs().mean()
            if not _finite(loss):
                raise TrainingDivergence(f"vocoder pretraining diverged at step {k}")
            self.opt_voc.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_voc.step()
            losses.append(float(loss.detach()))
            if self._log_fh and (k % max(1, cfg.log_every) == 0 or k == steps - 1):
                self._write({"event": "vocoder_pretrain", "vstep": k, "mel": _item(loss)})
        self.state.vocoder_pretrained = True
        self.log_event("vocoder_pretrained", steps=steps,
                       final_mel=losses[-1] if losses else None)
        return losses

    # --- evaluation -------------------------------------------------------------
    def eval_clips(self) -> List[AudioBuffer]:
        n = self.cfg.eval_clips or len(self.corpus)
        return self.corpus[:n]

    def evaluate(self) -> float:
        """Mean mel L1 of decode(encode(z)) over the evaluation clips."""
        vals = []
        for buf in self.eval_clips():
            rec = self.model.reconstruct(buf)
            vals.append(mel_l1(buf, rec, self.model.spec_cfg))
        return float(np.mean(vals))

    def save_sample(self) -> None:
        if self.run_dir is None:
            return
        buf = self.corpus[0]
        n = min(len(buf), 2 * SAMPLE_RATE)
        clip = AudioBuffer(buf.samples[:n])
        rec = self.model.reconstruct(clip)
        save_wav(self.run_dir / "samples" / f"step-{self.state.step:08d}.wav", rec)

    # --- checkpoints ------------------------------------------------------------
    def state_payload(self) -> Dict:
        st = replace(self.state, rng_state=torch.get_rng_state())
        return {
            "config": config_to_dict(self.cfg),
            "state": asdict(st),
            "model": self.model.state_dict(),
            "disc": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "opt_voc": self.opt_voc.state_dict(),
            "fallbacks": [l.fallback_count for l in self.model.quantizer.layers],
        }

    def save(self, path=None) -> Path:
        if path is None:
            if self.run_dir is None:
                raise DataError("no run directory to save into")
            path = self.run_dir / "checkpoints" / ckpt.checkpoint_name(self.state.step)
        return ckpt.save_checkpoint(path, self.state_payload())

    def load_payload(self, payload: Dict) -> None:
        self.model.load_state_dict(payload["model"])
        self.disc.load_state_dict(payload["disc"])
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_d.load_state_dict(payload["opt_d"])
        self.opt_voc.load_state_dict(payload["opt_voc"])
        for l, n in zip(self.model.quantizer.layers, payload.get("fallbacks", [])):
            l.fallback_count = n
        st = dict(payload["state"])
        rng = st.get("rng_state")
        self.state = TrainState(**st)
        if rng is not None:
            torch.set_rng_state(rng)
        self._initialized = True

    def load(self, path) -> None:
        self.load_payload(ckpt.load_checkpoint(path))

    # --- full run ---------------------------------------------------------------
    def _maybe_periodic(self) -> None:
        cfg, s = self.cfg, self.state.step
        if self.run_dir is not None and cfg.checkpoint_every and s % cfg.checkpoint_every == 0:
            self.save()
        if self.run_dir is not None and cfg.sample_every and s % cfg.sample_every == 0:
            self.save_sample()

    def run(self, on_step: Optional[Callable[[LossReport], None]] = None) -> TrainState:
        """Vocoder pretraining (if configured), warm-up, then fine-tuning."""
        cfg = self.cfg
        self._ensure_initialized()
        if cfg.progressive and cfg.vocoder_pretrain_steps and not self.state.vocoder_pretrained:
            self.pretrain_vocoder()
            self.save_if_run_dir()
        # phase 1
        while self.state.phase == MEL_WARMUP:
            if self.state.step >= cfg.phase1_max_steps:
                self.state = replace(self.state, phase=FULL_FINETUNE, switch_step=self.state.step)
                self.log_event("phase_switch", reason="max_steps", ema_mel=self.state.ema_mel_loss)
                break
            audio, meta = self.batch(self.state.step)
            rep = self.training_step(audio, meta)
            if on_step:
                on_step(rep)
            new = maybe_switch_phase(self.state, cfg.phase_threshold)
            if new.phase != self.state.phase:
                self.state = new
                self.log_event("phase_switch", reason="threshold", ema_mel=new.ema_mel_loss)
            self._maybe_periodic()
        if self.state.phase2_start is None:
            self.state.phase2_start = self.state.step
        # phase 2
        end = self.state.phase2_start + cfg.phase2_steps
        while self.state.step < end:
            audio, meta = self.batch(self.state.step)
            rep = self.training_step(audio, meta)
            if on_step:
                on_step(rep)
            self._maybe_periodic()
            k = self.state.step - self.state.phase2_start
            if cfg.eval_every and (k % cfg.eval_every == 0 or self.state.step == end):
                val = self.evaluate()
                best = self.state.best_eval_mel
                self.state.best_eval_mel = val if best is None else min(best, val)
                self.log_event("eval", mel_l1=val)
                if cfg.target_mel_l1 > 0 and val < cfg.target_mel_l1:
                    self.log_event("target_reached", mel_l1=val)
                    break
        self.save_if_run_dir()
        self.log_event("done", phase=self.state.phase)
        return self.state

    def save_if_run_dir(self) -> None:
        if self.run_dir is not None:
            self.save()
