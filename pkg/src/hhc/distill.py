"""Semantic distillation of the first quantizer layer against teacher features."""

from __future__ import annotations

import hashlib
import logging
import math
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import SAMPLE_RATE
from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

TEACHER_MAGIC = b"HHCT"
TEACHER_VERSION = 1


@dataclass(frozen=True)
class TeacherFeatures:
    frames: np.ndarray            # (time, D)
    frame_rate: float = 50.0

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def align_teacher(t: TeacherFeatures | np.ndarray, target_len: int) -> np.ndarray:
    """Linearly resample teacher frames along time to ``target_len`` rows.

    The first and last output rows coincide with the first and last teacher
    frames.
    """
    frames = t.frames if isinstance(t, TeacherFeatures) else np.asarray(t)
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    n = frames.shape[0]
    if n < 1:
        raise ValueError("teacher features have no frames")
    if n == target_len:
        return frames.copy()
    if target_len == 1:
        return frames[:1].copy()
    pos = np.linspace(0.0, n - 1, target_len)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * frames[lo] + w * frames[hi]


def align_teacher_torch(frames: torch.Tensor, target_len: int) -> torch.Tensor:
    """Batched torch version of :func:`align_teacher`; (B, T, D) -> (B, target_len, D)."""
    if frames.shape[1] == target_len:
        return frames
    if target_len == 1:
        return frames[:, :1]
    return F.interpolate(frames.transpose(1, 2), size=target_len, mode="linear",
                         align_corners=True).transpose(1, 2)


def token_frames(duration_seconds: float, hop: int = 1024) -> int:
    return int(math.ceil(round(duration_seconds * SAMPLE_RATE) / hop))


def distill_loss(vq1_proj: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean over feature dimensions of ``-log sigmoid(cos)``.

    Cosine similarity is taken along time, separately for every feature
    column. Accepts (T, D) or batched (B, T, D); batches are averaged.
    A column with zero norm contributes cosine 0.
    """
    if vq1_proj.shape != teacher.shape:
        raise ShapeError(
            f"distill shape mismatch: {tuple(vq1_proj.shape)} vs {tuple(teacher.shape)}")
    if vq1_proj.shape[-2] < 2:
        raise ShapeError("distillation needs at least 2 time steps")
    a, b = vq1_proj, teacher
    dot = (a * b).sum(-2)
    na = a.norm(dim=-2)
    nb = b.norm(dim=-2)
    zero = (na == 0) | (nb == 0)
    if bool(zero.any()):
        logger.debug("distill: %d zero-norm columns treated as cosine 0", int(zero.sum()))
    cos = torch.where(zero, torch.zeros_like(dot), dot / (na * nb).clamp_min(1e-12))
    return F.softplus(-cos).mean()


class DistillHead(nn.Module):
    def __init__(self, latent_dim: int, teacher_dim: int):
        super().__init__()
        self.proj = nn.Linear(latent_dim, teacher_dim)

    @property
    def out_dim(self) -> int:
        return self.proj.out_features

    def forward(self, q1):
        return self.proj(q1)


# --- teacher sources --------------------------------------------------------

class StubTeacher(nn.Module):
    """Frozen random strided convolution standing in for a speech model (50 Hz)."""

    def __init__(self, dim: int = 768, frame_rate: float = 50.0, seed: int = 1234):
        super().__init__()
        hop = int(round(SAMPLE_RATE / frame_rate))
        gen = torch.Generator().manual_seed(seed)
        self.hop = hop
        self.frame_rate = SAMPLE_RATE / hop
        self.register_buffer("kernel", torch.randn(dim, 1, 2 * hop, generator=gen) / (2 * hop) ** 0.5)
        self.dim = dim
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        """(B, T) -> (B, frames, dim)."""
        x = F.pad(audio[:, None, :], (self.hop // 2, self.hop // 2))
        h = F.conv1d(x, self.kernel.to(audio.dtype), stride=self.hop)
        return torch.tanh(4.0 * h).transpose(1, 2)

    def features(self, samples: np.ndarray) -> TeacherFeatures:
        out = self(torch.as_tensor(np.asarray(samples, dtype=np.float32))[None])[0]
        return TeacherFeatures(out.numpy(), self.frame_rate)


def path_hash(path) -> bytes:
    return hashlib.sha256(str(Path(path).resolve()).encode("utf-8")).digest()


def save_teacher_file(path, feats: TeacherFeatures, audio_path) -> None:
    """``HHCT | u16 version | 32-byte sha256(audio path) | f64 rate | u32 D | u32 T | f32 LE frames``."""
    frames = np.ascontiguousarray(feats.frames, dtype="<f4")
    header = (TEACHER_MAGIC + struct.pack("<H", TEACHER_VERSION) + path_hash(audio_path)
              + struct.pack("<dII", feats.frame_rate, frames.shape[1], frames.shape[0]))
    Path(path).write_bytes(header + frames.tobytes())


def load_teacher_file(path, audio_path=None) -> TeacherFeatures:
    data = Path(path).read_bytes()
    if data[:4] != TEACHER_MAGIC:
        raise DataError(f"{path}: bad teacher-feature magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != TEACHER_VERSION:
        raise DataError(f"{path}: teacher-feature version {version} != {TEACHER_VERSION}")
    digest = data[6:38]
    if audio_path is not None and digest != path_hash(audio_path):
        raise DataError(f"{path}: feature file was computed for a different audio path")
    rate, dim, n = struct.unpack_from("<dII", data, 38)
    off = 38 + 16
    if len(data) != off + 4 * dim * n:
        raise DataError(f"{path}: truncated teacher features")
    frames = np.frombuffer(data, "<f4", dim * n, off).reshape(n, dim).astype(np.float32)
    return TeacherFeatures(frames, rate)


def teacher_file_for(audio_path, feature_dir) -> Path:
    return Path(feature_dir) / (path_hash(audio_path).hex()[:32] + ".hhct")


class FileTeacher:
    """Teacher features precomputed per audio file and cached in memory."""

    def __init__(self, feature_dir):
        self.feature_dir = Path(feature_dir)
        self._cache: Dict[str, TeacherFeatures] = {}

    def __call__(self, audio_path) -> TeacherFeatures:
        key = str(Path(audio_path).resolve())
        if key not in self._cache:
            f = teacher_file_for(audio_path, self.feature_dir)
            if not f.is_file():
                raise DataError(f"no teacher features for {audio_path} (expected {f})")
            self._cache[key] = load_teacher_file(f, audio_path)
        return self._cache[key]

    def crop(self, audio_path, offset: int, length: int) -> np.ndarray:
        """Teacher frames covering samples ``[offset, offset + length)``."""
        feats = self(audio_path)
        start = offset / SAMPLE_RATE * feats.frame_rate
        stop = (offset + length) / SAMPLE_RATE * feats.frame_rate
        lo = int(np.floor(start))
        hi = max(lo + 2, int(np.ceil(stop)))
        out = feats.frames[lo:min(hi, feats.n_frames)]
        if out.shape[0] < 2:
            out = np.concatenate([out, np.repeat(out[-1:], 2 - out.shape[0], axis=0)])
        return out


class ExternalTeacher(FileTeacher):
    """Runs a user command ``<cmd> <in.wav> <out.npy>`` to obtain features.

    The command must write a float32 ``(frames, D)`` ``.npy`` array; results are
    stored in ``feature_dir`` in the teacher-feature container format.
    """

    def __init__(self, command: str, feature_dir, frame_rate: float = 50.0):
        super().__init__(feature_dir)
        self.command = command
        self.frame_rate = frame_rate

    def __call__(self, audio_path) -> TeacherFeatures:
        f = teacher_file_for(audio_path, self.feature_dir)
        if not f.is_file():
            self.feature_dir.mkdir(parents=True, exist_ok=True)
            with tempfile.TemporaryDirectory() as tmp:
                out = Path(tmp) / "feats.npy"
                cmd = shlex.split(self.command) + [str(audio_path), str(out)]
                res = subprocess.run(cmd, capture_output=True, text=True)
                if res.returncode != 0 or not out.is_file():
                    raise DataError(f"teacher command failed for {audio_path}: {res.stderr.strip()}")
                frames = np.load(out).astype(np.float32)
            save_teacher_file(f, TeacherFeatures(frames, self.frame_rate), audio_path)
        return super().__call__(audio_path)


def expected_teacher_frames(n_samples: int, frame_rate: float) -> int:
    return int(np.ceil(n_samples / SAMPLE_RATE * frame_rate))


def check_alignment(n_samples: int, feats: TeacherFeatures, hop: int = 1024,
                    tolerance: int = 2) -> Optional[str]:
    """Return a problem description, or ``None`` when lengths agree."""
    expected = expected_teacher_frames(n_samples, feats.frame_rate)
    if abs(feats.n_frames - expected) > tolerance:
        return (f"teacher has {feats.n_frames} frames, expected {expected} "
                f"at {feats.frame_rate:g} Hz for {n_samples} samples")
    return None
