"""File-level codec operations on a trained model: encode, decode, LM-corpus export."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

import torch

from . import checkpoint as ckpt
from .audio import AudioBuffer, DatasetManifest, load_audio, read_manifest
from .bitstream import TokenStream, write_lm_corpus
from .config import config_from_dict
from .errors import DataError
from .model import CodecModel


def load_model(path) -> CodecModel:
    """Rebuild the codec from a training checkpoint (or a run directory's latest one)."""
    path = Path(path)
    if path.is_dir():
        found = ckpt.latest_checkpoint(path / "checkpoints") or ckpt.latest_checkpoint(path)
        if found is None:
            raise DataError(f"no checkpoint in {path}")
        path = found
    payload = ckpt.load_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    model = CodecModel(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def encode_file(audio_path, model: CodecModel) -> TokenStream:
    return model.encode_tokens(load_audio(audio_path))


def decode_tokens(ts: TokenStream, model: CodecModel) -> AudioBuffer:
    return model.decode_tokens(ts)


def utterance_id(path) -> str:
    return Path(path).stem.replace(" ", "_")


def export_lm_corpus(manifest, model: CodecModel, out_path) -> List[str]:
    """Tokenize every manifest entry into a line-per-utterance corpus; returns the ids."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    records = []
    for entry in sorted(manifest.entries, key=lambda e: str(e.path)):
        records.append((utterance_id(entry.path), encode_file(entry.path, model).tokens.tolist()))
    ids = [r[0] for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate utterance ids in manifest (file stems must be unique)")
    write_lm_corpus(out_path, records, model.codebook_size)
    return ids
