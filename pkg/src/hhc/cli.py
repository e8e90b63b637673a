"""``hhc`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
``HHC_RUN_DIR`` overrides the root under which run directories are created.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bitstream
from .audio import load_audio, load_corpus, read_manifest, save_wav
from .config import ABLATIONS, build_config, config_from_dict, load_config
from .errors import ConfigError, DataError, HHCError, MetricError

logger = logging.getLogger("hhc")

RUN_DIR_ENV = "HHC_RUN_DIR"


def _run_root(default: str = "runs") -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, default))


def _parse_ablations(values: Optional[List[str]]) -> tuple:
    out = []
    for v in values or []:
        out += [a.strip() for a in v.split(",") if a.strip()]
    return tuple(out)


def _parse_sets(values: Optional[List[str]]) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config_from_args(args):
    from .config import parse_config_text

    sets = _parse_sets(getattr(args, "set", None))
    extra = parse_config_text("\n".join(f"{k} = {v}" for k, v in sets.items()), "--set")
    if args.config:
        return load_config(args.config, _parse_ablations(args.ablation), **extra)
    extra.setdefault("profile", args.profile)
    return build_config(extra, _parse_ablations(args.ablation))


# --- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    from .trainer import RunLock, Trainer
    from . import checkpoint as ckpt

    if args.resume:
        run_dir = Path(args.resume)
        snap = run_dir / "config.txt"
        if not snap.is_file():
            raise DataError(f"cannot resume: no config snapshot in {run_dir}")
        cfg = load_config(snap)
    else:
        cfg = _config_from_args(args)
        if args.manifest:
            cfg = build_config({**_cfg_values(cfg), "manifest": str(Path(args.manifest).resolve())})
        name = args.name or time.strftime("run-%Y%m%d-%H%M%S")
        run_dir = Path(args.run_dir) if args.run_dir else _run_root() / name
    if not cfg.manifest:
        raise ConfigError("manifest: no training manifest given (config key or --manifest)")
    manifest = read_manifest(cfg.manifest, min_seconds=cfg.window_seconds / 4)
    if not manifest.entries:
        raise DataError(f"manifest {cfg.manifest} has no usable audio")
    ordered = manifest.ordered(cfg.seed)
    corpus = load_corpus(manifest, cfg.seed)
    with RunLock(run_dir):
        trainer = Trainer(cfg, corpus, paths=[e.path for e in ordered], run_dir=run_dir)
        if args.resume:
            latest = ckpt.latest_checkpoint(run_dir / "checkpoints")
            if latest is None:
                raise DataError(f"cannot resume: no checkpoint in {run_dir / 'checkpoints'}")
            trainer.load(latest)
        trainer.open_run_dir()
        if args.resume:
            trainer.log_event("resume", checkpoint=str(latest))
        try:
            if args.pretrain_only:
                trainer.pretrain_vocoder()
                trainer.save()
            else:
                trainer.run(on_step=_progress_printer(trainer, args.quiet))
        finally:
            trainer.close()
    print(f"run directory: {run_dir}")
    return 0


def _cfg_values(cfg) -> dict:
    from .config import config_to_dict

    d = config_to_dict(cfg)
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _progress_printer(trainer, quiet: bool):
    last_phase = [trainer.state.phase]

    def cb(rep):
        if trainer.state.phase != last_phase[0]:
            print(f"step {trainer.state.step}: phase switch {last_phase[0]} -> "
                  f"{trainer.state.phase} (ema mel {trainer.state.ema_mel_loss:.4f})", flush=True)
            last_phase[0] = trainer.state.phase
        if not quiet and rep.step % 50 == 0:
            print(f"step {rep.step} [{rep.phase}] mel {rep.mel:.4f} vq {rep.vq:.4f} "
                  f"distill {rep.distill:.4f} total {rep.total:.3f}", flush=True)
    return cb


def cmd_pretrain_vocoder(args) -> int:
    args.pretrain_only = True
    return cmd_train(args)


# --- encode / decode / export ----------------------------------------------------

def cmd_encode(args) -> int:
    from .codec import encode_file, load_model

    model = load_model(args.checkpoint)
    ts = encode_file(args.input, model)
    bitstream.write_hhc(args.output, ts)
    print(f"{args.output}: {len(ts)} tokens, K={ts.codebook_size}, "
          f"{bitstream.bits_per_token(ts.codebook_size)} bits/token")
    return 0


def cmd_decode(args) -> int:
    from .codec import decode_tokens, load_model

    model = load_model(args.checkpoint)
    ts = bitstream.read_hhc(args.input)
    save_wav(args.output, decode_tokens(ts, model))
    print(f"{args.output}: {ts.source_sample_count} samples")
    return 0


def cmd_export(args) -> int:
    from .codec import export_lm_corpus, load_model

    model = load_model(args.checkpoint)
    ids = export_lm_corpus(args.manifest, model, args.output)
    print(f"{args.output}: {len(ids)} utterances, vocabulary {model.codebook_size}")
    return 0


def cmd_export_codebook(args) -> int:
    from .codec import load_model
    from .quantize import export_codebook

    model = load_model(args.checkpoint)
    export_codebook(model.quantizer.layers[0], args.output)
    print(f"{args.output}: {model.codebook_size} codes")
    return 0


# --- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .codec import load_model, utterance_id
    from . import metrics

    model = load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if not manifest.entries:
        raise DataError(f"manifest {args.manifest} has no usable audio")
    emb_dir = Path(args.embeddings) if args.embeddings else None
    records = []
    for entry in sorted(manifest.entries, key=lambda e: str(e.path)):
        ref = load_audio(entry.path)
        rec = model.reconstruct(ref)
        uid = utterance_id(entry.path)
        r = {"utt_id": uid, "seconds": ref.duration,
             "mel_l1": metrics.mel_l1(ref, rec, model.spec_cfg)}
        try:
            r["stoi"] = metrics.stoi(ref, rec)
        except MetricError as exc:
            r["stoi"] = None
            r["stoi_error"] = str(exc)
        try:
            r["vuv_f1"] = metrics.vuv_f1(ref, rec)
        except MetricError as exc:
            r["vuv_f1"] = None
            r["vuv_error"] = str(exc)
        if emb_dir is not None:
            r["sim"] = _similarity(emb_dir, uid)
        records.append(r)
    out = Path(args.output) if args.output else _report_dir(args) / "eval.jsonl"
    line = bitstream.bandwidth_line(model.codebook_size)
    summary = metrics.write_report(out, records, {
        "bandwidth": line,
        "bandwidth_bps": bitstream.bandwidth(model.codebook_size)["steady_bps"],
        "variant": model.cfg.variant_tag,
        "codebook_size": model.codebook_size,
    })
    print(line)
    print(f"variant: {model.cfg.variant_tag}")
    for key, stats in summary["summary"].items():
        print(f"{key}: {stats['mean']:.4f} +- {stats['std']:.4f} (n={stats['n']})")
    print(f"report: {out}")
    return 0


def _similarity(emb_dir: Path, uid: str) -> Optional[float]:
    from . import metrics

    ref = next(iter(sorted(emb_dir.glob(f"{uid}.ref.*"))), None)
    rec = next(iter(sorted(emb_dir.glob(f"{uid}.rec.*"))), None)
    if ref is None or rec is None:
        return None
    return metrics.similarity(metrics.load_embedding(ref), metrics.load_embedding(rec))


def _report_dir(args) -> Path:
    p = Path(args.checkpoint)
    if p.is_dir():
        return p
    return p.parent.parent if p.parent.name == "checkpoints" else p.parent


# --- misc ------------------------------------------------------------------------

def cmd_bandwidth(args) -> int:
    info = bitstream.bandwidth(args.codebook_size, args.samples)
    print(bitstream.bandwidth_line(args.codebook_size))
    if args.json:
        print(json.dumps(info, sort_keys=True))
    return 0


def cmd_validate_teacher(args) -> int:
    from .distill import check_alignment, load_teacher_file, teacher_file_for

    manifest = read_manifest(args.manifest)
    problems = 0
    for entry in manifest.entries:
        f = teacher_file_for(entry.path, args.teacher_dir)
        if not f.is_file():
            print(f"{entry.path}: missing {f}")
            problems += 1
            continue
        feats = load_teacher_file(f, entry.path)
        n = int(round(entry.duration_seconds * 24000))
        msg = check_alignment(n, feats)
        if msg:
            print(f"{entry.path}: {msg}")
            problems += 1
    print(f"{len(manifest.entries) - problems}/{len(manifest.entries)} teacher files valid")
    if problems:
        raise DataError(f"{problems} teacher feature problem(s)")
    return 0


def cmd_make_fixture(args) -> int:
    from .fixtures import make_fixture_corpus

    m = make_fixture_corpus(args.output, n_clips=args.clips, seconds=args.seconds, seed=args.seed)
    print(f"manifest: {m}")
    return 0


def cmd_benchmark(args) -> int:
    from .benchmark import format_table, run_utilization

    sizes = [int(s) for s in args.sizes.split(",")]
    variants = [v.strip() for v in args.variants.split(",")]
    res = run_utilization(variants, sizes, n_steps=args.steps, seed=args.seed)
    print(format_table(res))
    return 0


def cmd_dump_mel(args) -> int:
    from . import dsp

    buf = load_audio(args.input)
    mel = dsp.mel_spectrogram(buf).frames.astype(np.float32)
    dsp.save_spectrogram(args.output, mel)
    print(f"{args.output}: {mel.shape[0]} frames x {mel.shape[1]} mel bands")
    return 0


# --- parser ----------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--profile", default="desk", choices=("desk", "full"),
                   help="defaults profile when no config file is given (default: desk)")
    p.add_argument("--manifest", help="training manifest (overrides the config key)")
    p.add_argument("--ablation", action="append", metavar="NAME",
                   help=f"ablation variant, repeatable or comma-separated: {', '.join(ABLATIONS)}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--run-dir", help="explicit run directory")
    p.add_argument("--name", help="run name under $HHC_RUN_DIR (default: timestamp)")
    p.add_argument("--resume", metavar="RUN_DIR", help="continue from the latest checkpoint")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hhc", description="Single-codebook speech codec")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="vocoder pretraining, warm-up, then fine-tuning")
    _add_config_args(p)
    p.set_defaults(func=cmd_train, pretrain_only=False)

    p = sub.add_parser("pretrain-vocoder", help="only fit the vocoder on ground-truth mels")
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain_vocoder)

    p = sub.add_parser("encode", help="audio file -> .hhc bitstream")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help=".hhc bitstream -> 16-bit WAV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="reconstruct a manifest and write a metric report")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", help="report path (default: <run dir>/eval.jsonl)")
    p.add_argument("--embeddings", help="directory of <utt>.ref.npy / <utt>.rec.npy speaker embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="tokenize a manifest into an LM corpus")
    p.add_argument("manifest")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("export-codebook", help="write the reparameterized layer-1 code table")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_codebook)

    p = sub.add_parser("bandwidth", help="token and bit rates for a codebook size")
    p.add_argument("--codebook-size", type=int, default=8192)
    p.add_argument("--samples", type=int, help="clip length in samples for payload accounting")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("validate-teacher", help="check teacher feature files against a manifest")
    p.add_argument("manifest")
    p.add_argument("teacher_dir")
    p.set_defaults(func=cmd_validate_teacher)

    p = sub.add_parser("make-fixture", help="write the synthetic single-speaker corpus")
    p.add_argument("output")
    p.add_argument("--clips", type=int, default=12)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("benchmark", help="codebook utilization on clustered embeddings")
    p.add_argument("--sizes", default="1024,2048,4096,8192,16384")
    p.add_argument("--variants", default="classic,single-slmvq,slmvq")
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("dump-mel", help="write the log-mel spectrogram of a WAV file")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_dump_mel)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HHCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
