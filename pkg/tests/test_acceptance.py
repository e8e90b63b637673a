"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criterion 7 trains the desk configuration on the bundled fixture corpus and
takes tens of minutes on one CPU core; criterion 9 reuses its training log.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from hhc import checkpoint as ckpt
from hhc.adversary import discriminator_loss, feature_matching_loss, generator_adv_loss
from hhc.audio import load_corpus, read_manifest
from hhc.benchmark import run_utilization
from hhc.bitstream import TokenStream, bandwidth, bits_per_token, pack, unpack
from hhc.codec import load_model
from hhc.config import build_config
from hhc.distill import distill_loss
from hhc.errors import BitstreamError
from hhc.metrics import mel_l1, stoi, vuv_f1
from hhc.model import CodecModel
from hhc.quantize import ResidualQuantizer, quantize_layer, rotation_forward_backward, vq_loss
from hhc.trainer import FULL_FINETUNE, MEL_WARMUP, LossWeights, Trainer, combine, mel_loss

SIZES = (1024, 2048, 4096, 8192, 16384)


def _plane_rotation(e, q):
    e_hat = e / np.linalg.norm(e)
    q_hat = q / np.linalg.norm(q)
    cos = float(np.clip(e_hat @ q_hat, -1, 1))
    perp = q_hat - cos * e_hat
    if np.linalg.norm(perp) < 1e-12:
        return np.eye(len(e))
    u = perp / np.linalg.norm(perp)
    sin = math.sqrt(max(0.0, 1 - cos * cos))
    return (np.eye(len(e)) + sin * (np.outer(u, e_hat) - np.outer(e_hat, u))
            + (cos - 1) * (np.outer(e_hat, e_hat) + np.outer(u, u)))


# --- 1 ------------------------------------------------------------------------

def test_criterion_01_rate_arithmetic(criterion):
    with criterion(1, "rate arithmetic") as d:
        torch.manual_seed(0)
        model = CodecModel(build_config({"profile": "desk", "K_codes": 8192})).eval()
        rng = np.random.default_rng(0)
        with torch.no_grad():
            model.init_quantizer(torch.from_numpy(rng.standard_normal((2, 24576)).astype(np.float32)))
        for i in range(5):
            clip = (0.3 * rng.standard_normal(24000)).astype(np.float32)
            ts = model.encode_tokens(clip)
            assert len(ts) == 24 and ts.codebook_size == 8192
            assert len(pack(ts)) - 26 == math.ceil(24 * 13 / 8)
        b = bandwidth(8192, 24000)
        assert b["steady_bps"] == 304.6875 and b["payload_bps"] == 312
        for seconds in (10, 60, 600):
            n = seconds * 24000
            bits = (len(pack(TokenStream(np.zeros(math.ceil(n / 1024), np.int64), 8192, n))) - 26) * 8
            slack = (bits_per_token(8192) + 7) / seconds
            assert abs(bits / seconds - 304.6875) <= slack
        d["steady_bps"] = b["steady_bps"]
        d["padded_bps"] = b["padded_bps"]


# --- 2 ------------------------------------------------------------------------

def test_criterion_02_quantizer_correctness(criterion):
    with criterion(2, "nearest-neighbour and VQ loss oracles") as d:
        rng = np.random.default_rng(2)
        for _ in range(1000):
            k = int(rng.integers(1, 65))
            dim = int(rng.integers(1, 9))
            book = rng.standard_normal((k, dim))
            x = rng.standard_normal((int(rng.integers(1, 9)), dim))
            codes, vecs = quantize_layer(x, book)
            for xi, c in zip(x, codes):
                dists = [float(np.sum((xi - b) ** 2)) for b in book]
                assert c == dists.index(min(dists))
            t = vq_loss(torch.from_numpy(x), torch.from_numpy(vecs))
            s = float(np.sum((x - vecs) ** 2)) / x.size
            assert math.isclose(float(t.codebook_term), s, rel_tol=1e-6, abs_tol=1e-15)
            assert math.isclose(float(t.commitment_term), s, rel_tol=1e-6, abs_tol=1e-15)
        d["instances"] = 1000


# --- 3 ------------------------------------------------------------------------

def test_criterion_03_rotation_gradient(criterion):
    with criterion(3, "rotation-trick gradient vs finite differences") as d:
        rng = np.random.default_rng(3)
        worst = 0.0
        cases = [(np.ones(512), np.ones(512)), (np.eye(2)[0], np.array([0.0, 2.0]))]
        cases += [(rng.standard_normal(512), rng.standard_normal(512) * rng.uniform(0.2, 3))
                  for _ in range(100)]
        for e, q in cases:
            g = rng.standard_normal(e.size)
            out, transform, fb = rotation_forward_backward(e, q)
            assert not fb and np.array_equal(out, q)
            R = _plane_rotation(e, q)
            scale = np.linalg.norm(q) / np.linalg.norm(e)
            h = 1e-6
            fd = np.array([(g @ (scale * R @ (e + h * u)) - g @ (scale * R @ (e - h * u))) / (2 * h)
                           for u in np.eye(e.size)])
            err = np.linalg.norm(transform(g) - fd) / np.linalg.norm(fd)
            worst = max(worst, err)
            assert err <= 1e-5
        _, transform, _ = rotation_forward_backward([1.0, 0.0], [0.0, 2.0])
        assert np.allclose(transform([0.0, 1.0]), [2.0, 0.0], atol=1e-12)
        _, transform, fb = rotation_forward_backward([1.0, 2.0, 3.0], [-2.0, -4.0, -6.0])
        assert fb and np.allclose(transform([1.0, -1.0, 0.5]), [1.0, -1.0, 0.5])
        d["pairs"] = len(cases)
        d["max_rel_err"] = f"{worst:.2e}"


# --- 4 ------------------------------------------------------------------------

TINY = dict(profile="desk", base_channels=4, latent_dim=32, n_convnext_blocks=1,
            n_attn_layers_dec=1, n_attn_layers_enc=0, decoder_channels=32, vocoder_channels=8,
            K_codes=1024, teacher_dim=16, batch_size=2, window_seconds=0.5,
            vocoder_pretrain_steps=0, phase1_max_steps=10_000, phase_threshold=0.0)


def test_criterion_04_frozen_codebook_and_routing(criterion, fixture_corpus):
    with criterion(4, "frozen codebook and stop-gradient routing") as d:
        tr = Trainer(build_config(TINY), fixture_corpus)
        tr._ensure_initialized()
        layers = tr.model.quantizer.layers
        books = [l.codebook.clone() for l in layers]
        reparam = [l.reparam[0].weight.clone() for l in layers]
        for step in range(200):
            tr.training_step(*tr.batch(step))
        assert tr.state.step == 200
        assert all(torch.equal(b, l.codebook) for b, l in zip(books, layers))
        assert any(not torch.equal(r, l.reparam[0].weight) for r, l in zip(reparam, layers))

        audio, _ = tr.batch(999)
        enc_params = list(tr.model.encoder.parameters())
        rep_params = [p for l in layers for p in l.reparam.parameters()]
        e = tr.model.encoder(audio)
        out = tr.model.quantizer(e)
        g_enc = torch.autograd.grad(out.terms.codebook_term, enc_params, retain_graph=True,
                                    allow_unused=True)
        g_rep = torch.autograd.grad(out.terms.codebook_term, rep_params, retain_graph=True,
                                    allow_unused=True)
        assert all(g is None or g.abs().max() == 0 for g in g_enc)
        assert any(g is not None and g.abs().max() > 0 for g in g_rep)
        g_enc = torch.autograd.grad(out.terms.commitment_term, enc_params, retain_graph=True,
                                    allow_unused=True)
        g_rep = torch.autograd.grad(out.terms.commitment_term, rep_params, allow_unused=True)
        assert all(g is None or g.abs().max() == 0 for g in g_rep)
        assert any(g is not None and g.abs().max() > 0 for g in g_enc)
        d["steps"] = 200


# --- 5 ------------------------------------------------------------------------

def test_criterion_05_utilization_trend(criterion):
    with criterion(5, "codebook utilization trend") as d:
        t0 = time.time()
        classic = run_utilization(["classic"], SIZES)
        slm = run_utilization(["slmvq"], [8192])
        u = [classic[("classic", k)].utilization for k in SIZES]
        s = slm[("slmvq", 8192)].utilization
        d["classic"] = "/".join(f"{100 * v:.1f}" for v in u)
        d["slmvq@8192"] = f"{100 * s:.1f}"
        d["minutes"] = f"{(time.time() - t0) / 60:.1f}"
        assert s - u[SIZES.index(8192)] >= 0.20
        assert all(a > b for a, b in zip(u, u[1:]))


# --- 6 ------------------------------------------------------------------------

def test_criterion_06_distillation_bounds(criterion):
    with criterion(6, "distillation loss anchors and bounds") as d:
        lo, hi = math.log1p(math.exp(-1)), math.log1p(math.exp(1))
        rng = np.random.default_rng(6)
        for _ in range(200):
            t, dim = int(rng.integers(2, 30)), int(rng.integers(1, 40))
            a = torch.from_numpy(rng.standard_normal((t, dim)))
            b = torch.from_numpy(rng.standard_normal((t, dim)))
            assert math.isclose(float(distill_loss(a, a)), lo, rel_tol=1e-12)
            assert math.isclose(float(distill_loss(a, -a)), hi, rel_tol=1e-12)
            assert lo < float(distill_loss(a, b)) < hi
        d["identical"] = f"{lo:.5f}"
        d["negated"] = f"{hi:.5f}"


# --- 7 and 9 share one desk training run -----------------------------------

@pytest.fixture(scope="module")
def desk_run(fixture_manifest, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("desk") / "run"
    cfg = build_config({"profile": "desk", "manifest": str(fixture_manifest),
                        "target_mel_l1": 0.6})
    manifest = read_manifest(cfg.manifest)
    corpus = load_corpus(manifest, cfg.seed)
    tr = Trainer(cfg, corpus, paths=[e.path for e in manifest.ordered(cfg.seed)], run_dir=run_dir)
    tr.open_run_dir()
    t0 = time.time()
    try:
        state = tr.run()
    finally:
        tr.close()
    return dict(run_dir=run_dir, state=state, corpus=corpus, cfg=cfg, trainer=tr,
                seconds=time.time() - t0)


def _log(run_dir):
    return [json.loads(l) for l in (run_dir / "log.jsonl").read_text().splitlines()]


def test_criterion_07_progressive_overfit(criterion, desk_run):
    with criterion(7, "progressive training overfit on the fixture") as d:
        lines = _log(desk_run["run_dir"])
        switches = [l for l in lines if l.get("event") == "phase_switch"]
        assert len(switches) == 1 and switches[0]["reason"] == "threshold"
        switch_step = switches[0]["step"]
        assert switch_step <= 2000
        phases = [l["phase"] for l in lines if "event" not in l]
        assert phases == sorted(phases, key=[MEL_WARMUP, FULL_FINETUNE].index)
        state = desk_run["state"]
        assert state.step - switch_step <= 5000
        model = load_model(ckpt.latest_checkpoint(desk_run["run_dir"] / "checkpoints"))
        vals = [mel_l1(buf, model.reconstruct(buf), model.spec_cfg) for buf in desk_run["corpus"]]
        final = float(np.mean(vals))
        d["switch_step"] = switch_step
        d["phase2_steps"] = state.step - switch_step
        d["mel_l1"] = f"{final:.3f}"
        d["minutes"] = f"{desk_run['seconds'] / 60:.1f}"
        assert final < 0.6
        assert desk_run["seconds"] <= 2 * 3600


# --- 8 ------------------------------------------------------------------------

def test_criterion_08_bitstream_roundtrip(criterion):
    with criterion(8, "bitstream round-trip and parse errors") as d:
        rng = np.random.default_rng(8)
        detected = 0
        for i in range(10_000):
            k = int(rng.choice(SIZES))
            count = int(rng.integers(0, 100))
            n = max(0, count * 1024 - int(rng.integers(0, 1024))) if count else 0
            ts = TokenStream(rng.integers(0, k, math.ceil(n / 1024)), k, n)
            raw = pack(ts)
            back = unpack(raw)
            assert np.array_equal(back.tokens, ts.tokens) and back.source_sample_count == n
            if i % 10 == 0:
                bad = [raw[:int(rng.integers(0, len(raw)))], raw + b"\x00",
                       bytes([raw[0] ^ 0x20]) + raw[1:], raw[:4] + b"\x00\x09" + raw[6:]]
                for blob in bad:
                    with pytest.raises(BitstreamError):
                        unpack(blob)
                    detected += 1
        d["streams"] = 10_000
        d["corruptions_detected"] = detected


# --- 9 ------------------------------------------------------------------------

def test_criterion_09_loss_oracles(criterion, desk_run):
    with criterion(9, "loss formula oracles and logged decomposition") as d:
        rng = np.random.default_rng(9)
        w = LossWeights()
        for _ in range(200):
            a, b, c = (rng.standard_normal((3, 5)) for _ in range(3))
            exp = sum(abs(a[i, j] - b[i, j]) + abs(a[i, j] - c[i, j])
                      for i in range(3) for j in range(5)) / 15
            got = float(mel_loss(*(torch.from_numpy(x) for x in (a, b, c))))
            assert math.isclose(got, exp, rel_tol=1e-6)
            heads = int(rng.integers(1, 5))
            real = [rng.standard_normal(int(rng.integers(1, 7))) for _ in range(heads)]
            fake = [rng.standard_normal(r.size) for r in real]
            exp_d = sum(np.mean([max(0.0, 1 - v) for v in r]) + np.mean([max(0.0, 1 + v) for v in f])
                        for r, f in zip(real, fake)) / heads
            exp_g = sum(np.mean([max(0.0, 1 - v) for v in f]) for f in fake) / heads
            tt = lambda xs: [torch.from_numpy(x) for x in xs]
            assert math.isclose(float(discriminator_loss(tt(real), tt(fake))), exp_d, rel_tol=1e-6,
                                abs_tol=1e-12)
            assert math.isclose(float(generator_adv_loss(tt(fake))), exp_g, rel_tol=1e-6,
                                abs_tol=1e-12)
            fr = [[rng.standard_normal(4) for _ in range(3)] for _ in range(heads)]
            ff = [[rng.standard_normal(4) for _ in range(3)] for _ in range(heads)]
            exp_f = np.mean([np.mean(np.abs(x - y)) / np.mean(np.abs(x))
                             for hx, hy in zip(fr, ff) for x, y in zip(hx, hy)])
            got_f = float(feature_matching_loss([tt(x) for x in fr], [tt(x) for x in ff]))
            assert math.isclose(got_f, exp_f, rel_tol=1e-6)
            parts = rng.uniform(0, 3, 6)
            exp_t = (w.lambda_rec * (parts[2] + w.mel_scale * parts[0] + parts[1])
                     + w.lambda_D * parts[5] + w.lambda_distill * parts[4] + w.lambda_vq * parts[3])
            assert math.isclose(combine(w, *parts), exp_t, rel_tol=1e-6)
        steps = [l for l in _log(desk_run["run_dir"]) if "event" not in l]
        assert steps
        for s in steps:
            exp = (w.lambda_rec * (s["feat"] + w.mel_scale * s["mel"] + s["adv_g"])
                   + w.lambda_D * s["disc"] + w.lambda_distill * s["distill"]
                   + w.lambda_vq * s["vq"])
            assert math.isclose(s["total"], exp, rel_tol=1e-6), s
        d["logged_steps"] = len(steps)


# --- 10 -----------------------------------------------------------------------

def test_criterion_10_metric_sanity(criterion, fixture_corpus):
    with criterion(10, "STOI and V/UV sanity") as d:
        worst = 1.0
        for buf in fixture_corpus[:4]:
            x = buf.samples.astype(np.float64)
            s = stoi(x, x)
            worst = min(worst, s)
            assert s >= 0.99
            assert vuv_f1(x, x) == 1.0
        x = fixture_corpus[0].samples.astype(np.float64)
        noise = np.random.default_rng(10).standard_normal(x.size)
        noise *= np.sqrt(np.mean(x ** 2) / np.mean(noise ** 2))
        snrs = (40, 30, 20, 10, 5, 0, -5, -10, -20)
        scores = [stoi(x, x + noise * 10 ** (-snr / 20)) for snr in snrs]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        d["stoi_self_min"] = f"{worst:.4f}"
        d["sweep"] = "/".join(f"{v:.2f}" for v in scores)
