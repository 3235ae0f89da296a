"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Criteria 7 and 8 train small models over five seeds and dominate the runtime.
"""

import dataclasses
import functools
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import norm

from conftest import micro_audio, micro_video
from mmer import checkpoint as ckpt_io
from mmer import train as train_mod
from mmer.acoustics import estimate_t60, sample_room, simulate_rir
from mmer.audio_encoder import AudioEncoder, AudioEncoderConfig
from mmer.config import load_config
from mmer.corpus import Manifest, read_clip, write_clip, generate_toy_corpus
from mmer.frontend import FrontendConfig, MelTensor, mask_positions, mel_center_frequencies, mel_spectrogram, read_melt, spec_augment, write_melt
from mmer.model import FusionConfig, MERModel, ModelConfig, fuse
from mmer.nncore import grad_check
from mmer.synth import MultiChannelAudio, measured_snr_db, mix_at_snr
from mmer.train import EarlyStopping, ExampleSet, TrainConfig, bootstrap_ci, build_examples, evaluate, train, warmup_lr
from mmer.video_encoder import VideoEncoder, VideoEncoderConfig

import test_nncore

RESULTS: dict[int, tuple[str, str]] = {}


def criterion(number: int, title: str):
    """Record the outcome of a criterion test and print its summary line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                RESULTS[number] = ("FAIL", f"{title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
                print(f"\ncriterion {number:2d} FAIL  {title}")
                raise
            line = f"{title} ({time.perf_counter() - t0:.1f} s){': ' + detail if detail else ''}"
            RESULTS[number] = ("PASS", line)
            print(f"\ncriterion {number:2d} PASS  {line}")

        return run

    return wrap


# -- 1 gradients ---------------------------------------------------------------


@criterion(1, "finite-difference gradients, layers < 1e-4, micro encoders < 1e-3")
def test_c01_gradients(monkeypatch):
    t0 = time.perf_counter()
    worst = 0.0
    for name, (fn, inputs) in sorted(test_nncore.LAYER_CASES.items()):
        f = fn if name == "cross_entropy" else test_nncore.weighted_sum(fn)
        report = grad_check(f, inputs, tol=1e-4, h=1e-5)
        assert report.passed, (name, report)
        worst = max(worst, report.max_rel_error)
    test_nncore.test_window_attention_gradients()
    test_nncore.test_swin_block_and_merge_gradients()

    enc = AudioEncoder(micro_audio(fusion_mode="sum_pe", channels=2, mel_bands=16, frames=16)).to(torch.float64)
    x = torch.randn(1, 2, 16, 16, dtype=torch.float64)
    w = torch.randn(enc.cfg.output_dim, dtype=torch.float64)
    audio = grad_check(lambda inp, *ps: (enc(inp) * w).sum(), [x] + list(enc.parameters()), tol=1e-3, h=1e-5, max_coords=8)
    assert audio.passed, audio

    # finite differences straddle ReLU kinks; a smooth stand-in checks the chain rule itself
    monkeypatch.setattr(torch, "relu", lambda t: torch.nn.functional.softplus(t, beta=4.0))
    venc = VideoEncoder(micro_video(frames_per_clip=4, resize=8, crop=8, embed_dim=6)).to(torch.float64)
    venc.stem[2] = torch.nn.Softplus(beta=4.0)
    v = torch.rand(1, 4, 3, 8, 8, dtype=torch.float64)
    wv = torch.randn(6, dtype=torch.float64)
    video = grad_check(lambda inp, *ps: (venc(inp) * wv).sum(), [v] + list(venc.parameters()), tol=1e-3, h=1e-5, max_coords=6)
    assert video.passed, video
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"{elapsed:.0f} s"
    return f"layers {worst:.1e}, audio {audio.max_rel_error:.1e}, video {video.max_rel_error:.1e}"


# -- 2 acoustics ---------------------------------------------------------------


@criterion(2, "RIR T60 within 20% for 0.5 and 0.85 s over 20 seeds; direct path < 1 sample")
def test_c02_acoustics():
    t0 = time.perf_counter()
    worst = 0.0
    for target in (0.5, 0.85):
        for seed in range(20):
            room = dataclasses.replace(sample_room(seed, 3), t60_s=target)
            rs = simulate_rir(room, 16000)
            for h in rs.rirs:
                err = abs(estimate_t60(h, 16000) - target) / target
                worst = max(worst, err)
                assert err <= 0.2, (target, seed, err)
            if target == 0.5:
                # raw image sum: the direct path is the first arrival and the strongest tap
                raw = simulate_rir(room, 16000, 0.6, absorption=0.99, max_order=0, highpass_hz=None)
                for mic, h in zip(room.mic_positions, raw.rirs):
                    d = math.dist(mic, room.source_pos)
                    assert abs(int(np.argmax(np.abs(h))) - 16000 * d / 343.0) < 1.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"{elapsed:.0f} s"
    return f"worst T60 error {100 * worst:.1f}%"


# -- 3 SNR ---------------------------------------------------------------------


@criterion(3, "mix_at_snr within 0.01 dB of 20 dB on 50 utterances")
def test_c03_snr():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(8000, 48000))
        t = np.arange(n) / 16000
        chans = [
            rng.uniform(0.05, 1.0) * np.sin(2 * np.pi * rng.uniform(100, 3000) * t) * (1 + 0.5 * np.sin(2 * np.pi * rng.uniform(1, 5) * t))
            + 0.05 * rng.standard_normal(n)
            for _ in range(3)
        ]
        clean = MultiChannelAudio(16000, np.stack(chans))
        mixed = mix_at_snr(clean, 20.0, rng_seed=i)
        for c in range(3):
            worst = max(worst, abs(measured_snr_db(clean.channels[c], mixed.channels[c]) - 20.0))
    assert worst <= 0.01
    return f"worst deviation {worst:.2e} dB"


# -- 4 fusion identities -------------------------------------------------------


@criterion(4, "avg_mel bit-equal to single; sum_pe = C x projection + C x bias")
def test_c04_fusion_identities():
    torch.manual_seed(0)
    cfg = dict(mel_bands=64, frames=256)
    single = AudioEncoder(AudioEncoderConfig(**cfg)).eval()
    x = torch.randn(2, 1, 64, 256)
    for c in (2, 3, 4):
        avg = AudioEncoder(AudioEncoderConfig(fusion_mode="avg_mel", channels=c, **cfg)).eval()
        avg.load_state_dict(single.state_dict())
        with torch.no_grad():
            assert torch.equal(avg(x.repeat(1, c, 1, 1)), single(x))
    worst = 0.0
    for c in (2, 3, 4):
        enc = AudioEncoder(AudioEncoderConfig(fusion_mode="sum_pe", channels=c, **cfg))
        with torch.no_grad():
            # the shared projection: per-bin input norm, then the patch convolution without its bias
            bias = enc.patch_embed.proj.bias
            proj = enc.patch_embed(enc.pad_input(enc.normalize(x))) - bias
            tokens = enc.channel_tokens(x.repeat(1, c, 1, 1))
        err = (tokens - (c * proj + c * bias)).abs().max().item()
        worst = max(worst, err)
        assert err <= 1e-5
    return f"sum_pe max error {worst:.1e}"


# -- 5 SpecAugment -------------------------------------------------------------


@criterion(5, "SpecAugment strips 4 x 64 frames and 2 x 8 bands, clamped on short inputs")
def test_c05_specaugment():
    for seed in range(50):
        times, freqs = mask_positions(256, 64, seed)
        assert len(times) == 4 and all(b - a == 64 and 0 <= a and b <= 256 for a, b in times)
        assert len(freqs) == 2 and all(b - a == 8 and 0 <= a and b <= 64 for a, b in freqs)
    for frames in (1, 10, 63, 64):
        times, freqs = mask_positions(frames, 64, 7)
        assert len(times) == 4 and all((a, b) == (0, frames) for a, b in times)
        mel = MelTensor(np.random.default_rng(frames).standard_normal((2, 64, frames)).astype(np.float32))
        out = spec_augment(mel, 7)
        assert out.data.shape == mel.data.shape
        for c in range(2):
            assert np.allclose(out.data[c], mel.data[c].mean())


# -- 6 shapes ------------------------------------------------------------------


@criterion(6, "grids 16x64 -> 8x32 -> 4x16 -> 2x8, embedding 768, fused 1536")
def test_c06_shapes():
    enc = AudioEncoder(AudioEncoderConfig(embed_dim=96, mel_bands=64, frames=256)).eval()
    with torch.no_grad():
        a = enc(torch.randn(2, 1, 64, 256))
    assert enc.last_grids == [(16, 64), (8, 32), (4, 16), (2, 8)]
    assert a.shape == (2, 768)
    venc = VideoEncoder(VideoEncoderConfig.full(resize=64, crop=48)).eval()
    with torch.no_grad():
        v = venc(torch.rand(2, 8, 3, 48, 48))
    assert v.shape == (2, 768)
    assert fuse(v, a).shape == (2, 1536)
    assert FusionConfig(audio_dim=768, video_dim=768).input_dim == 1536


# -- 7 toy learning ------------------------------------------------------------

TOY_SEEDS = range(5)
TOY_EPOCHS = 12


def _toy_run(manifest, mode, seed):
    cfg = load_config(preset="toy", overrides=[f"pipeline.seed={seed}", f"train.max_epochs={TOY_EPOCHS}"])
    mc, tc = cfg.model_config(mode=mode), cfg.train_config()
    sets = {s: build_examples(manifest, manifest.split(s), mc, tc) for s in ("train", "val", "test")}
    t0 = time.perf_counter()
    res = train(mc, sets["train"], sets["val"], tc, log_every_epoch=False)
    return evaluate(res.model, sets["test"]).accuracy, len(res.history), time.perf_counter() - t0


@criterion(7, "toy corpus: multimodal >= 95%, unimodal <= 60%, margin >= 30 points, 5 seeds")
def test_c07_toy_learning(tmp_path):
    torch.set_num_threads(1)
    rows = []
    for seed in TOY_SEEDS:
        manifest = generate_toy_corpus(tmp_path / f"toy{seed}", n_per_class=200, rng_seed=seed)
        mm, epochs, secs = _toy_run(manifest, "multimodal", seed)
        au, _, _ = _toy_run(manifest, "audio_only", seed)
        vi, _, _ = _toy_run(manifest, "video_only", seed)
        rows.append((seed, mm, au, vi))
        print(f"  seed {seed}: multimodal {mm:.3f} ({epochs} epochs, {secs:.0f} s) audio {au:.3f} video {vi:.3f}")
        assert epochs <= 30 and secs <= 600
    for seed, mm, au, vi in rows:
        assert mm >= 0.95, (seed, mm)
        assert au <= 0.60 and vi <= 0.60, (seed, au, vi)
        assert mm - max(au, vi) >= 0.30, (seed, mm, au, vi)
    return "multimodal " + " ".join(f"{r[1]:.3f}" for r in rows)


# -- 8 multi-channel gain -------------------------------------------------------

MC_MICS = 3
MC_COMB = 21
MC_AMP = 0.04


def _mc_clip(k, rng, t, centers):
    # a strong 150 Hz distractor hides a faint comb of mel-centre tones; the comb's offset is the label
    s = np.sin(2 * np.pi * 150 * t + rng.uniform(0, 2 * np.pi))
    for f in centers[20 + k + 2 * np.arange(MC_COMB)]:
        s = s + MC_AMP * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    noisy = mix_at_snr(MultiChannelAudio(16000, np.repeat(s[None], MC_MICS, 0)), -5.0, noise_coeff=0.0, rng_seed=int(rng.integers(2**63)))
    return mel_spectrogram(noisy).data


def _mc_task(seed, counts=(200, 50, 100)):
    t = np.arange(int(0.64 * 16000)) / 16000
    centers = mel_center_frequencies(FrontendConfig())
    rng = np.random.default_rng(seed)
    out = []
    for per in counts:
        x = np.stack([_mc_clip(k, rng, t, centers) for k in range(2) for _ in range(per)])
        out.append((x, np.repeat(np.arange(2), per)))
    return out


def _mc_examples(split, mode, name):
    x, y = split
    x = x[:, :1] if mode == "single" else x
    return ExampleSet([f"{name}{i}" for i in range(len(y))], y, mel=torch.from_numpy(np.ascontiguousarray(x)))


@criterion(8, "avg_mel (C=3) beats single channel at -5 dB in >= 4/5 seeds")
def test_c08_multichannel_gain():
    torch.set_num_threads(1)
    wins, rows = 0, []
    for seed in range(5):
        splits = _mc_task(seed)
        acc = {}
        for mode in ("single", "avg_mel"):
            mc = ModelConfig(
                AudioEncoderConfig.toy(frames=32, fusion_mode=mode, channels=1 if mode == "single" else MC_MICS),
                VideoEncoderConfig(),
                FusionConfig(hidden_dim=64, class_count=2, mode="audio_only"),
            )
            tc = TrainConfig(lr=3e-4, max_epochs=20, patience=8, warmup_steps=20, seed=seed, augment=False)
            sets = [_mc_examples(s, mode, n) for s, n in zip(splits, ("train", "val", "test"))]
            res = train(mc, sets[0], sets[1], tc, log_every_epoch=False)
            acc[mode] = evaluate(res.model, sets[2]).accuracy
        rows.append(acc)
        wins += acc["avg_mel"] > acc["single"]
        print(f"  seed {seed}: single {acc['single']:.3f} avg_mel {acc['avg_mel']:.3f}")
    assert wins >= 4, rows
    return f"{wins}/5 seeds"


# -- 9 bootstrap ---------------------------------------------------------------


@criterion(9, "bootstrap CI deterministic, degenerate (1, 1), width within 20% of normal oracle")
def test_c09_bootstrap():
    x = np.random.default_rng(0).random(180) < 0.8
    assert bootstrap_ci(x, seed=5) == bootstrap_ci(x, seed=5)
    assert bootstrap_ci(np.ones(180), seed=5) == (1.0, 1.0)
    oracle = 2 * norm.ppf(0.875) * math.sqrt(0.8 * 0.2 / 180)
    widths = []
    for seed in range(5):
        draw = np.random.default_rng(100 + seed).random(180) < 0.8
        low, high = bootstrap_ci(draw, seed=seed)
        widths.append(high - low)
    exact = np.zeros(180)
    exact[:144] = 1
    low, high = bootstrap_ci(exact)
    widths.append(high - low)
    for w in widths:
        assert abs(w - oracle) <= 0.2 * oracle, (w, oracle)
    return f"oracle {oracle:.4f}, widths {min(widths):.4f}-{max(widths):.4f}"


# -- 10 training loop -----------------------------------------------------------


def _tiny_sets():
    mel = torch.randn(4, 1, 32, 32)
    labels = np.array([0, 1, 0, 1])
    return ExampleSet(["a", "b", "c", "d"], labels, mel=mel), ExampleSet(["e", "f"], labels[:2], mel=mel[:2])


def _scripted_val(monkeypatch, losses):
    it = iter(losses)
    monkeypatch.setattr(train_mod, "run_inference", lambda model, ex, batch_size=64: (np.zeros((len(ex), 2)), next(it)))


@criterion(10, "early stop 12 epochs after last improvement; warm-up lr/2 at 250/500; max 500 epochs")
def test_c10_training_loop(monkeypatch):
    assert warmup_lr(250, 1e-3, 500) == pytest.approx(5e-4)
    assert warmup_lr(250, 3e-4, 500) == pytest.approx(1.5e-4)
    stopper = EarlyStopping(12)
    losses = [1.0 / e for e in range(1, 21)] + [0.05] * 100
    stop = next(e for e, v in enumerate(losses, start=1) if stopper.update(e, v))
    assert (stop, stopper.best_epoch) == (32, 20)

    cfg = ModelConfig(micro_audio(), VideoEncoderConfig(), FusionConfig(hidden_dim=8, class_count=2, mode="audio_only"))
    tr, va = _tiny_sets()
    # the real loop, driven by a scripted validation loss: last improvement at epoch 7
    _scripted_val(monkeypatch, [1.0 - 0.1 * e for e in range(7)] + [0.9] * 100)
    res = train(cfg, tr, va, TrainConfig(lr=1e-3, batch_size=4, max_epochs=500, patience=12, warmup_steps=500), False)
    assert (res.best_epoch, len(res.history)) == (7, 19)
    # a loss that always improves runs to the cap and no further
    _scripted_val(monkeypatch, [1.0 / e for e in range(1, 1000)])
    res = train(cfg, tr, va, TrainConfig(lr=1e-5, batch_size=4, max_epochs=500, patience=12, warmup_steps=500), False)
    assert len(res.history) == 500 and res.history[-1]["epoch"] == 500
    assert res.history[249]["lr"] == pytest.approx(5e-6)
    return "stop at 19 (best 7), cap 500"


# -- 11 round trips -------------------------------------------------------------


@criterion(11, "EMCK, MELT, PCLP and manifest survive write -> read -> write byte-identically")
def test_c11_round_trips(tmp_path, small_toy):
    cfg = ModelConfig(micro_audio(mel_bands=64), micro_video(), FusionConfig(hidden_dim=8, class_count=4))
    tr = build_examples(small_toy, small_toy.split("train"), cfg, TrainConfig())
    va = build_examples(small_toy, small_toy.split("val"), cfg, TrainConfig())
    res = train(cfg, tr, va, TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, patience=1, warmup_steps=1), False)
    ckpt_io.save(tmp_path / "a.emck", res.checkpoint)
    ckpt_io.save(tmp_path / "b.emck", ckpt_io.load(tmp_path / "a.emck"))
    assert (tmp_path / "a.emck").read_bytes() == (tmp_path / "b.emck").read_bytes()

    mel = mel_spectrogram(np.random.default_rng(0).standard_normal((3, 16000)))
    write_melt(tmp_path / "a.melt", mel)
    write_melt(tmp_path / "b.melt", read_melt(tmp_path / "a.melt"))
    assert (tmp_path / "a.melt").read_bytes() == (tmp_path / "b.melt").read_bytes()

    clip = read_clip(small_toy.resolve(small_toy.entries[0].video_clip_path))
    write_clip(tmp_path / "a.pclp", clip)
    write_clip(tmp_path / "b.pclp", read_clip(tmp_path / "a.pclp"))
    assert (tmp_path / "a.pclp").read_bytes() == (tmp_path / "b.pclp").read_bytes()

    small_toy.write(tmp_path / "a.jsonl")
    Manifest.read(tmp_path / "a.jsonl").write(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
