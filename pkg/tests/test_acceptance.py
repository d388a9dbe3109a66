"""Acceptance suite: one pass/fail line per criterion, at stated tolerances.

The end-to-end scenarios run at reduced resolution (8 kHz audio, 64x64
spectrograms, 64x128 frames) and share one trained model across criteria.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from binauralgen.data import (
    FrameConfig,
    SynthSceneParams,
    load_binaural,
    make_synth_dataset,
    random_flip,
    synth_scene,
)
from binauralgen.dsp import (
    AudioConfig,
    BinauralClip,
    ComplexMask,
    ComplexSpectrogram,
    Waveform,
    apply_complex_mask,
    diff_spectrogram,
    envelope,
    istft,
    mix_mono,
    mono_spectrogram,
    stft,
)
from binauralgen.inference import (
    BundlePredictor,
    FrameTrack,
    GroundTruthPredictor,
    InferenceConfig,
    ZeroDifferencePredictor,
    binauralize,
    evaluate,
    saliency,
)
from binauralgen.losses import (
    CalibrationTask,
    LossWeights,
    calibrate_weights,
    loss_channels,
    loss_classification,
    loss_difference,
    loss_total,
)
from binauralgen.models import ModelBundle, NetConfig
from binauralgen.training import TrainConfig, train

CANONICAL_AUDIO = AudioConfig()

E2E_AUDIO = AudioConfig(sample_rate=8000, window_size=128, hop_length=80)
E2E_FRAMES = FrameConfig(height=64, width=128)
E2E_NET = NetConfig(
    freq_bins=64,
    time_frames=64,
    unet_depth=4,
    base_channels=16,
    visual_channels=64,
    attention_hidden_channels=16,
    visual_proj_channels=32,
    apnet_copies=2,
    apnet_channels=16,
    frame_height=64,
    frame_width=128,
)
E2E_EPOCHS = 160
E2E_SCENES = 200
E2E_SEED = 1234

GRAD_NET = NetConfig(
    freq_bins=64,
    time_frames=16,
    unet_depth=3,
    base_channels=8,
    visual_channels=16,
    attention_hidden_channels=8,
    visual_proj_channels=8,
    apnet_copies=2,
    apnet_channels=8,
    frame_height=32,
    frame_width=64,
)


def criterion(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# DSP suite
# ---------------------------------------------------------------------------

class TestDspSuite:
    def test_round_trip_100_signals(self):
        t0 = time.time()
        rng = np.random.default_rng(99)
        worst = 0.0
        for _ in range(100):
            w = Waveform(samples=rng.standard_normal(10080), sample_rate=16000)
            back = istft(stft(w, CANONICAL_AUDIO), length=10080)
            rel = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
            worst = max(worst, rel)
        criterion(
            "dsp/stft-istft-round-trip", worst < 1e-6,
            f"worst relative error {worst:.2e} over 100 signals "
            f"({time.time() - t0:.1f}s)",
        )

    def test_mask_laws(self):
        rng = np.random.default_rng(7)
        w = Waveform(samples=rng.standard_normal(10080), sample_rate=16000)
        S = stft(w, CANONICAL_AUDIO)
        identity = apply_complex_mask(S, ComplexMask(values=np.ones_like(S.values)))
        zero = apply_complex_mask(S, ComplexMask(values=np.zeros_like(S.values)))
        err_id = np.max(np.abs(identity.values - S.values))
        err_zero = np.max(np.abs(zero.values))
        criterion(
            "dsp/mask-identity-zero-laws", err_id < 1e-7 and err_zero < 1e-7,
            f"identity error {err_id:.2e}, zero error {err_zero:.2e}",
        )

    def test_reconstruction_identity(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(20):
            a = rng.standard_normal((257, 64)) + 1j * rng.standard_normal((257, 64))
            b = rng.standard_normal((257, 64)) + 1j * rng.standard_normal((257, 64))
            S_l = ComplexSpectrogram(values=a, config=CANONICAL_AUDIO)
            S_r = ComplexSpectrogram(values=b, config=CANONICAL_AUDIO)
            S_M = mono_spectrogram(S_l, S_r)
            S_D = diff_spectrogram(S_l, S_r)
            worst = max(
                worst,
                np.max(np.abs(S_M.values + S_D.values - a)),
                np.max(np.abs(S_M.values - S_D.values - b)),
            )
        criterion(
            "dsp/reconstruction-identity", worst < 1e-6,
            f"max |S_M +/- S_D - channel| = {worst:.2e}",
        )

    def test_envelope_sinusoid(self):
        t = np.arange(16000) / 16000
        w = Waveform(samples=0.7 * np.sin(2 * np.pi * 440 * t), sample_rate=16000)
        env = envelope(w)
        lo, hi = int(0.1 * len(env)), int(0.9 * len(env))
        dev = np.max(np.abs(env[lo:hi] - 0.7))
        criterion(
            "dsp/envelope-sinusoid", dev < 0.01,
            f"max interior deviation from 0.7 is {dev:.4f}",
        )


# ---------------------------------------------------------------------------
# Flip augmentation
# ---------------------------------------------------------------------------

class TestFlipAugmentation:
    def test_flip_rate_and_double_flip(self):
        l = Waveform(samples=np.array([1.0, 2.0]), sample_rate=16000)
        r = Waveform(samples=np.array([3.0, 4.0]), sample_rate=16000)
        clip = BinauralClip(left=l, right=r)
        rng = np.random.default_rng(123)
        flips = sum(1 - random_flip(clip, rng)[1] for _ in range(10000))
        rate = flips / 10000
        double = clip.swapped().swapped()
        exact = np.array_equal(double.left.samples, clip.left.samples) and np.array_equal(
            double.right.samples, clip.right.samples
        )
        criterion(
            "augmentation/flip-rate-and-involution",
            0.48 <= rate <= 0.52 and exact,
            f"flip rate {rate:.4f} over 10000 draws; double flip exact: {exact}",
        )


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

class TestGradientChecks:
    def test_finite_difference_each_subnetwork(self):
        t0 = time.time()
        torch.manual_seed(31)
        bundle = ModelBundle(GRAD_NET, E2E_AUDIO).double()
        g = torch.Generator().manual_seed(31)
        frames = torch.randn(2, 3, 32, 64, generator=g, dtype=torch.float64)
        mono = torch.randn(2, 2, 64, 16, generator=g, dtype=torch.float64)
        stacked = torch.randn(2, 4, 64, 16, generator=g, dtype=torch.float64)

        def loss_fn():
            f_v = bundle.visual_forward(frames)
            gen = bundle.forward_generation(mono, f_v)
            y = bundle.forward_classification(stacked, f_v)
            return (
                gen["pred_diff"].pow(2).sum()
                + gen["pred_left"].pow(2).sum()
                + gen["pred_right"].pow(2).sum()
                + y.sum()
            )

        probes = {
            "visual": next(p for p in bundle.visual.parameters() if p.dim() > 1),
            "attention": bundle.attention_generation.conv1.weight,
            "backbone": bundle.backbone.mask_head.weight,
            "apnet": bundle.apnet.head.weight,
            "discriminator": bundle.classifier.fc.weight,
        }
        worst_name, worst = "", 0.0
        for name, param in probes.items():
            bundle.zero_grad()
            loss_fn().backward()
            grad = param.grad.detach().clone()
            idx = torch.argmax(grad.abs())
            analytic = grad.flatten()[idx].item()
            flat = param.data.flatten()
            eps = 1e-5 * max(1.0, abs(flat[idx].item()))
            with torch.no_grad():
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            if rel > worst:
                worst_name, worst = name, rel
        criterion(
            "gradients/finite-difference-five-subnetworks", worst < 1e-3,
            f"worst relative error {worst:.2e} ({worst_name}); "
            f"{time.time() - t0:.1f}s",
        )


# ---------------------------------------------------------------------------
# Loss semantics
# ---------------------------------------------------------------------------

class TestLossSemantics:
    def test_zeros_at_ground_truth_and_weighted_sum(self):
        g = torch.Generator().manual_seed(5)
        x = torch.randn(2, 2, 8, 8, generator=g)
        l_d = float(loss_difference(x, x))
        l_c = float(loss_channels(x, x, x, x))
        l_cls = float(
            loss_classification(torch.tensor([0.0, 1.0]), torch.tensor([0.0, 1.0]))
        )
        total = loss_total(1.0, 1.0, 1.0, LossWeights(44.0, 44.0, 1.0))
        criterion(
            "losses/zero-at-ground-truth-and-total",
            l_d == 0.0 and l_c == 0.0 and l_cls <= 1e-6 and total == 89.0,
            f"L_D={l_d}, L_C={l_c}, L_cls={l_cls:.2e}, total(1,1,1;44,44,1)={total}",
        )

    def test_calibration_ratio(self):
        def linear_task(name, scale, seed):
            torch.manual_seed(seed)
            p = torch.nn.Parameter(torch.randn(16))
            return CalibrationTask(
                name=name,
                parameters=[p],
                shared_parameters=[p],
                loss_fn=lambda: scale * p.sum(),
            )

        weights = calibrate_weights(
            [linear_task("strong", 2.0, 0), linear_task("reference", 1.0, 1)],
            steps=8,
            reference="reference",
        )
        ratio = weights["strong"] / weights["reference"]
        criterion(
            "losses/calibration-two-to-one-gradients",
            abs(ratio - 0.5) <= 0.025,
            f"weight ratio {ratio:.4f} (expected 0.5 +/- 5%)",
        )


# ---------------------------------------------------------------------------
# 1-sample overfit
# ---------------------------------------------------------------------------

class TestOverfit:
    def test_single_sample_500_steps(self, tmp_path):
        t0 = time.time()
        rng = np.random.default_rng(0)
        record, _ = synth_scene(
            SynthSceneParams(azimuth=0.9, itd_max=0.0, image_size=64,
                             duration_seconds=0.63),
            tmp_path, E2E_AUDIO, rng,
        )
        torch.manual_seed(0)
        bundle = ModelBundle(E2E_NET, E2E_AUDIO)
        cfg = TrainConfig(batch_size=1, epochs=500, seed=0, validate_every=0)
        _, history = train(
            bundle, [record], None, E2E_AUDIO, E2E_FRAMES, cfg, LossWeights()
        )
        trace = [h["loss_total"] for h in history]
        ratio = trace[-1] / trace[0]
        criterion(
            "training/one-sample-overfit", ratio < 0.01,
            f"loss {trace[0]:.1f} -> {trace[-1]:.4f} "
            f"(ratio {ratio:.5f}) in 500 steps, {time.time() - t0:.0f}s",
        )
        # trainer invariant: smoothed loss never climbs by a visible fraction
        # of its starting value (flip randomness jitters the converged floor)
        ma = np.convolve(trace, np.ones(20) / 20, mode="valid")
        assert np.max(np.diff(ma), initial=0.0) / ma[0] < 1e-4


# ---------------------------------------------------------------------------
# End-to-end synthetic learning (shared trained model)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("e2e_scenes")
    records, azimuths, _ = make_synth_dataset(
        E2E_SCENES, data_dir, E2E_AUDIO, seed=E2E_SEED, image_size=64,
        duration_seconds=2.0,
    )
    n_test = E2E_SCENES // 5
    train_recs, test_recs = records[:-n_test], records[-n_test:]
    test_az = azimuths[-n_test:]

    torch.manual_seed(0)
    bundle = ModelBundle(E2E_NET, E2E_AUDIO)
    cfg = TrainConfig(batch_size=16, epochs=E2E_EPOCHS, seed=0, validate_every=0)
    t0 = time.time()
    bundle, history = train(
        bundle, train_recs, None, E2E_AUDIO, E2E_FRAMES, cfg, LossWeights()
    )
    train_seconds = time.time() - t0

    inf_cfg = InferenceConfig()
    predictor = BundlePredictor(bundle, E2E_FRAMES)
    model_report = evaluate(predictor, test_recs, E2E_AUDIO, inf_cfg, flip_draws=8)
    baseline_report = evaluate(
        ZeroDifferencePredictor(), test_recs, E2E_AUDIO,
        InferenceConfig(output_source="backbone_difference"),
    )
    return {
        "bundle": bundle,
        "predictor": predictor,
        "train_records": train_recs,
        "test_records": test_recs,
        "test_azimuths": test_az,
        "model_report": model_report,
        "baseline_report": baseline_report,
        "train_seconds": train_seconds,
        "inf_cfg": inf_cfg,
    }


class TestEndToEnd:
    def test_stft_beats_mono_copy(self, e2e):
        model = e2e["model_report"].mean_stft
        base = e2e["baseline_report"].mean_stft
        improvement = 1 - model / base
        criterion(
            "e2e/stft-beats-mono-copy-by-20pct", improvement >= 0.20,
            f"model {model:.3f} vs mono-copy {base:.3f} "
            f"({improvement * 100:.1f}% better; trained {E2E_EPOCHS} epochs "
            f"in {e2e['train_seconds']:.0f}s)",
        )

    def test_channel_energy_ordering_on_hard_panned(self, e2e):
        correct, total = 0, 0
        for record, azimuth in zip(e2e["test_records"], e2e["test_azimuths"]):
            if abs(azimuth) <= math.pi / 3:
                continue
            gt = load_binaural(record.audio_path, E2E_AUDIO.sample_rate)
            mono = mix_mono(gt.left, gt.right)
            out = binauralize(
                e2e["predictor"], mono, FrameTrack.from_record(record),
                E2E_AUDIO, e2e["inf_cfg"],
            )
            rms_l = float(np.sqrt(np.mean(out.left.samples**2)))
            rms_r = float(np.sqrt(np.mean(out.right.samples**2)))
            correct += int((rms_r > rms_l) == (azimuth > 0))
            total += 1
        rate = correct / total
        criterion(
            "e2e/channel-energy-ordering", rate >= 0.90,
            f"{correct}/{total} hard-panned clips ordered correctly ({rate:.2%})",
        )

    def test_flip_classifier_accuracy(self, e2e):
        acc = e2e["model_report"].accuracy
        criterion(
            "e2e/flip-classifier-accuracy", acc >= 0.95,
            f"held-out accuracy {acc:.3f} over "
            f"{8 * len(e2e['test_records'])} draws",
        )

    def test_saliency_tracks_blob_side(self, e2e):
        # post-training check of the visualization path (not a gate criterion)
        hits, total = 0, 0
        for record, azimuth in zip(e2e["test_records"], e2e["test_azimuths"]):
            if abs(azimuth) < 0.3:
                continue
            frame = FrameTrack.from_record(record).at(0.0)
            overlay = saliency(e2e["bundle"], frame, E2E_FRAMES)
            x_bright = np.unravel_index(
                np.argmax(overlay.sum(axis=2)), overlay.shape[:2]
            )[1]
            left_half = x_bright < overlay.shape[1] / 2
            hits += int(left_half == (azimuth < 0))
            total += 1
        assert total > 0
        print(f"saliency blob-side agreement: {hits}/{total}")
        assert hits / total >= 0.8


# ---------------------------------------------------------------------------
# Ablation ordering at desk scale
# ---------------------------------------------------------------------------

class TestAblationOrdering:
    def test_full_model_at_most_backbone_only(self, e2e):
        t0 = time.time()
        torch.manual_seed(0)
        backbone = ModelBundle(replace(E2E_NET, use_attention=False), E2E_AUDIO)
        cfg = TrainConfig(
            batch_size=16, epochs=E2E_EPOCHS, seed=0, validate_every=0,
            use_apnet=False, use_classification=False,
        )
        backbone, _ = train(
            backbone, e2e["train_records"], None, E2E_AUDIO, E2E_FRAMES,
            cfg, LossWeights(1.0, 0.0, 0.0),
        )
        backbone_report = evaluate(
            BundlePredictor(backbone, E2E_FRAMES), e2e["test_records"],
            E2E_AUDIO, InferenceConfig(output_source="backbone_difference"),
        )
        full_stft = e2e["model_report"].mean_stft
        backbone_stft = backbone_report.mean_stft
        criterion(
            "ablation/full-at-most-backbone-only",
            full_stft <= backbone_stft * 1.02,
            f"full {full_stft:.3f} vs backbone-only {backbone_stft:.3f} "
            f"(identical {E2E_EPOCHS}-epoch budget; extra {time.time() - t0:.0f}s)",
        )


# ---------------------------------------------------------------------------
# Plumbing identity
# ---------------------------------------------------------------------------

class TestPlumbingIdentity:
    def test_ground_truth_stub_reproduces_audio(self, tmp_path):
        rng = np.random.default_rng(17)
        record, _ = synth_scene(
            SynthSceneParams(azimuth=0.7, itd_max=0.0, image_size=32,
                             duration_seconds=2.0),
            tmp_path, E2E_AUDIO, rng,
        )
        gt = load_binaural(record.audio_path, E2E_AUDIO.sample_rate)
        mono = mix_mono(gt.left, gt.right)
        frames = FrameTrack.from_record(record)
        stub = GroundTruthPredictor(gt, E2E_AUDIO)
        out = binauralize(stub, mono, frames, E2E_AUDIO, InferenceConfig())
        rel_l = np.linalg.norm(out.left.samples - gt.left.samples) / np.linalg.norm(
            gt.left.samples
        )
        rel_r = np.linalg.norm(out.right.samples - gt.right.samples) / np.linalg.norm(
            gt.right.samples
        )
        report = evaluate(stub, [record], E2E_AUDIO, InferenceConfig())
        criterion(
            "plumbing/ground-truth-stub-identity",
            rel_l < 1e-5 and rel_r < 1e-5 and report.mean_stft < 1e-8
            and report.mean_env < 1e-8,
            f"waveform relative error ({rel_l:.2e}, {rel_r:.2e}); "
            f"evaluate distances ({report.mean_stft:.2e}, {report.mean_env:.2e})",
        )
