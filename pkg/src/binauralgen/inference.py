"""Full-clip binauralization, test-set evaluation, ablations, and saliency.

Long clips are processed as overlapping windows; each window's predicted
spectrograms are inverted and the overlapping waveforms averaged, so with
hop == window the result is exactly the concatenation of per-window
reconstructions.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import (
    ClipRecord,
    DatasetError,
    FrameConfig,
    load_binaural,
    preprocess_frame,
)
from .dsp import (
    AudioConfig,
    BinauralClip,
    ComplexSpectrogram,
    Waveform,
    diff_spectrogram,
    drop_lowest_bin,
    env_distance,
    istft,
    mix_mono,
    restore_lowest_bin,
    stft,
    stft_distance,
)
from .models import ModelBundle, spec_to_tensor, swap_stacked_channels, tensor_to_spec

OUTPUT_SOURCES = ("apnet_channels", "backbone_difference")


@dataclass(frozen=True)
class InferenceConfig:
    """Sliding-window settings for full-clip processing."""

    window_seconds: float = 0.63
    hop_seconds: float = 0.1
    overlap_combine: str = "average"
    output_source: str = "apnet_channels"

    def __post_init__(self):
        if self.hop_seconds > self.window_seconds:
            raise ValueError("hop must not exceed the window")
        if self.hop_seconds <= 0:
            raise ValueError("hop must be positive")
        if self.overlap_combine != "average":
            raise ValueError(f"unknown combine rule {self.overlap_combine!r}")
        if self.output_source not in OUTPUT_SOURCES:
            raise ValueError(
                f"output_source must be one of {OUTPUT_SOURCES}, "
                f"got {self.output_source!r}"
            )


@dataclass
class WindowPrediction:
    """Per-window outputs as full-bin spectrograms; diff may be absent."""

    left: ComplexSpectrogram | None
    right: ComplexSpectrogram | None
    diff: ComplexSpectrogram | None = None


class BundlePredictor:
    """Adapts a trained ModelBundle to the per-window prediction interface."""

    def __init__(self, bundle: ModelBundle, frame_cfg: FrameConfig, device: str = "cpu"):
        self.bundle = bundle.to(device).eval()
        self.frame_cfg = frame_cfg
        self.device = device

    def predict_window(
        self, mono_spec: ComplexSpectrogram, frame: np.ndarray, start: int
    ) -> WindowPrediction:
        cropped = drop_lowest_bin(mono_spec)
        mono_t = spec_to_tensor(cropped)[None].to(self.device)
        frame_t = torch.from_numpy(
            preprocess_frame(frame, self.frame_cfg).transpose(2, 0, 1).copy()
        )[None].to(self.device)
        with torch.no_grad():
            f_v = self.bundle.visual_forward(frame_t)
            gen = self.bundle.forward_generation(mono_t, f_v)
        cfg = mono_spec.config
        uncrop = lambda t: restore_lowest_bin(tensor_to_spec(t[0].cpu(), cfg))
        return WindowPrediction(
            left=uncrop(gen["pred_left"]),
            right=uncrop(gen["pred_right"]),
            diff=uncrop(gen["pred_diff"]),
        )


class GroundTruthPredictor:
    """Oracle stub emitting the true per-window spectrograms of a known clip."""

    def __init__(self, clip: BinauralClip, audio_cfg: AudioConfig):
        self.clip = clip
        self.audio_cfg = audio_cfg

    def predict_window(self, mono_spec, frame, start):
        n = mono_spec.values.shape[1] - 1
        n_win = n * self.audio_cfg.hop_length
        l = Waveform(
            samples=self.clip.left.samples[start : start + n_win],
            sample_rate=self.clip.sample_rate,
        )
        r = Waveform(
            samples=self.clip.right.samples[start : start + n_win],
            sample_rate=self.clip.sample_rate,
        )
        S_l = stft(l, self.audio_cfg)
        S_r = stft(r, self.audio_cfg)
        return WindowPrediction(left=S_l, right=S_r, diff=diff_spectrogram(S_l, S_r))


class ZeroDifferencePredictor:
    """Mono-copy baseline: predicts a zero difference (both channels = mono)."""

    def predict_window(self, mono_spec, frame, start):
        zero = ComplexSpectrogram(
            values=np.zeros_like(mono_spec.values), config=mono_spec.config
        )
        return WindowPrediction(left=mono_spec, right=mono_spec, diff=zero)


class FrameTrack:
    """Frames at a fixed rate starting at t=0, with nearest-frame lookup."""

    def __init__(self, frames: list[np.ndarray], frame_rate: float = 10.0):
        if not frames:
            raise ValueError("empty frame track")
        self.frames = frames
        self.frame_rate = frame_rate

    @classmethod
    def from_record(cls, record: ClipRecord) -> "FrameTrack":
        from .data import list_frame_files

        files = list_frame_files(record.video_path)
        return cls(
            [np.asarray(Image.open(f).convert("RGB")) for f in files],
            frame_rate=record.frame_rate,
        )

    def at(self, t: float) -> np.ndarray:
        idx = round(t * self.frame_rate)
        clipped = int(np.clip(idx, 0, len(self.frames) - 1))
        if abs(clipped / self.frame_rate - t) > 0.75 / self.frame_rate:
            warnings.warn(
                f"frame gap at t={t:.2f}s; falling back to nearest frame "
                f"({clipped / self.frame_rate:.2f}s)"
            )
        return self.frames[clipped]


def binauralize(
    predictor,
    mono: Waveform,
    frames: FrameTrack,
    audio_cfg: AudioConfig,
    inf_cfg: InferenceConfig,
) -> BinauralClip:
    """Convert a mono clip to binaural with sliding-window prediction.

    Windows slide by hop_seconds; overlapping reconstructions are averaged.
    The output has exactly the input's length.
    """
    n = len(mono)
    n_win = round(inf_cfg.window_seconds * audio_cfg.sample_rate)
    hop = max(1, round(inf_cfg.hop_seconds * audio_cfg.sample_rate))
    if n < n_win:
        raise ValueError(
            f"input of {n} samples is shorter than one {n_win}-sample window"
        )
    starts = list(range(0, n - n_win + 1, hop))
    if starts[-1] != n - n_win:
        starts.append(n - n_win)

    acc = {"left": np.zeros(n), "right": np.zeros(n)}
    counts = np.zeros(n)
    for start in starts:
        seg = Waveform(
            samples=mono.samples[start : start + n_win],
            sample_rate=mono.sample_rate,
        )
        S_m = stft(seg, audio_cfg)
        center_t = (start + n_win / 2) / audio_cfg.sample_rate
        pred = predictor.predict_window(S_m, frames.at(center_t), start)

        if inf_cfg.output_source == "backbone_difference":
            if pred.diff is None:
                raise ValueError("predictor emitted no difference spectrogram")
            S_l = ComplexSpectrogram(
                values=S_m.values + pred.diff.values, config=audio_cfg
            )
            S_r = ComplexSpectrogram(
                values=S_m.values - pred.diff.values, config=audio_cfg
            )
        else:
            if pred.left is None or pred.right is None:
                raise ValueError("predictor emitted no channel spectrograms")
            S_l, S_r = pred.left, pred.right

        acc["left"][start : start + n_win] += istft(S_l, length=n_win).samples
        acc["right"][start : start + n_win] += istft(S_r, length=n_win).samples
        counts[start : start + n_win] += 1

    counts = np.maximum(counts, 1)
    return BinauralClip(
        left=Waveform(samples=acc["left"] / counts, sample_rate=mono.sample_rate),
        right=Waveform(samples=acc["right"] / counts, sample_rate=mono.sample_rate),
    )


# ---------------------------------------------------------------------------
# Metrics reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipMetrics:
    clip_id: str
    stft_distance: float
    env_distance: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-clip distances with arithmetic-mean aggregates."""

    per_clip: tuple[ClipMetrics, ...]
    mean_stft: float
    mean_env: float
    accuracy: float | None = None
    skipped: tuple[str, ...] = ()

    @classmethod
    def from_clips(
        cls,
        clips: list[ClipMetrics],
        accuracy: float | None = None,
        skipped: tuple[str, ...] = (),
    ) -> "MetricsReport":
        if not clips:
            raise ValueError("no clips to aggregate")
        return cls(
            per_clip=tuple(clips),
            mean_stft=float(np.mean([c.stft_distance for c in clips])),
            mean_env=float(np.mean([c.env_distance for c in clips])),
            accuracy=accuracy,
            skipped=skipped,
        )

    def to_json(self, path: Path | str) -> None:
        payload = {
            "mean_stft": self.mean_stft,
            "mean_env": self.mean_env,
            "accuracy": self.accuracy,
            "skipped": list(self.skipped),
            "per_clip": [
                {
                    "clip_id": c.clip_id,
                    "stft_distance": c.stft_distance,
                    "env_distance": c.env_distance,
                }
                for c in self.per_clip
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["clip_id", "stft_distance", "env_distance"])
            for c in self.per_clip:
                writer.writerow([c.clip_id, c.stft_distance, c.env_distance])


def evaluate(
    predictor,
    records: list[ClipRecord],
    audio_cfg: AudioConfig,
    inf_cfg: InferenceConfig,
    seed: int = 0,
    flip_draws: int = 4,
) -> MetricsReport:
    """Full-clip metrics over a test set.

    Distances are computed per clip on full-length spectrograms/waveforms
    and averaged. Decode failures are skipped with a log entry. Classifier
    accuracy is reported when the predictor wraps a model bundle.
    """
    if not records:
        raise ValueError("test set is empty")
    clips: list[ClipMetrics] = []
    skipped: list[str] = []
    correct, draws = 0, 0
    for idx, record in enumerate(records):
        try:
            gt = load_binaural(record.audio_path, audio_cfg.sample_rate)
            frames = FrameTrack.from_record(record)
        except DatasetError as exc:
            warnings.warn(f"skipping {record.audio_path}: {exc}")
            skipped.append(str(record.audio_path))
            continue
        mono = mix_mono(gt.left, gt.right)
        out = binauralize(predictor, mono, frames, audio_cfg, inf_cfg)
        d_stft = stft_distance(
            stft(out.left, audio_cfg),
            stft(out.right, audio_cfg),
            stft(gt.left, audio_cfg),
            stft(gt.right, audio_cfg),
        )
        d_env = env_distance(out.left, out.right, gt.left, gt.right)
        clips.append(
            ClipMetrics(
                clip_id=record.audio_path.stem,
                stft_distance=d_stft,
                env_distance=d_env,
            )
        )
        if isinstance(predictor, BundlePredictor):
            c, d = _flip_accuracy_draws(
                predictor, gt, frames, audio_cfg, seed=(seed, idx), draws=flip_draws
            )
            correct += c
            draws += d
    if not clips:
        raise ValueError(f"every clip failed to decode: {skipped}")
    accuracy = correct / draws if draws else None
    return MetricsReport.from_clips(clips, accuracy=accuracy, skipped=tuple(skipped))


def _flip_accuracy_draws(predictor, gt, frames, audio_cfg, seed, draws):
    rng = np.random.default_rng(seed)
    n_seg = audio_cfg.segment_samples
    correct = 0
    bundle = predictor.bundle
    with torch.no_grad():
        for _ in range(draws):
            start = int(rng.integers(0, len(gt) - n_seg + 1))
            l = Waveform(
                samples=gt.left.samples[start : start + n_seg],
                sample_rate=gt.sample_rate,
            )
            r = Waveform(
                samples=gt.right.samples[start : start + n_seg],
                sample_rate=gt.sample_rate,
            )
            pair = torch.cat(
                [
                    spec_to_tensor(drop_lowest_bin(stft(l, audio_cfg))),
                    spec_to_tensor(drop_lowest_bin(stft(r, audio_cfg))),
                ]
            )[None].to(predictor.device)
            y = int(rng.random() < 0.5)
            if y == 0:
                pair = swap_stacked_channels(pair)
            center_t = (start + n_seg / 2) / audio_cfg.sample_rate
            frame_t = torch.from_numpy(
                preprocess_frame(frames.at(center_t), predictor.frame_cfg)
                .transpose(2, 0, 1)
                .copy()
            )[None].to(predictor.device)
            f_v = bundle.visual_forward(frame_t)
            y_hat = bundle.forward_classification(pair, f_v)
            correct += int((float(y_hat[0]) > 0.5) == bool(y))
    return correct, draws


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    "backbone_only",
    "apnet",
    "two_stage",
    "classify_generated",
    "multitask_unweighted_no_attention",
    "multitask_weighted_no_attention",
    "full",
)


@dataclass
class AblationConfig:
    """Shared data, seeds, and budgets for every ablation row."""

    net_cfg: object
    audio_cfg: AudioConfig
    frame_cfg: FrameConfig
    train_cfg: object
    weights: object
    inference_cfg: InferenceConfig
    train_records: list[ClipRecord]
    val_records: list[ClipRecord] | None
    test_records: list[ClipRecord]
    seed: int = 0
    rows: tuple[str, ...] = ABLATION_ROWS
    out_dir: Path | None = None


def _row_settings(row: str, base_train, base_weights, base_net):
    """Translate a row name into (net_cfg, train_cfg, weights, output_source)."""
    from .losses import LossWeights

    if row == "backbone_only":
        return (
            replace(base_net, use_attention=False),
            replace(base_train, use_apnet=False, use_classification=False),
            LossWeights(1.0, 0.0, 0.0),
            "backbone_difference",
        )
    if row == "apnet":
        return (
            replace(base_net, use_attention=False),
            replace(base_train, use_classification=False),
            LossWeights(1.0, 1.0, 0.0),
            "apnet_channels",
        )
    if row == "two_stage":
        return (
            replace(base_net, use_attention=False),
            base_train,
            base_weights,
            "apnet_channels",
        )
    if row == "classify_generated":
        return (
            replace(base_net, use_attention=False),
            replace(base_train, classify_generated=True),
            base_weights,
            "apnet_channels",
        )
    if row == "multitask_unweighted_no_attention":
        return (
            replace(base_net, use_attention=False),
            base_train,
            LossWeights(1.0, 1.0, 1.0),
            "apnet_channels",
        )
    if row == "multitask_weighted_no_attention":
        return (replace(base_net, use_attention=False), base_train, base_weights,
                "apnet_channels")
    if row == "full":
        return (base_net, base_train, base_weights, "apnet_channels")
    raise ValueError(f"unknown ablation row {row!r}")


def ablation_suite(cfg: AblationConfig) -> dict[str, MetricsReport]:
    """Train and evaluate every requested row on identical data and seeds.

    A row failure aborts the suite after saving the partial results.
    """
    from .models import ModelBundle
    from .training import train, two_stage_train

    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    results: dict[str, MetricsReport] = {}
    try:
        for row in cfg.rows:
            if row not in ABLATION_ROWS:
                raise ValueError(f"unknown ablation row {row!r}")
            net_cfg, train_cfg, weights, output_source = _row_settings(
                row, cfg.train_cfg, cfg.weights, cfg.net_cfg
            )
            train_cfg = replace(train_cfg, seed=cfg.seed)

            def factory():
                torch.manual_seed(cfg.seed)
                return ModelBundle(net_cfg, cfg.audio_cfg)

            row_dir = cfg.out_dir / row if cfg.out_dir else None
            if row == "two_stage":
                bundle, _ = two_stage_train(
                    factory, cfg.train_records, cfg.val_records,
                    cfg.audio_cfg, cfg.frame_cfg, train_cfg, weights,
                    out_dir=row_dir,
                )
            else:
                bundle, _ = train(
                    factory(), cfg.train_records, cfg.val_records,
                    cfg.audio_cfg, cfg.frame_cfg, train_cfg, weights,
                    out_dir=row_dir,
                )
            predictor = BundlePredictor(bundle, cfg.frame_cfg, train_cfg.device)
            report = evaluate(
                predictor, cfg.test_records, cfg.audio_cfg,
                replace(cfg.inference_cfg, output_source=output_source),
                seed=cfg.seed,
            )
            results[row] = report
            if cfg.out_dir:
                report.to_json(Path(cfg.out_dir) / f"{row}.json")
    except Exception:
        if cfg.out_dir and results:
            summary = {
                name: {"mean_stft": r.mean_stft, "mean_env": r.mean_env}
                for name, r in results.items()
            }
            Path(cfg.out_dir, "partial_results.json").write_text(
                json.dumps(summary, indent=2)
            )
        raise
    return results


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

def saliency(
    bundle: ModelBundle,
    frame: np.ndarray,
    frame_cfg: FrameConfig,
    alpha: float = 0.5,
    device: str = "cpu",
) -> np.ndarray:
    """Overlay the generation-task visual features on the input frame.

    The channel mean of the task features is min-max normalized (a constant
    map becomes 0.5), resized to the frame, and alpha-blended.
    """
    bundle = bundle.to(device).eval()
    frame_t = torch.from_numpy(
        preprocess_frame(frame, frame_cfg).transpose(2, 0, 1).copy()
    )[None].to(device)
    with torch.no_grad():
        f_v = bundle.visual_forward(frame_t)
        f_vb = bundle.select_features(f_v, "generation")
    heat = f_vb[0].mean(dim=0).cpu().numpy()
    span = heat.max() - heat.min()
    if span < 1e-12:
        heat = np.full_like(heat, 0.5)
    else:
        heat = (heat - heat.min()) / span
    heat_img = Image.fromarray((heat * 255).astype(np.uint8)).resize(
        (frame.shape[1], frame.shape[0]), Image.BILINEAR
    )
    heat_rgb = np.asarray(heat_img, dtype=np.float64)[..., None].repeat(3, axis=2)
    blended = (1 - alpha) * frame.astype(np.float64) + alpha * heat_rgb
    return np.clip(blended, 0, 255).astype(np.uint8)
