"""Joint optimization of the generation and classification tasks.

One optimizer with two parameter groups: the visual, attention, and
classifier nets learn at the slow rate; the backbone, pyramid, and binaural
encoder learn at the fast rate.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import ClipRecord, FrameConfig, make_scene_sample
from .dsp import AudioConfig
from .losses import (
    LossWeights,
    loss_channels,
    loss_classification,
    loss_difference,
    loss_total,
)
from .models import ModelBundle, save_checkpoint, spec_to_tensor, swap_stacked_channels


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the canonical run uses batch 16, rates
    1e-4/1e-3, and 1000 epochs."""

    batch_size: int = 16
    epochs: int = 1000
    lr_slow: float = 0.0001
    lr_fast: float = 0.001
    seed: int = 0
    device: str = "cpu"
    checkpoint_every: int = 0
    validate_every: int = 1
    use_apnet: bool = True
    use_classification: bool = True
    classify_generated: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_slow <= 0 or self.lr_fast <= 0:
            raise ValueError("learning rates must be positive")


def build_batch(
    records: list[ClipRecord],
    indices_or_size,
    audio_cfg: AudioConfig,
    frame_cfg: FrameConfig,
    rng: np.random.Generator,
    device: str = "cpu",
) -> dict[str, torch.Tensor]:
    """Assemble one training batch of frequency-domain tensors.

    indices_or_size may be an explicit index sequence or a batch size to be
    drawn uniformly with replacement.
    """
    if isinstance(indices_or_size, int):
        indices = rng.integers(0, len(records), size=indices_or_size)
    else:
        indices = indices_or_size
    samples = [
        make_scene_sample(records[int(i)], audio_cfg, frame_cfg, rng)
        for i in indices
    ]
    frames = torch.stack(
        [torch.from_numpy(s.frame.transpose(2, 0, 1).copy()) for s in samples]
    )
    mono = torch.stack([spec_to_tensor(s.mono_spec) for s in samples])
    gt_left = torch.stack([spec_to_tensor(s.gt_left_spec) for s in samples])
    gt_right = torch.stack([spec_to_tensor(s.gt_right_spec) for s in samples])
    stacked = torch.stack(
        [
            torch.cat(
                [
                    spec_to_tensor(s.flipped_left_spec),
                    spec_to_tensor(s.flipped_right_spec),
                ]
            )
            for s in samples
        ]
    )
    labels = torch.tensor([s.flip_indicator for s in samples], dtype=torch.float32)
    batch = {
        "frames": frames,
        "mono": mono,
        "gt_left": gt_left,
        "gt_right": gt_right,
        "gt_diff": (gt_left - gt_right) / 2.0,
        "stacked": stacked,
        "labels": labels,
    }
    return {k: v.to(device) for k, v in batch.items()}


def make_optimizer(bundle: ModelBundle, cfg: TrainConfig) -> torch.optim.Adam:
    groups = bundle.parameter_groups()
    return torch.optim.Adam(
        [
            {"params": groups["slow"], "lr": cfg.lr_slow},
            {"params": groups["fast"], "lr": cfg.lr_fast},
        ]
    )


def _step_losses(
    bundle: ModelBundle,
    batch: dict[str, torch.Tensor],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict[str, torch.Tensor]:
    f_v = bundle.visual_forward(batch["frames"])
    gen = bundle.forward_generation(batch["mono"], f_v)
    l_diff = loss_difference(gen["pred_diff"], batch["gt_diff"])

    l_chan = torch.zeros((), device=l_diff.device)
    if cfg.use_apnet:
        l_chan = loss_channels(
            gen["pred_left"], gen["pred_right"],
            batch["gt_left"], batch["gt_right"],
        )

    l_cls = torch.zeros((), device=l_diff.device)
    if cfg.use_classification:
        if cfg.classify_generated:
            generated = torch.cat([gen["pred_left"], gen["pred_right"]], dim=1)
            swap = torch.from_numpy(
                rng.random(generated.shape[0]) < 0.5
            ).to(generated.device)
            stacked = torch.where(
                swap[:, None, None, None],
                swap_stacked_channels(generated),
                generated,
            )
            labels = (~swap).float()
        else:
            stacked = batch["stacked"]
            labels = batch["labels"]
        y_hat = bundle.forward_classification(stacked, f_v)
        l_cls = loss_classification(y_hat, labels)
    return {"difference": l_diff, "channel": l_chan, "classification": l_cls}


def train(
    bundle: ModelBundle,
    train_records: list[ClipRecord],
    val_records: list[ClipRecord] | None,
    audio_cfg: AudioConfig,
    frame_cfg: FrameConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    out_dir: Path | str | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Optimize both tasks jointly; returns the bundle and per-epoch history.

    When out_dir is given, the best-validation model (by STFT distance) and
    the loss history CSV are written there. A non-finite loss aborts with a
    reference to the last good checkpoint.
    """
    if not train_records:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    bundle.to(cfg.device)
    bundle.train()
    optimizer = make_optimizer(bundle, cfg)
    steps_per_epoch = max(1, len(train_records) // cfg.batch_size)

    history: list[dict] = []
    best_stft = math.inf
    best_path = out_dir / "best.pt" if out_dir is not None else None
    last_checkpoint: Path | None = None

    for epoch in range(cfg.epochs):
        if len(train_records) >= cfg.batch_size:
            order = rng.permutation(len(train_records))
        else:
            order = rng.integers(0, len(train_records), size=cfg.batch_size)
        sums = {"difference": 0.0, "channel": 0.0, "classification": 0.0, "total": 0.0}
        for step in range(steps_per_epoch):
            indices = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if len(indices) < cfg.batch_size:
                indices = rng.integers(0, len(train_records), size=cfg.batch_size)
            batch = build_batch(
                train_records, indices, audio_cfg, frame_cfg, rng, cfg.device
            )
            optimizer.zero_grad()
            losses = _step_losses(bundle, batch, cfg, rng)
            total = loss_total(
                losses["difference"], losses["channel"],
                losses["classification"], weights,
            )
            if not torch.isfinite(total):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"last good checkpoint: {last_checkpoint}",
                    last_checkpoint=last_checkpoint,
                )
            total.backward()
            optimizer.step()
            for key in ("difference", "channel", "classification"):
                sums[key] += float(losses[key].detach())
            sums["total"] += float(total.detach())

        row = {
            "epoch": epoch,
            "loss_difference": sums["difference"] / steps_per_epoch,
            "loss_channel": sums["channel"] / steps_per_epoch,
            "loss_classification": sums["classification"] / steps_per_epoch,
            "loss_total": sums["total"] / steps_per_epoch,
            "val_stft": "",
            "val_env": "",
            "val_accuracy": "",
        }

        if val_records and cfg.validate_every and (epoch + 1) % cfg.validate_every == 0:
            report = validate(
                bundle, val_records, audio_cfg, frame_cfg,
                seed=cfg.seed,
                output_source="apnet_channels" if cfg.use_apnet else "backbone_difference",
                device=cfg.device,
            )
            bundle.train()
            row["val_stft"] = report.mean_stft
            row["val_env"] = report.mean_env
            row["val_accuracy"] = report.accuracy
            if report.mean_stft < best_stft:
                best_stft = report.mean_stft
                if best_path is not None:
                    save_checkpoint(bundle, best_path)
                    last_checkpoint = best_path
        history.append(row)

        if (
            out_dir is not None
            and cfg.checkpoint_every
            and (epoch + 1) % cfg.checkpoint_every == 0
        ):
            periodic = out_dir / f"epoch_{epoch + 1:05d}.pt"
            save_checkpoint(bundle, periodic)
            last_checkpoint = periodic

    if out_dir is not None:
        write_history(history, out_dir / "history.csv")
        save_checkpoint(bundle, out_dir / "final.pt")
    bundle.eval()
    return bundle, history


def write_history(history: list[dict], path: Path | str) -> None:
    fields = [
        "epoch", "loss_difference", "loss_channel", "loss_classification",
        "loss_total", "val_stft", "val_env", "val_accuracy",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)


def validate(
    bundle: ModelBundle,
    records: list[ClipRecord],
    audio_cfg: AudioConfig,
    frame_cfg: FrameConfig,
    seed: int = 0,
    output_source: str = "apnet_channels",
    flip_draws: int = 4,
    device: str = "cpu",
):
    """Segment-level metrics without gradient updates.

    Uses the deterministic center segment of every clip; classifier accuracy
    is averaged over a few seeded flip draws per clip.
    """
    from .data import load_binaural
    from .dsp import env_distance, istft, restore_lowest_bin, stft_distance
    from .inference import ClipMetrics, MetricsReport
    from .models import tensor_to_spec

    if not records:
        raise ValueError("validation set is empty")
    bundle.eval()
    per_clip: list[ClipMetrics] = []
    correct, total_draws = 0, 0
    with torch.no_grad():
        for idx, record in enumerate(records):
            rng = np.random.default_rng((seed, idx))
            audio = load_binaural(record.audio_path, audio_cfg.sample_rate)
            start = (len(audio) - audio_cfg.segment_samples) // 2
            sample = make_scene_sample(
                record, audio_cfg, frame_cfg, rng, start=start, flip=1
            )
            frames = torch.from_numpy(
                sample.frame.transpose(2, 0, 1).copy()
            )[None].to(device)
            mono = spec_to_tensor(sample.mono_spec)[None].to(device)
            f_v = bundle.visual_forward(frames)
            gen = bundle.forward_generation(mono, f_v)
            if output_source == "backbone_difference":
                pred_l = mono + gen["pred_diff"]
                pred_r = mono - gen["pred_diff"]
            else:
                pred_l, pred_r = gen["pred_left"], gen["pred_right"]

            pl = tensor_to_spec(pred_l[0].cpu(), audio_cfg)
            pr = tensor_to_spec(pred_r[0].cpu(), audio_cfg)
            d_stft = stft_distance(
                pl, pr, sample.gt_left_spec, sample.gt_right_spec
            )
            n_seg = audio_cfg.segment_samples
            wl = istft(restore_lowest_bin(pl), length=n_seg)
            wr = istft(restore_lowest_bin(pr), length=n_seg)
            gt_l = istft(restore_lowest_bin(sample.gt_left_spec), length=n_seg)
            gt_r = istft(restore_lowest_bin(sample.gt_right_spec), length=n_seg)
            d_env = env_distance(wl, wr, gt_l, gt_r)
            per_clip.append(
                ClipMetrics(
                    clip_id=record.audio_path.stem,
                    stft_distance=d_stft,
                    env_distance=d_env,
                )
            )

            for _ in range(flip_draws):
                y = int(rng.random() < 0.5)
                left = spec_to_tensor(sample.gt_left_spec)
                right = spec_to_tensor(sample.gt_right_spec)
                pair = torch.cat([left, right])[None].to(device)
                if y == 0:
                    pair = swap_stacked_channels(pair)
                y_hat = bundle.forward_classification(pair, f_v)
                correct += int((float(y_hat[0]) > 0.5) == bool(y))
                total_draws += 1

    accuracy = correct / total_draws if total_draws else None
    return MetricsReport.from_clips(per_clip, accuracy=accuracy)


def two_stage_train(
    net_seed_bundle_factory,
    train_records,
    val_records,
    audio_cfg,
    frame_cfg,
    cfg: TrainConfig,
    weights: LossWeights,
    out_dir=None,
):
    """Train the classification task first, then initialize the generation
    run's visual network from it and train generation alone."""
    stage1_cfg = replace(cfg, use_apnet=False, use_classification=True)
    stage1_weights = LossWeights(difference=0.0, channel=0.0, classification=1.0)
    bundle1 = net_seed_bundle_factory()
    bundle1, _ = train(
        bundle1, train_records, None, audio_cfg, frame_cfg,
        stage1_cfg, stage1_weights, out_dir=None,
    )
    bundle2 = net_seed_bundle_factory()
    bundle2.visual.load_state_dict(bundle1.visual.state_dict())
    stage2_cfg = replace(cfg, use_classification=False)
    stage2_weights = replace(weights, classification=0.0)
    return train(
        bundle2, train_records, val_records, audio_cfg, frame_cfg,
        stage2_cfg, stage2_weights, out_dir=out_dir,
    )
