"""Learning objectives and the gradient-based loss-weight calibration.

The three objectives: a squared-L2 difference loss for the backbone, a
squared-L2 channel loss for the pyramid head, and binary cross-entropy for
the flip classifier. Reduction is elementwise sum within a spectrogram and
mean over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the combined objective."""

    difference: float = 44.0
    channel: float = 44.0
    classification: float = 1.0

    def __post_init__(self):
        for name in ("difference", "channel", "classification"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be >= 0")


def _as_real_pairs(t: torch.Tensor) -> torch.Tensor:
    if t.is_complex():
        return torch.view_as_real(t)
    return t


def loss_difference(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Squared L2 over real and imaginary parts, summed per sample, batch mean."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    diff = _as_real_pairs(pred) - _as_real_pairs(gt)
    per_sample = diff.pow(2).flatten(1).sum(dim=1)
    return per_sample.mean()


def loss_channels(
    pred_l: torch.Tensor,
    pred_r: torch.Tensor,
    gt_l: torch.Tensor,
    gt_r: torch.Tensor,
) -> torch.Tensor:
    """Difference loss summed over the two output channels."""
    return loss_difference(pred_l, gt_l) + loss_difference(pred_r, gt_r)


def loss_classification(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with probabilities clamped at 1e-7, batch mean."""
    y = y.to(y_hat.dtype)
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be in {0, 1}")
    p = y_hat.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def loss_total(
    l_diff: torch.Tensor | float,
    l_chan: torch.Tensor | float,
    l_cls: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor | float:
    return (
        weights.difference * l_diff
        + weights.channel * l_chan
        + weights.classification * l_cls
    )


# ---------------------------------------------------------------------------
# Weight calibration: equalize mean gradient magnitudes across tasks
# ---------------------------------------------------------------------------

@dataclass
class CalibrationTask:
    """One task trained in isolation during calibration.

    loss_fn draws its own batch (closure over data and a seeded rng) and
    returns a scalar. shared_parameters is the subset on which gradient
    magnitudes are measured; parameters is everything the task trains.
    """

    name: str
    parameters: list[torch.nn.Parameter]
    shared_parameters: list[torch.nn.Parameter]
    loss_fn: Callable[[], torch.Tensor]


def calibrate_weights(
    tasks: Sequence[CalibrationTask],
    steps: int,
    lr: float = 1e-3,
    tail_fraction: float = 0.25,
    reference: str | None = None,
) -> dict[str, float]:
    """Train each task separately and return weights that equalize the tasks'
    mean absolute gradients on the shared parameters.

    The reference task (default: the last one) gets weight 1; every other
    task gets reference_gradient / task_gradient. Gradients are averaged
    over the final tail_fraction of steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    tail_start = max(0, steps - max(1, round(tail_fraction * steps)))
    mean_grads: dict[str, float] = {}
    for task in tasks:
        optimizer = torch.optim.Adam(task.parameters, lr=lr)
        tail_total, tail_count = 0.0, 0
        for step in range(steps):
            optimizer.zero_grad()
            loss = task.loss_fn()
            loss.backward()
            if step >= tail_start:
                total, count = 0.0, 0
                for p in task.shared_parameters:
                    if p.grad is not None:
                        total += p.grad.abs().sum().item()
                        count += p.grad.numel()
                if count:
                    tail_total += total / count
                    tail_count += 1
            optimizer.step()
        mean_grads[task.name] = tail_total / max(tail_count, 1)

    ref_name = reference if reference is not None else tasks[-1].name
    if ref_name not in mean_grads:
        raise ValueError(f"reference task {ref_name!r} not among tasks")
    dead = [name for name, g in mean_grads.items() if g < 1e-15]
    if dead:
        raise RuntimeError(
            f"calibration failed: task(s) {', '.join(dead)} produced zero "
            f"gradients on the shared parameters"
        )
    ref = mean_grads[ref_name]
    return {name: ref / g for name, g in mean_grads.items()}


def calibrate_bundle_weights(
    bundle,
    records,
    audio_cfg,
    frame_cfg,
    steps: int = 50,
    batch_size: int = 4,
    seed: int = 0,
    lr: float = 1e-3,
) -> LossWeights:
    """Run the calibration procedure on the three model objectives.

    Each task trains a fresh copy of the bundle from the same initial
    weights; gradients are measured on the shared visual parameters. The
    classification weight is normalized to 1.
    """
    import copy

    import numpy as np

    from .training import build_batch

    def make_loss(task_name: str, copy_bundle, rng):
        def fn():
            batch = build_batch(
                records, batch_size, audio_cfg, frame_cfg, rng
            )
            f_v = copy_bundle.visual_forward(batch["frames"])
            if task_name == "difference":
                out = copy_bundle.forward_generation(batch["mono"], f_v)
                return loss_difference(out["pred_diff"], batch["gt_diff"])
            if task_name == "channel":
                out = copy_bundle.forward_generation(batch["mono"], f_v)
                return loss_channels(
                    out["pred_left"], out["pred_right"],
                    batch["gt_left"], batch["gt_right"],
                )
            y_hat = copy_bundle.forward_classification(batch["stacked"], f_v)
            return loss_classification(y_hat, batch["labels"])

        return fn

    tasks = []
    for i, name in enumerate(("difference", "channel", "classification")):
        clone = copy.deepcopy(bundle)
        rng = np.random.default_rng(seed + 1000 * i)
        groups = clone.parameter_groups()
        tasks.append(
            CalibrationTask(
                name=name,
                parameters=groups["slow"] + groups["fast"],
                shared_parameters=list(clone.visual.parameters()),
                loss_fn=make_loss(name, clone, rng),
            )
        )
    weights = calibrate_weights(tasks, steps, lr=lr, reference="classification")
    return LossWeights(
        difference=weights["difference"],
        channel=weights["channel"],
        classification=weights["classification"],
    )
