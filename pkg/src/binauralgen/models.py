"""The learnable subnetworks and their composition.

Five pieces: a shared visual extractor, two task-specific attention
selectors, the conditional U-Net backbone with its associative pyramid side
network, and the flip discriminator (binaural encoder + classifier).

Audio enters as (real, imag) channel pairs: 2 channels for the mono input,
4 for the stacked binaural pair. The backbone emits a 2-channel complex
difference mask; the pyramid head emits 4 channels (two complex masks).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import AudioConfig, ComplexSpectrogram

BACKBONE_IN_CHANNELS = 2
MASK_OUT_CHANNELS = 2
APNET_OUT_CHANNELS = 4
BINAURAL_IN_CHANNELS = 4

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters shared by all subnetworks."""

    freq_bins: int = 256
    time_frames: int = 64
    unet_depth: int = 5
    base_channels: int = 64
    visual_channels: int = 512
    attention_hidden_channels: int = 64
    visual_proj_channels: int = 128
    apnet_copies: int = 4
    apnet_channels: int = 64
    frame_height: int = 224
    frame_width: int = 448
    visual_arch: str = "conv_stack"
    use_pretrained_visual: bool = False
    pretrained_visual_path: str | None = None
    use_attention: bool = True

    def __post_init__(self):
        d = 2**self.unet_depth
        if self.freq_bins % d or self.time_frames % d:
            raise ValueError(
                f"spectrogram {self.freq_bins}x{self.time_frames} not divisible "
                f"by 2^{self.unet_depth}"
            )
        if self.frame_height % 32 or self.frame_width % 32:
            raise ValueError("frame dims must be divisible by 32")
        if self.visual_arch not in ("conv_stack", "resnet18"):
            raise ValueError(f"unknown visual_arch {self.visual_arch!r}")
        if self.visual_arch == "resnet18" and self.visual_channels != 512:
            raise ValueError("resnet18 trunk emits 512 channels")

    @property
    def visual_spatial(self) -> tuple[int, int]:
        return self.frame_height // 32, self.frame_width // 32

    @property
    def visual_flat_dim(self) -> int:
        vh, vw = self.visual_spatial
        return self.visual_channels * vh * vw


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _init_module(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def _init_mask_head(head: nn.Conv2d, bias: tuple[float, ...]) -> None:
    """Small-gain head so initial masks sit at `bias`: near zero for the
    difference mask (prediction ~ mono), the unit real mask for the channel
    masks (prediction ~ mono copy)."""
    with torch.no_grad():
        head.weight.mul_(0.01)
        head.bias.copy_(torch.tensor(bias, dtype=head.bias.dtype))


# ---------------------------------------------------------------------------
# Visual extraction
# ---------------------------------------------------------------------------

class ConvStackVisual(nn.Module):
    """Reduced visual extractor: six conv layers with a total stride of 32.

    Emits the same spatial map as the residual trunk, so the two are
    interchangeable behind the config flag.
    """

    def __init__(self, out_channels: int):
        super().__init__()
        widths = [
            max(8, out_channels // 16),
            max(8, out_channels // 8),
            max(16, out_channels // 4),
            max(16, out_channels // 2),
            out_channels,
        ]
        layers: list[nn.Module] = []
        prev = 3
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 4, stride=2, padding=1),
                nn.GroupNorm(_groups(w), w),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            prev = w
        layers += [
            nn.Conv2d(prev, out_channels, 3, stride=1, padding=1),
            nn.GroupNorm(_groups(out_channels), out_channels),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class ResNet18Visual(nn.Module):
    """ResNet18 trunk with the classification head and final pooling removed."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = nn.Sequential(_BasicBlock(64, 64), _BasicBlock(64, 64))
        self.layer2 = nn.Sequential(_BasicBlock(64, 128, 2), _BasicBlock(128, 128))
        self.layer3 = nn.Sequential(_BasicBlock(128, 256, 2), _BasicBlock(256, 256))
        self.layer4 = nn.Sequential(_BasicBlock(256, 512, 2), _BasicBlock(512, 512))

    def forward(self, x):
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


def build_visual_net(cfg: NetConfig) -> nn.Module:
    if cfg.visual_arch == "resnet18":
        net = ResNet18Visual()
        if cfg.use_pretrained_visual:
            if not cfg.pretrained_visual_path:
                raise ValueError(
                    "use_pretrained_visual requires pretrained_visual_path"
                )
            state = torch.load(cfg.pretrained_visual_path, map_location="cpu")
            net.load_state_dict(state)
        return net
    if cfg.use_pretrained_visual:
        raise ValueError("pretrained weights are only available for resnet18")
    return ConvStackVisual(cfg.visual_channels)


# ---------------------------------------------------------------------------
# Task attention
# ---------------------------------------------------------------------------

class TaskAttention(nn.Module):
    """Two convs and a sigmoid produce a gate multiplied onto the shared features."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, channels, 3, padding=1)

    def attention_map(self, f_v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv2(F.relu(self.conv1(f_v))))

    def forward(self, f_v: torch.Tensor) -> torch.Tensor:
        return f_v * self.attention_map(f_v)


# ---------------------------------------------------------------------------
# U-Net backbone
# ---------------------------------------------------------------------------

class UNetEncoder(nn.Module):
    def __init__(self, in_channels: int, depth: int, base_channels: int):
        super().__init__()
        self.channels = [min(base_channels * 2**i, 512) for i in range(depth)]
        blocks = []
        prev = in_channels
        for i, ch in enumerate(self.channels):
            layers: list[nn.Module] = [nn.Conv2d(prev, ch, 4, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.GroupNorm(_groups(ch), ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            blocks.append(nn.Sequential(*layers))
            prev = ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        return x, skips


class UNetDecoder(nn.Module):
    """Mirror of the encoder with skip concatenation at every level.

    Returns the per-level feature maps so the pyramid network can consume
    them; the final map feeds the 1x1 mask head.
    """

    def __init__(self, encoder_channels: list[int], bottleneck_extra: int,
                 out_feature_channels: int):
        super().__init__()
        depth = len(encoder_channels)
        blocks = []
        self.channels = []
        prev = encoder_channels[-1] + bottleneck_extra
        for j in range(depth):
            target = (
                encoder_channels[depth - 2 - j] if j < depth - 1
                else out_feature_channels
            )
            blocks.append(
                nn.Sequential(
                    nn.ConvTranspose2d(prev, target, 4, stride=2, padding=1),
                    nn.GroupNorm(_groups(target), target),
                    nn.ReLU(inplace=True),
                )
            )
            self.channels.append(target)
            if j < depth - 1:
                prev = target + encoder_channels[depth - 2 - j]
        self.blocks = nn.ModuleList(blocks)

    def forward(
        self, bottleneck: torch.Tensor, skips: list[torch.Tensor]
    ) -> list[torch.Tensor]:
        activations = []
        x = bottleneck
        depth = len(self.blocks)
        for j, block in enumerate(self.blocks):
            x = block(x)
            activations.append(x)
            if j < depth - 1:
                x = torch.cat([x, skips[depth - 2 - j]], dim=1)
        return activations


class BackboneUNet(nn.Module):
    """Conditional U-Net: visual features are tiled into the bottleneck, the
    decoder emits a 2-channel complex difference mask."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = UNetEncoder(BACKBONE_IN_CHANNELS, cfg.unet_depth, cfg.base_channels)
        self.visual_proj = nn.Linear(cfg.visual_flat_dim, cfg.visual_proj_channels)
        self.decoder = UNetDecoder(
            self.encoder.channels, cfg.visual_proj_channels, cfg.base_channels
        )
        self.mask_head = nn.Conv2d(cfg.base_channels, MASK_OUT_CHANNELS, 1)
        self.apply(_init_module)
        _init_mask_head(self.mask_head, (0.0, 0.0))

    def forward(
        self, spec: torch.Tensor, f_vb: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if spec.shape[1] != BACKBONE_IN_CHANNELS:
            raise ValueError(f"expected {BACKBONE_IN_CHANNELS}-channel input")
        bottleneck, skips = self.encoder(spec)
        vis = self.visual_proj(f_vb.flatten(1))
        vis = vis[:, :, None, None].expand(-1, -1, *bottleneck.shape[-2:])
        activations = self.decoder(torch.cat([bottleneck, vis], dim=1), skips)
        mask = self.mask_head(activations[-1])
        return mask, activations


# ---------------------------------------------------------------------------
# Associative pyramid network
# ---------------------------------------------------------------------------

class ChannelAssociation(nn.Module):
    """Project visual features to k per-channel weight vectors and form k
    weighted copies of the audio activation.

    The projection has no bias, so zero visual input associates to zero.
    """

    def __init__(self, vis_dim: int, audio_channels: int, copies: int):
        super().__init__()
        self.copies = copies
        self.audio_channels = audio_channels
        self.proj = nn.Linear(vis_dim, copies * audio_channels, bias=False)

    def forward(self, audio_act: torch.Tensor, vis_flat: torch.Tensor) -> torch.Tensor:
        b, c, h, w = audio_act.shape
        weights = self.proj(vis_flat).view(b, self.copies, self.audio_channels)
        out = audio_act.unsqueeze(1) * weights[..., None, None]
        return out.reshape(b, self.copies * c, h, w)


class APNet(nn.Module):
    """Side-way pyramid fusing visual associations of every decoder level.

    Each level's association is fused by a 1x1 conv into a fixed-width map
    that is upsampled and added into the running pyramid; the head turns the
    final map into two complex masks.
    """

    def __init__(self, cfg: NetConfig, decoder_channels: list[int]):
        super().__init__()
        self.cfg = cfg
        self.associations = nn.ModuleList(
            ChannelAssociation(cfg.visual_flat_dim, ch, cfg.apnet_copies)
            for ch in decoder_channels
        )
        self.fusions = nn.ModuleList(
            nn.Conv2d(cfg.apnet_copies * ch, cfg.apnet_channels, 1)
            for ch in decoder_channels
        )
        self.head = nn.Conv2d(cfg.apnet_channels, APNET_OUT_CHANNELS, 1)
        self.apply(_init_module)
        _init_mask_head(self.head, (1.0, 0.0, 1.0, 0.0))

    def forward(
        self, activations: list[torch.Tensor], f_vb: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if len(activations) != len(self.associations):
            raise ValueError(
                f"expected {len(self.associations)} decoder levels, "
                f"got {len(activations)}"
            )
        vis_flat = f_vb.flatten(1)
        pyramid = None
        for act, assoc, fuse in zip(activations, self.associations, self.fusions):
            level = fuse(assoc(act, vis_flat))
            if pyramid is None:
                pyramid = level
            else:
                pyramid = F.interpolate(pyramid, scale_factor=2, mode="nearest") + level
        masks = self.head(pyramid)
        return masks[:, 0:2], masks[:, 2:4]


# ---------------------------------------------------------------------------
# Flip discriminator
# ---------------------------------------------------------------------------

class BinauralEncoder(nn.Module):
    """Same stack as the backbone encoder with doubled input channels."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.encoder = UNetEncoder(BINAURAL_IN_CHANNELS, cfg.unet_depth, cfg.base_channels)
        self.apply(_init_module)

    @property
    def out_channels(self) -> int:
        return self.encoder.channels[-1]

    def forward(self, stacked: torch.Tensor) -> torch.Tensor:
        if stacked.shape[1] != BINAURAL_IN_CHANNELS:
            raise ValueError(f"expected {BINAURAL_IN_CHANNELS}-channel input")
        bottleneck, _ = self.encoder(stacked)
        return bottleneck


class FlipClassifier(nn.Module):
    """Conv + pool + fully connected + sigmoid over fused audio-visual features."""

    def __init__(self, visual_channels: int, binaural_channels: int, hidden: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(visual_channels + binaural_channels, hidden, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(hidden), hidden)
        self.fc = nn.Linear(hidden, 1)
        self.apply(_init_module)

    def forward(self, f_vf: torch.Tensor, f_bin: torch.Tensor) -> torch.Tensor:
        pooled_visual = F.adaptive_avg_pool2d(f_vf, f_bin.shape[-2:])
        x = torch.cat([pooled_visual, f_bin], dim=1)
        x = F.relu(self.norm(self.conv(x)), inplace=True)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return torch.sigmoid(self.fc(x)).squeeze(1)


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

class ModelBundle(nn.Module):
    """All subnetworks plus their configuration, composed for both tasks."""

    def __init__(self, net_cfg: NetConfig, audio_cfg: AudioConfig):
        super().__init__()
        self.net_cfg = net_cfg
        self.audio_cfg = audio_cfg
        self.visual = build_visual_net(net_cfg)
        if net_cfg.visual_arch == "conv_stack":
            self.visual.apply(_init_module)
        if net_cfg.use_attention:
            self.attention_generation = TaskAttention(
                net_cfg.visual_channels, net_cfg.attention_hidden_channels
            )
            self.attention_classification = TaskAttention(
                net_cfg.visual_channels, net_cfg.attention_hidden_channels
            )
            self.attention_generation.apply(_init_module)
            self.attention_classification.apply(_init_module)
        else:
            self.attention_generation = None
            self.attention_classification = None
        self.backbone = BackboneUNet(net_cfg)
        self.apnet = APNet(net_cfg, self.backbone.decoder.channels)
        self.binaural_encoder = BinauralEncoder(net_cfg)
        self.classifier = FlipClassifier(
            net_cfg.visual_channels, self.binaural_encoder.out_channels
        )

    def visual_forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-2:] != (self.net_cfg.frame_height, self.net_cfg.frame_width):
            raise ValueError(
                f"frame shape {tuple(frames.shape[-2:])} != configured "
                f"({self.net_cfg.frame_height}, {self.net_cfg.frame_width})"
            )
        return self.visual(frames)

    def select_features(self, f_v: torch.Tensor, task: str) -> torch.Tensor:
        if task not in ("generation", "classification"):
            raise ValueError(f"unknown task {task!r}")
        if not self.net_cfg.use_attention:
            return f_v
        att = (
            self.attention_generation if task == "generation"
            else self.attention_classification
        )
        return att(f_v)

    def forward_generation(
        self, mono_spec: torch.Tensor, f_v: torch.Tensor
    ) -> dict[str, torch.Tensor]:
        f_vb = self.select_features(f_v, "generation")
        mask_diff, activations = self.backbone(mono_spec, f_vb)
        mask_l, mask_r = self.apnet(activations, f_vb)
        return {
            "f_vb": f_vb,
            "mask_diff": mask_diff,
            "mask_left": mask_l,
            "mask_right": mask_r,
            "pred_diff": apply_mask_tensor(mono_spec, mask_diff),
            "pred_left": apply_mask_tensor(mono_spec, mask_l),
            "pred_right": apply_mask_tensor(mono_spec, mask_r),
        }

    def forward_classification(
        self, stacked_spec: torch.Tensor, f_v: torch.Tensor
    ) -> torch.Tensor:
        f_vf = self.select_features(f_v, "classification")
        f_bin = self.binaural_encoder(stacked_spec)
        return self.classifier(f_vf, f_bin)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Two optimizer groups: slow (visual/attention/classifier) and fast
        (backbone, pyramid, binaural encoder)."""
        slow: list[nn.Parameter] = list(self.visual.parameters())
        if self.attention_generation is not None:
            slow += list(self.attention_generation.parameters())
            slow += list(self.attention_classification.parameters())
        slow += list(self.classifier.parameters())
        fast = (
            list(self.backbone.parameters())
            + list(self.apnet.parameters())
            + list(self.binaural_encoder.parameters())
        )
        return {"slow": slow, "fast": fast}


# ---------------------------------------------------------------------------
# Tensor bridges and checkpointing
# ---------------------------------------------------------------------------

def spec_to_tensor(S: ComplexSpectrogram) -> torch.Tensor:
    """Complex matrix -> float tensor [2, F, T] of (real, imag) channels."""
    return torch.from_numpy(
        np.stack([S.values.real, S.values.imag]).astype(np.float32)
    )


def tensor_to_spec(t: torch.Tensor, cfg: AudioConfig) -> ComplexSpectrogram:
    arr = t.detach().cpu().numpy().astype(np.float64)
    return ComplexSpectrogram(values=arr[0] + 1j * arr[1], config=cfg)


def apply_mask_tensor(spec: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Complex product on [B, 2, F, T] (real, imag) tensors."""
    if spec.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(spec.shape)} vs {tuple(mask.shape)}")
    s_re, s_im = spec[:, 0], spec[:, 1]
    m_re, m_im = mask[:, 0], mask[:, 1]
    return torch.stack(
        [s_re * m_re - s_im * m_im, s_re * m_im + s_im * m_re], dim=1
    )


def swap_stacked_channels(stacked: torch.Tensor) -> torch.Tensor:
    """Exchange the left and right (real, imag) pairs of a 4-channel tensor."""
    return stacked[:, [2, 3, 0, 1]]


def save_checkpoint(bundle: ModelBundle, path: Path | str) -> None:
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA,
            "net_config": asdict(bundle.net_cfg),
            "audio_config": asdict(bundle.audio_cfg),
            "state_dict": bundle.state_dict(),
        },
        str(path),
    )


def load_checkpoint(path: Path | str) -> ModelBundle:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(
            f"checkpoint schema {payload.get('schema_version')} unsupported "
            f"(expected {CHECKPOINT_SCHEMA})"
        )
    net_cfg = NetConfig(**payload["net_config"])
    audio_cfg = AudioConfig(**payload["audio_config"])
    bundle = ModelBundle(net_cfg, audio_cfg)
    bundle.load_state_dict(payload["state_dict"])
    bundle.eval()
    return bundle
