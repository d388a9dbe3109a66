"""Shared micro-scale fixtures: tiny configs and a small synthetic dataset."""
import pytest

from binauralgen.data import FrameConfig, make_synth_dataset
from binauralgen.dsp import AudioConfig
from binauralgen.models import NetConfig

# 0.15 s segments at 8 kHz with a 128/80 STFT give 64x16 cropped spectrograms
MICRO_AUDIO = AudioConfig(
    sample_rate=8000, window_size=128, hop_length=80, segment_seconds=0.15
)
MICRO_NET = NetConfig(
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
MICRO_FRAMES = FrameConfig(height=32, width=64)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_scenes")
    records, azimuths, manifest = make_synth_dataset(
        8, out, MICRO_AUDIO, seed=11, image_size=32, duration_seconds=0.8
    )
    return records, azimuths, manifest
