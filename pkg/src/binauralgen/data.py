"""Dataset handling: clip records, segment sampling, flip augmentation,
corpus layout adapters, and a deterministic synthetic scene generator.

All sampling is stateless given (record, rng); callers split one root rng
per consumer so work can be parallelized without shared state.
"""
from __future__ import annotations

import hashlib
import json
import math
import shutil
import subprocess
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile
from scipy.signal import resample_poly

from .dsp import (
    AudioConfig,
    BinauralClip,
    ComplexSpectrogram,
    Waveform,
    drop_lowest_bin,
    mix_mono,
    stft,
)


class DatasetError(RuntimeError):
    """Raised when a corpus root is missing files; lists every missing path."""

    def __init__(self, message: str, missing: list[str] | None = None):
        self.missing = missing or []
        if self.missing:
            message = message + "\n  missing:\n" + "\n".join(
                f"    {m}" for m in self.missing
            )
        super().__init__(message)


@dataclass(frozen=True)
class FrameConfig:
    """Video frame preprocessing: resize, scale to [0,1], per-channel normalize.

    Horizontal crop/flip augmentation is intentionally off: flipping frames
    would invalidate the left/right supervision.
    """

    height: int = 224
    width: int = 448
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ClipRecord:
    """One source clip: a two-channel audio file plus its video frames.

    video_path may be a directory of numbered frame images (the synthetic
    layout) or a video file decoded through ffmpeg.
    """

    video_path: Path
    audio_path: Path
    duration: float
    frame_rate: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "video_path", Path(self.video_path))
        object.__setattr__(self, "audio_path", Path(self.audio_path))


@dataclass
class SceneSample:
    """One training example in the frequency domain (bins already cropped)."""

    mono_spec: ComplexSpectrogram
    gt_left_spec: ComplexSpectrogram
    gt_right_spec: ComplexSpectrogram
    flipped_left_spec: ComplexSpectrogram
    flipped_right_spec: ComplexSpectrogram
    flip_indicator: int
    frame: np.ndarray  # [H, W, 3] float32, normalized


@dataclass(frozen=True)
class SynthSceneParams:
    """Controls for one synthetic scene: panning angle, source type, geometry."""

    azimuth: float
    source_signal: str = "noise_band"
    itd_max: float = 0.0006
    image_size: int = 64
    blob_radius: int = 6
    duration_seconds: float = 2.0

    def __post_init__(self):
        if not -math.pi / 2 <= self.azimuth <= math.pi / 2:
            raise ValueError(f"azimuth {self.azimuth} outside [-pi/2, pi/2]")
        if self.itd_max < 0:
            raise ValueError("itd_max must be >= 0")
        if self.source_signal not in ("noise_band", "tone_stack"):
            raise ValueError(f"unknown source_signal {self.source_signal!r}")


# ---------------------------------------------------------------------------
# Audio / frame I/O
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _read_wav_cached(path: str, target_rate: int) -> tuple[np.ndarray, int]:
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        data = resample_poly(data, target_rate // g, rate // g, axis=0)
    return data, target_rate


def read_audio(path: Path | str, target_rate: int) -> np.ndarray:
    """Read a WAV of any supported sample format as float64 [n, channels],
    resampled to target_rate."""
    try:
        data, _ = _read_wav_cached(str(path), target_rate)
    except FileNotFoundError:
        raise DatasetError(f"audio file not found: {path}")
    except Exception as exc:
        raise DatasetError(f"cannot read audio file {path}: {exc}")
    return data


def load_binaural(path: Path | str, target_rate: int) -> BinauralClip:
    """Read a two-channel WAV, resampling to target_rate if needed."""
    data = read_audio(path, target_rate)
    rate = target_rate
    if data.shape[1] != 2:
        raise DatasetError(f"{path}: expected 2 audio channels, found {data.shape[1]}")
    return BinauralClip(
        left=Waveform(samples=data[:, 0], sample_rate=rate),
        right=Waveform(samples=data[:, 1], sample_rate=rate),
    )


def write_binaural(clip: BinauralClip, path: Path | str) -> None:
    stereo = np.stack([clip.left.samples, clip.right.samples], axis=1)
    wavfile.write(str(path), clip.sample_rate, stereo.astype(np.float32))


def list_frame_files(video_path: Path) -> list[Path]:
    files = sorted(
        p for p in Path(video_path).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not files:
        raise DatasetError(f"no frame images in {video_path}")
    return files


def _extract_video_frame(video_path: Path, timestamp: float) -> np.ndarray:
    if shutil.which("ffmpeg") is None:
        raise DatasetError(
            f"ffmpeg is required to decode {video_path}; install it or "
            f"pre-extract frames into a directory"
        )
    out = subprocess.run(
        ["ffmpeg", "-v", "error", "-ss", f"{timestamp:.3f}", "-i", str(video_path),
         "-frames:v", "1", "-f", "image2pipe", "-vcodec", "png", "-"],
        capture_output=True,
    )
    if out.returncode != 0 or not out.stdout:
        raise DatasetError(f"ffmpeg failed on {video_path}: {out.stderr.decode()[:200]}")
    import io

    return np.asarray(Image.open(io.BytesIO(out.stdout)).convert("RGB"))


def load_frame(record: ClipRecord, timestamp: float) -> np.ndarray:
    """Raw RGB frame (uint8 HxWx3) nearest to `timestamp` seconds."""
    if record.video_path.is_dir():
        files = list_frame_files(record.video_path)
        idx = int(np.clip(round(timestamp * record.frame_rate), 0, len(files) - 1))
        return np.asarray(Image.open(files[idx]).convert("RGB"))
    if record.video_path.exists():
        return _extract_video_frame(record.video_path, timestamp)
    raise DatasetError(f"video source not found: {record.video_path}")


def preprocess_frame(img: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Resize to cfg.height x cfg.width, scale to [0,1], normalize per channel."""
    pil = Image.fromarray(img)
    pil = pil.resize((cfg.width, cfg.height), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    return (arr - mean) / std


# ---------------------------------------------------------------------------
# Segment sampling and flip augmentation
# ---------------------------------------------------------------------------

def sample_segment_start(n_total: int, n_segment: int, rng: np.random.Generator) -> int:
    """Uniform segment start over [0, n_total - n_segment]."""
    if n_total < n_segment:
        raise ValueError(f"clip of {n_total} samples shorter than segment {n_segment}")
    return int(rng.integers(0, n_total - n_segment + 1))


def sample_segment(
    clip: ClipRecord,
    audio_cfg: AudioConfig,
    frame_cfg: FrameConfig,
    rng: np.random.Generator,
    start: int | None = None,
) -> tuple[BinauralClip, np.ndarray]:
    """Cut one training segment and fetch the frame nearest its center.

    A fixed `start` (in samples) makes the draw deterministic; otherwise the
    offset is uniform over the clip.
    """
    audio = load_binaural(clip.audio_path, audio_cfg.sample_rate)
    n_seg = audio_cfg.segment_samples
    if start is None:
        start = sample_segment_start(len(audio), n_seg, rng)
    if not 0 <= start <= len(audio) - n_seg:
        raise ValueError(f"segment start {start} out of range")
    seg = BinauralClip(
        left=Waveform(
            samples=audio.left.samples[start : start + n_seg],
            sample_rate=audio.sample_rate,
        ),
        right=Waveform(
            samples=audio.right.samples[start : start + n_seg],
            sample_rate=audio.sample_rate,
        ),
    )
    center = (start + n_seg / 2) / audio_cfg.sample_rate
    frame = preprocess_frame(load_frame(clip, center), frame_cfg)
    return seg, frame


def random_flip(
    b: BinauralClip, rng: np.random.Generator
) -> tuple[BinauralClip, int]:
    """Swap channels with probability 0.5; the indicator is 0 when flipped, 1 otherwise."""
    if rng.random() < 0.5:
        return b.swapped(), 0
    return b, 1


def make_scene_sample(
    clip: ClipRecord,
    audio_cfg: AudioConfig,
    frame_cfg: FrameConfig,
    rng: np.random.Generator,
    start: int | None = None,
    flip: int | None = None,
) -> SceneSample:
    """Build one frequency-domain training example from a clip record.

    `flip` forces the augmentation branch (1 = keep, 0 = swap) when given.
    """
    seg, frame = sample_segment(clip, audio_cfg, frame_cfg, rng, start=start)
    if flip is None:
        flipped, indicator = random_flip(seg, rng)
    else:
        indicator = int(flip)
        flipped = seg if indicator == 1 else seg.swapped()

    mono = mix_mono(seg.left, seg.right)
    spec = lambda w: drop_lowest_bin(stft(w, audio_cfg))
    return SceneSample(
        mono_spec=spec(mono),
        gt_left_spec=spec(seg.left),
        gt_right_spec=spec(seg.right),
        flipped_left_spec=spec(flipped.left),
        flipped_right_spec=spec(flipped.right),
        flip_indicator=indicator,
        frame=frame,
    )


# ---------------------------------------------------------------------------
# Manifests and corpus layout adapters
# ---------------------------------------------------------------------------

def write_manifest(
    records: list[ClipRecord],
    path: Path | str,
    extras: list[dict] | None = None,
) -> None:
    """Serialize clip records as one JSON manifest (paths relative to it)."""
    path = Path(path)
    base = path.parent
    clips = []
    for i, r in enumerate(records):
        entry = {
            "video_path": _relativize(r.video_path, base),
            "audio_path": _relativize(r.audio_path, base),
            "duration": r.duration,
            "frame_rate": r.frame_rate,
        }
        if extras is not None:
            entry.update(extras[i])
        clips.append(entry)
    path.write_text(json.dumps({"clips": clips}, indent=2, sort_keys=True) + "\n")


def _relativize(p: Path, base: Path) -> str:
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def read_manifest(path: Path | str) -> tuple[list[ClipRecord], list[dict]]:
    """Load a manifest; returns the records plus each entry's raw dict."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    base = path.parent
    records, raw = [], []
    for entry in payload["clips"]:
        records.append(
            ClipRecord(
                video_path=base / entry["video_path"],
                audio_path=base / entry["audio_path"],
                duration=float(entry["duration"]),
                frame_rate=float(entry.get("frame_rate", 10.0)),
            )
        )
        raw.append(entry)
    return records, raw


def load_fairplay(
    root: Path | str, split_id: int = 1
) -> tuple[list[ClipRecord], list[ClipRecord], list[ClipRecord]]:
    """Adapter for the FAIR-Play layout: binaural_audios/, videos/, splits/splitN/.

    Clips in this corpus are uniform 10-second recordings. Split files are
    consumed verbatim: one audio file name per line (train/val/test, .txt or
    .csv). Every referenced file must exist; all missing paths are reported
    at once.
    """
    root = Path(root)
    split_dir = root / "splits" / f"split{split_id}"
    if not split_dir.is_dir():
        raise DatasetError(
            f"no split directory {split_dir}; expected the published layout "
            f"with splits/split{split_id}/ under the dataset root"
        )
    out: list[list[ClipRecord]] = []
    missing: list[str] = []
    for part in ("train", "val", "test"):
        listing = None
        for ext in (".txt", ".csv"):
            cand = split_dir / f"{part}{ext}"
            if cand.exists():
                listing = cand
                break
        if listing is None:
            raise DatasetError(f"missing split file {split_dir}/{part}.txt")
        records = []
        for line in listing.read_text().splitlines():
            name = line.strip()
            if not name:
                continue
            name = Path(name).name
            audio = root / "binaural_audios" / name
            video = root / "videos" / (Path(name).stem + ".mp4")
            frames_dir = root / "frames" / Path(name).stem
            if frames_dir.is_dir():
                video = frames_dir
            if not audio.exists():
                missing.append(str(audio))
            if not video.exists():
                missing.append(str(video))
            records.append(
                ClipRecord(video_path=video, audio_path=audio, duration=10.0)
            )
        out.append(records)
    if missing:
        raise DatasetError(f"dataset root {root} is incomplete", missing=missing)
    return out[0], out[1], out[2]


def _stable_key(record: ClipRecord) -> str:
    return hashlib.sha1(record.audio_path.name.encode()).hexdigest()


def load_asmr(
    root: Path | str,
) -> tuple[list[ClipRecord], list[ClipRecord], list[ClipRecord]]:
    """Adapter for a manifest-based corpus split 80/10/10 by stable hash.

    The split depends only on audio file names, never on manifest order.
    """
    root = Path(root)
    records, _ = read_manifest(root / "manifest.json")
    missing = [
        str(p)
        for r in records
        for p in (r.audio_path, r.video_path)
        if not p.exists()
    ]
    if missing:
        raise DatasetError(f"dataset root {root} is incomplete", missing=missing)
    ordered = sorted(records, key=lambda r: (_stable_key(r), r.audio_path.name))
    n = len(ordered)
    n_val = round(0.1 * n)
    n_test = round(0.1 * n)
    train = ordered[: n - n_val - n_test]
    val = ordered[n - n_val - n_test : n - n_test]
    test = ordered[n - n_test :]
    return train, val, test


# ---------------------------------------------------------------------------
# Synthetic scenes (panning-law oracle)
# ---------------------------------------------------------------------------

def panning_gains(azimuth: float) -> tuple[float, float]:
    """Constant-power gains: g_l = cos(t), g_r = sin(t) with t = (azimuth + pi/2)/2."""
    theta = (azimuth + math.pi / 2) / 2
    return math.cos(theta), math.sin(theta)


def _source_signal(kind: str, n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "noise_band":
        x = rng.standard_normal(n)
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(n, 1 / rate)
        spec[(freqs < 300) | (freqs > min(3000, rate / 2 - 100))] = 0
        x = np.fft.irfft(spec, n=n)
    else:  # tone_stack
        t = np.arange(n) / rate
        x = np.zeros(n)
        for mult in (1.0, 2.7, 4.3):
            f = 220.0 * mult
            x += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / mult
        x *= 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * t)
    peak = np.max(np.abs(x))
    return 0.5 * x / peak if peak > 0 else x


def _delay(x: np.ndarray, d: int) -> np.ndarray:
    if d <= 0:
        return x
    return np.concatenate([np.zeros(d), x[:-d]])


def synth_scene(
    params: SynthSceneParams,
    out_dir: Path | str,
    audio_cfg: AudioConfig,
    rng: np.random.Generator,
    name: str = "scene_0000",
) -> tuple[ClipRecord, float]:
    """Render one synthetic scene to disk; returns its record and azimuth.

    Audio is a mono source panned by the constant-power law plus an optional
    whole-sample interaural delay on the far ear. Frames show a bright blob
    whose horizontal center maps linearly from azimuth to image width.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = round(params.duration_seconds * audio_cfg.sample_rate)
    src = _source_signal(params.source_signal, n, audio_cfg.sample_rate, rng)
    g_l, g_r = panning_gains(params.azimuth)
    left = g_l * src
    right = g_r * src
    d = round(params.itd_max * audio_cfg.sample_rate * abs(math.sin(params.azimuth)))
    if params.azimuth > 0:
        left = _delay(left, d)
    elif params.azimuth < 0:
        right = _delay(right, d)

    audio_path = out_dir / f"{name}.wav"
    write_binaural(
        BinauralClip(
            left=Waveform(samples=left, sample_rate=audio_cfg.sample_rate),
            right=Waveform(samples=right, sample_rate=audio_cfg.sample_rate),
        ),
        audio_path,
    )

    frames_dir = out_dir / f"{name}_frames"
    frames_dir.mkdir(exist_ok=True)
    frame_rate = 10.0
    img = _blob_image(params)
    n_frames = max(1, round(params.duration_seconds * frame_rate))
    for k in range(n_frames):
        Image.fromarray(img).save(frames_dir / f"frame_{k:04d}.png")

    record = ClipRecord(
        video_path=frames_dir,
        audio_path=audio_path,
        duration=params.duration_seconds,
        frame_rate=frame_rate,
    )
    return record, params.azimuth


def _blob_image(params: SynthSceneParams) -> np.ndarray:
    h = params.image_size
    w = 2 * params.image_size
    x_c = (params.azimuth + math.pi / 2) / math.pi * (w - 1)
    y_c = h / 2
    yy, xx = np.mgrid[0:h, 0:w]
    dist2 = (xx - x_c) ** 2 + (yy - y_c) ** 2
    blob = np.exp(-dist2 / (2 * params.blob_radius**2))
    img = 20 + 230 * blob
    return np.clip(img, 0, 255).astype(np.uint8)[..., None].repeat(3, axis=2)


def make_synth_dataset(
    n_scenes: int,
    out_dir: Path | str,
    audio_cfg: AudioConfig,
    seed: int,
    source_signal: str = "noise_band",
    itd_max: float = 0.0,
    image_size: int = 64,
    duration_seconds: float = 2.0,
) -> tuple[list[ClipRecord], list[float], Path]:
    """Generate n scenes with uniform azimuths and write a manifest.

    Deterministic for a fixed seed: identical manifests byte for byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records, azimuths = [], []
    for i in range(n_scenes):
        azimuth = float(rng.uniform(-math.pi / 2, math.pi / 2))
        params = SynthSceneParams(
            azimuth=azimuth,
            source_signal=source_signal,
            itd_max=itd_max,
            image_size=image_size,
            duration_seconds=duration_seconds,
        )
        record, _ = synth_scene(
            params, out_dir, audio_cfg, rng, name=f"scene_{i:04d}"
        )
        records.append(record)
        azimuths.append(azimuth)
    manifest = out_dir / "manifest.json"
    write_manifest(records, manifest, extras=[{"azimuth": a} for a in azimuths])
    return records, azimuths, manifest
