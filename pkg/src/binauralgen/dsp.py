"""Signal-processing kernel: STFT/ISTFT, complex masks, channel algebra, metrics.

Everything here is a pure function over numpy arrays wrapped in small
dataclasses. No learning framework leaks into this module.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class AudioConfig:
    """STFT framing and sampling parameters.

    The canonical configuration is 16 kHz audio, 512-sample windows with a
    160-sample hop, and 0.63 s training segments (10080 samples).
    """

    sample_rate: int = 16000
    window_size: int = 512
    hop_length: int = 160
    segment_seconds: float = 0.63
    window_function: str = "hann"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.window_size > self.hop_length > 0:
            raise ValueError(
                f"need window_size > hop_length > 0, got "
                f"window_size={self.window_size}, hop_length={self.hop_length}"
            )
        n = self.segment_seconds * self.sample_rate
        if abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"segment_seconds * sample_rate must be an integer sample count, "
                f"got {n}"
            )

    @property
    def segment_samples(self) -> int:
        return round(self.segment_seconds * self.sample_rate)

    @property
    def freq_bins(self) -> int:
        """Bin count of an uncropped spectrogram (window_size/2 + 1)."""
        return self.window_size // 2 + 1

    def window(self) -> np.ndarray:
        return get_window(self.window_function, self.window_size, fftbins=True)


@dataclass(frozen=True)
class Waveform:
    """1-D sampled audio signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class BinauralClip:
    """A left/right pair of equal-length waveforms at one sample rate."""

    left: Waveform
    right: Waveform

    def __post_init__(self):
        if self.left.sample_rate != self.right.sample_rate:
            raise ValueError("left/right sample rates differ")
        if len(self.left) != len(self.right):
            raise ValueError(
                f"left/right lengths differ: {len(self.left)} vs {len(self.right)}"
            )

    @property
    def sample_rate(self) -> int:
        return self.left.sample_rate

    def __len__(self) -> int:
        return len(self.left)

    def swapped(self) -> "BinauralClip":
        return BinauralClip(left=self.right, right=self.left)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Time-frequency grid of complex values, [freq_bins x time_frames]."""

    values: np.ndarray
    config: AudioConfig = field(default_factory=AudioConfig)

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.complex128)
        )
        if self.values.ndim != 2:
            raise ValueError("spectrogram must be a 2-D complex matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ComplexMask:
    """Complex multiplier with the same shape as the spectrogram it masks.

    No magnitude bound is imposed on mask values.
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.complex128)
        )
        if self.values.ndim != 2:
            raise ValueError("mask must be a 2-D complex matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mask contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def stft(w: Waveform, cfg: AudioConfig) -> ComplexSpectrogram:
    """Short-time Fourier transform with centered frames and reflection padding.

    Output shape is (window_size/2 + 1) x (1 + len(w)//hop_length); a 0.63 s
    segment under the canonical config yields 257 x 64.
    """
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}"
        )
    x = w.samples
    if x.size < cfg.window_size:
        raise ValueError(
            f"signal of {x.size} samples is shorter than one window "
            f"({cfg.window_size} samples)"
        )
    pad = cfg.window_size // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + x.size // cfg.hop_length
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.window_size)
    frames = frames[:: cfg.hop_length][:n_frames]
    spec = np.fft.rfft(frames * cfg.window(), axis=1)
    return ComplexSpectrogram(values=spec.T, config=cfg)


def istft(S: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Overlap-add inverse STFT.

    Pass ``length`` to recover the exact original sample count; otherwise the
    output has (n_frames - 1) * hop_length samples.
    """
    cfg = S.config
    n_bins, n_frames = S.values.shape
    if 2 * (n_bins - 1) != cfg.window_size:
        raise ValueError(
            f"{n_bins} frequency bins do not match window_size {cfg.window_size} "
            f"(expected {cfg.freq_bins}; restore the cropped bin first)"
        )
    win = cfg.window()
    frames = np.fft.irfft(S.values.T, n=cfg.window_size, axis=1) * win

    pad = cfg.window_size // 2
    total = cfg.window_size + (n_frames - 1) * cfg.hop_length
    buf = np.zeros(total)
    wsum = np.zeros(total)
    wsq = win * win
    for t in range(n_frames):
        start = t * cfg.hop_length
        buf[start : start + cfg.window_size] += frames[t]
        wsum[start : start + cfg.window_size] += wsq

    n_out = (n_frames - 1) * cfg.hop_length
    if length is not None:
        n_out = length
    interior = wsum[pad : pad + n_out]
    if interior.size and interior.min() < 1e-10:
        raise ValueError(
            f"window/hop pair ({cfg.window_size}/{cfg.hop_length}) does not "
            f"satisfy the overlap-add reconstruction condition"
        )
    out = buf[pad : pad + n_out] / np.maximum(wsum[pad : pad + n_out], 1e-300)
    if length is not None and out.size < length:
        out = np.pad(out, (0, length - out.size))
    return Waveform(samples=out, sample_rate=cfg.sample_rate)


def drop_lowest_bin(S: ComplexSpectrogram) -> ComplexSpectrogram:
    """Crop the lowest frequency row (257 -> 256 bins) so U-Net halving divides evenly."""
    if S.values.shape[0] != S.config.freq_bins:
        raise ValueError(f"expected an uncropped spectrogram, got {S.values.shape[0]} bins")
    return ComplexSpectrogram(values=S.values[1:], config=S.config)


def restore_lowest_bin(S: ComplexSpectrogram) -> ComplexSpectrogram:
    """Reinsert a zero row for the cropped lowest bin before inversion."""
    if S.values.shape[0] != S.config.freq_bins - 1:
        raise ValueError(f"expected a cropped spectrogram, got {S.values.shape[0]} bins")
    zero_row = np.zeros((1, S.values.shape[1]), dtype=np.complex128)
    return ComplexSpectrogram(
        values=np.concatenate([zero_row, S.values], axis=0), config=S.config
    )


def apply_complex_mask(S_in: ComplexSpectrogram, M: ComplexMask) -> ComplexSpectrogram:
    """Elementwise complex product of a spectrogram and a mask."""
    if S_in.values.shape != M.values.shape:
        raise ValueError(
            f"shape mismatch: spectrogram {S_in.values.shape} vs mask {M.values.shape}"
        )
    return ComplexSpectrogram(values=S_in.values * M.values, config=S_in.config)


def mix_mono(l: Waveform, r: Waveform) -> Waveform:
    """Mono mixdown: the per-sample average of the two channels."""
    if l.sample_rate != r.sample_rate:
        raise ValueError("sample rates differ")
    if len(l) != len(r):
        raise ValueError(f"lengths differ: {len(l)} vs {len(r)}")
    return Waveform(samples=(l.samples + r.samples) / 2.0, sample_rate=l.sample_rate)


def diff_spectrogram(S_l: ComplexSpectrogram, S_r: ComplexSpectrogram) -> ComplexSpectrogram:
    """Half the elementwise difference of the two channel spectrograms."""
    if S_l.values.shape != S_r.values.shape:
        raise ValueError(
            f"shape mismatch: {S_l.values.shape} vs {S_r.values.shape}"
        )
    return ComplexSpectrogram(values=(S_l.values - S_r.values) / 2.0, config=S_l.config)


def mono_spectrogram(S_l: ComplexSpectrogram, S_r: ComplexSpectrogram) -> ComplexSpectrogram:
    """Half the elementwise sum; the spectrogram-domain counterpart of mix_mono."""
    if S_l.values.shape != S_r.values.shape:
        raise ValueError(
            f"shape mismatch: {S_l.values.shape} vs {S_r.values.shape}"
        )
    return ComplexSpectrogram(values=(S_l.values + S_r.values) / 2.0, config=S_l.config)


def envelope(w: Waveform) -> np.ndarray:
    """Amplitude envelope: magnitude of the analytic signal.

    Built by the full-length frequency-domain construction (zero the negative
    frequencies, double the positive ones, inverse transform).
    """
    x = w.samples
    n = x.size
    spec = np.fft.fft(x)
    h = np.zeros(n)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[0] = 1.0
        h[1 : (n + 1) // 2] = 2.0
    return np.abs(np.fft.ifft(spec * h))


def stft_distance(
    pred_l: ComplexSpectrogram,
    pred_r: ComplexSpectrogram,
    gt_l: ComplexSpectrogram,
    gt_r: ComplexSpectrogram,
) -> float:
    """Sum over channels of the Euclidean distance between complex spectrograms.

    Each complex matrix is treated as a flat real vector of (real, imag) parts.
    """
    if pred_l.values.shape != gt_l.values.shape:
        raise ValueError(
            f"left shapes differ: {pred_l.values.shape} vs {gt_l.values.shape}"
        )
    if pred_r.values.shape != gt_r.values.shape:
        raise ValueError(
            f"right shapes differ: {pred_r.values.shape} vs {gt_r.values.shape}"
        )
    d_l = np.linalg.norm(gt_l.values - pred_l.values)
    d_r = np.linalg.norm(gt_r.values - pred_r.values)
    return float(d_l + d_r)


def env_distance(
    pred_l: Waveform, pred_r: Waveform, gt_l: Waveform, gt_r: Waveform
) -> float:
    """Sum over channels of the Euclidean distance between amplitude envelopes."""
    if len(pred_l) != len(gt_l):
        raise ValueError(f"left lengths differ: {len(pred_l)} vs {len(gt_l)}")
    if len(pred_r) != len(gt_r):
        raise ValueError(f"right lengths differ: {len(pred_r)} vs {len(gt_r)}")
    d_l = np.linalg.norm(envelope(gt_l) - envelope(pred_l))
    d_r = np.linalg.norm(envelope(gt_r) - envelope(pred_r))
    return float(d_l + d_r)
