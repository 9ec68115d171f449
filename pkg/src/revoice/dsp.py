"""Framing, STFT/ISTFT, and mel filterbank features shared by the whole pipeline.

Frames are centered at t*hop by reflection-padding window_len/2 samples on
both ends, so STFT frames line up one-to-one with vocoder analysis frames.
Inversion is weighted overlap-add normalized by the summed squared window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 16000

# floor applied to mel-band power before the log, avoids -inf on silence
POWER_FLOOR = 1e-10


class SampleRateError(ValueError):
    """Input audio is not at the pipeline sample rate."""


class EmptySignalError(ValueError):
    """Operation requires a non-empty signal."""


@dataclass
class Waveform:
    """Mono audio: sample vector in [-1, 1] plus its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    """Analysis framing: 64 ms window at a 5 ms hop by default (16 kHz)."""

    window_len: int = 1024
    hop: int = 80
    fft_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len <= self.fft_size):
            raise ValueError("need hop <= window_len <= fft_size, all positive")

    @property
    def pad(self) -> int:
        return self.window_len // 2

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def bin_hz(self) -> float:
        return SAMPLE_RATE / self.fft_size

    def frame_count(self, n_samples: int) -> int:
        return int(math.ceil((n_samples + self.pad) / self.hop))

    def synth_length(self, n_frames: int) -> int:
        # inverse of frame_count: the longest signal length mapping to n_frames
        return max(self.hop, n_frames * self.hop - self.pad)

    def analysis_window(self) -> np.ndarray:
        return _periodic_window(self.window, self.window_len)


@lru_cache(maxsize=8)
def _periodic_window(name: str, length: int) -> np.ndarray:
    return get_window(name, length, fftbins=True).astype(np.float64)


@dataclass
class Spectrogram:
    """Complex STFT frames (T x fft_size/2+1) plus framing metadata."""

    frames: np.ndarray
    config: FrameConfig
    origin_len: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.n_bins:
            raise ValueError(
                f"expected {self.config.n_bins} bins, got shape {self.frames.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def power(self) -> np.ndarray:
        return np.abs(self.frames) ** 2


def frame_signal(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Slice a signal into centered frames (T x window_len), unwindowed.

    Frame t is centered at sample t*hop of the original signal; the edges are
    reflection-padded. Shared by the STFT and the vocoder so that both see
    exactly the same framing.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise EmptySignalError("cannot frame an empty signal")
    n_frames = cfg.frame_count(n)
    mode = "reflect" if n > 1 else "edge"
    padded = np.pad(x, (cfg.pad, cfg.pad), mode=mode)
    need = (n_frames - 1) * cfg.hop + cfg.window_len
    if padded.shape[0] < need:
        padded = np.pad(padded, (0, need - padded.shape[0]))
    view = sliding_window_view(padded, cfg.window_len)[:: cfg.hop]
    return np.ascontiguousarray(view[:n_frames])


def stft(wave: Waveform, cfg: FrameConfig | None = None) -> Spectrogram:
    """Short-time Fourier transform with centered frames."""
    cfg = cfg or FrameConfig()
    if wave.sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"expected {SAMPLE_RATE} Hz, got {wave.sample_rate}")
    frames = frame_signal(wave.samples, cfg) * cfg.analysis_window()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return Spectrogram(spec, cfg, len(wave))


def overlap_add(frames_spec: np.ndarray, cfg: FrameConfig, origin_len: int) -> np.ndarray:
    """Invert complex frames by weighted overlap-add, trimmed to origin_len."""
    n_frames = frames_spec.shape[0]
    w = cfg.analysis_window()
    time_frames = np.fft.irfft(frames_spec, n=cfg.fft_size, axis=1)[:, : cfg.window_len]
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    y = np.zeros(total)
    den = np.zeros(total)
    w2 = w * w
    for t in range(n_frames):
        start = t * cfg.hop
        y[start : start + cfg.window_len] += time_frames[t] * w
        den[start : start + cfg.window_len] += w2
    y = y / np.maximum(den, 1e-12)
    return y[cfg.pad : cfg.pad + origin_len]


def istft(spec: Spectrogram) -> Waveform:
    """Inverse STFT; exact reconstruction away from the padded edges."""
    if spec.frames.shape[1] != spec.config.n_bins:
        raise ValueError("bin count inconsistent with frame config")
    y = overlap_add(spec.frames, spec.config, spec.origin_len)
    return Waveform(y, SAMPLE_RATE)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters on FFT bins, each peak-normalized to 1."""

    weights: np.ndarray  # (n_mels, n_bins)
    f_min: float
    f_max: float
    centers_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def build_mel_filterbank(
    n_mels: int = 80,
    cfg: FrameConfig | None = None,
    f_min: float = 0.0,
    f_max: float = 8000.0,
) -> MelFilterbank:
    """Build n_mels triangular filters equally spaced on the mel scale."""
    cfg = cfg or FrameConfig()
    nyquist = SAMPLE_RATE / 2
    if not (0 <= f_min < f_max <= nyquist):
        raise ValueError(f"need 0 <= f_min < f_max <= {nyquist}")
    if n_mels < 2:
        raise ValueError("need at least 2 mel filters")

    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(cfg.n_bins) * cfg.bin_hz

    weights = np.zeros((n_mels, cfg.n_bins))
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        tri = np.minimum(rising, falling)
        weights[i] = np.clip(tri, 0.0, None)
        peak = weights[i].max()
        if peak <= 0:
            raise ValueError(
                f"filter {i} has no support on the FFT grid; "
                f"reduce n_mels or widen [f_min, f_max]"
            )
        weights[i] /= peak
    return MelFilterbank(weights, float(f_min), float(f_max), hz_pts[1:-1])


def log_mel(spec: Spectrogram, fb: MelFilterbank) -> np.ndarray:
    """Natural-log mel-band power, floored at POWER_FLOOR before the log."""
    if fb.weights.shape[1] != spec.config.n_bins:
        raise ValueError(
            f"filterbank built for {fb.weights.shape[1]} bins, "
            f"spectrogram has {spec.config.n_bins}"
        )
    mel_power = spec.power() @ fb.weights.T
    return np.log(np.maximum(mel_power, POWER_FLOOR))
