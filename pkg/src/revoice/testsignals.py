"""Synthetic speech-like signals for self-tests, demos, and desk corpora.

Real corpora are licensed, so the desk-scale experiments run on generated
vowel sequences: glottal pulse trains with drifting F0 shaped by formant
resonators, with short silences at the edges. Noise files are colored noise
bursts. Everything is a pure function of the supplied RNG.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .corpus import save_wav
from .dsp import SAMPLE_RATE, Waveform

VOWEL_FORMANTS = {
    "a": ((730, 90), (1090, 110), (2440, 160)),
    "i": ((270, 60), (2290, 100), (3010, 170)),
    "u": ((300, 65), (870, 110), (2240, 140)),
    "e": ((530, 80), (1840, 110), (2480, 150)),
}


def resonator_coeffs(freq_hz: float, bandwidth_hz: float, sr: int = SAMPLE_RATE):
    r = np.exp(-np.pi * bandwidth_hz / sr)
    theta = 2.0 * np.pi * freq_hz / sr
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def pulse_train(f0_curve: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    phase = np.cumsum(2.0 * np.pi * f0_curve / sr)
    wrapped = np.mod(phase, 2.0 * np.pi)
    out = np.zeros_like(f0_curve)
    hits = np.flatnonzero(np.diff(wrapped) < 0) + 1
    out[hits] = 1.0
    return out


def sawtooth(f0: float, duration: float, amplitude: float = 0.5,
             band_limit: float = 7200.0, sr: int = SAMPLE_RATE) -> Waveform:
    """Band-limited sawtooth by additive synthesis (no aliasing)."""
    t = np.arange(int(duration * sr)) / sr
    n_harm = int(band_limit / f0)
    x = np.zeros_like(t)
    for m in range(1, n_harm + 1):
        x += np.sin(2.0 * np.pi * m * f0 * t) / m
    x *= amplitude / np.max(np.abs(x))
    return Waveform(x, sr)


def vowel_sequence(
    rng: np.random.Generator,
    duration: float = 1.0,
    f0_range=(120.0, 260.0),
    edge_silence: float = 0.04,
    amplitude: float = 0.45,
    sr: int = SAMPLE_RATE,
) -> Waveform:
    """A few concatenated vowels with a drifting F0 contour and silent edges."""
    n = int(duration * sr)
    f0_lo, f0_hi = f0_range
    base = rng.uniform(f0_lo * 1.1, f0_hi * 0.9)
    t = np.arange(n) / sr
    drift = 1.0 + 0.06 * np.sin(2.0 * np.pi * rng.uniform(0.4, 1.2) * t + rng.uniform(0, 6))
    vibrato = 1.0 + 0.01 * np.sin(2.0 * np.pi * 5.5 * t)
    f0_curve = np.clip(base * drift * vibrato, f0_lo, f0_hi)

    # glottal spectral tilt: raw impulses would let narrow formants ring as
    # loudly as the fundamental, which real voices do not do; the pulse train
    # is de-meaned first so the one-pole shaping does not build up DC
    pulses = pulse_train(f0_curve, sr)
    excitation = lfilter([1.0], [1.0, -0.96], pulses - pulses.mean())
    excitation += 0.02 * np.std(excitation) * rng.standard_normal(n)  # breathiness

    vowels = rng.choice(list(VOWEL_FORMANTS), size=max(2, int(duration / 0.35)))
    seg_len = n // len(vowels)
    out = np.zeros(n)
    for k, name in enumerate(vowels):
        start = k * seg_len
        stop = n if k == len(vowels) - 1 else (k + 1) * seg_len
        seg = excitation[start:stop]
        y = np.zeros_like(seg)
        for freq, bw in VOWEL_FORMANTS[name]:
            b, a = resonator_coeffs(freq, bw, sr)
            y += lfilter(b, a, seg)
        out[start:stop] = y

    sil = int(edge_silence * sr)
    if sil > 0:
        ramp = np.linspace(0.0, 1.0, sil)
        out[:sil] *= ramp
        out[-sil:] *= ramp[::-1]
        out[: sil // 2] = 0.0
        out[-(sil // 2) :] = 0.0
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= amplitude / peak
    return Waveform(out, sr)


def colored_noise(
    rng: np.random.Generator,
    duration: float,
    amplitude: float = 0.3,
    sr: int = SAMPLE_RATE,
) -> Waveform:
    """Noise burst with a random mild spectral tilt or band emphasis."""
    n = int(duration * sr)
    x = rng.standard_normal(n)
    kind = rng.integers(3)
    if kind == 1:  # lowpass-ish rumble
        b, a = resonator_coeffs(rng.uniform(150, 500), 400, sr)
        x = lfilter(b, a, x)
    elif kind == 2:  # band emphasis
        b, a = resonator_coeffs(rng.uniform(800, 3200), 900, sr)
        x = x + 2.0 * lfilter(b, a, x)
    x *= amplitude / np.max(np.abs(x))
    return Waveform(x, sr)


def write_desk_corpus(
    root,
    n_clean: int,
    n_noise: int,
    seed: int = 0,
    speakers=None,
    duration_range=(0.8, 1.1),
    noise_duration: float = 3.0,
):
    """Write a synthetic clean/noise WAV corpus; returns (clean_dir, noise_dir).

    `speakers` maps a name prefix to an F0 range, e.g.
    {"spka": (110, 160), "spkb": (200, 280)}; utterances are split evenly
    across speakers and named <speaker>_uttNNN.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    clean_dir = root / "clean"
    noise_dir = root / "noise"
    clean_dir.mkdir(parents=True, exist_ok=True)
    noise_dir.mkdir(parents=True, exist_ok=True)

    if speakers is None:
        speakers = {"utt": (120.0, 260.0)}
    names = sorted(speakers)
    for i in range(n_clean):
        speaker = names[i % len(names)]
        dur = rng.uniform(*duration_range)
        wave = vowel_sequence(rng, dur, f0_range=speakers[speaker])
        save_wav(clean_dir / f"{speaker}_utt{i:03d}.wav", wave)
    for i in range(n_noise):
        save_wav(noise_dir / f"noise{i:03d}.wav", colored_noise(rng, noise_duration))
    return clean_dir, noise_dir
