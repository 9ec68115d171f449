"""Simplified parametric vocoder: waveform to per-frame acoustic parameters and back.

Analysis emits, per 5 ms frame: 60 mel-cepstral coefficients of the spectral
envelope (log-power convention, coefficient 0 carries gain), 5 band
aperiodicity ratios in dB (0 dB = fully aperiodic), log-F0 interpolated
through unvoiced stretches, and a voiced/unvoiced flag. Synthesis excites a
minimum-phase envelope filter with a pulse train / white noise mixture, band
by band, and assembles frames by overlap-add.

Internals are deliberately plain: normalized-autocorrelation pitch tracking,
pitch-adaptive spectral smoothing for the envelope, and a harmonic-vs-noise
energy split for aperiodicity. Parameter shapes match the usual 60/5/1/1
statistical-synthesis layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .dsp import (
    SAMPLE_RATE,
    EmptySignalError,
    FrameConfig,
    Spectrogram,
    Waveform,
    frame_signal,
    istft,
)

F0_FLOOR = 50.0
F0_CEIL = 550.0
MCEP_ORDER = 60
MCEP_WARP = 0.58  # standard all-pass warp for 16 kHz
N_BAP_BANDS = 5
BAP_BAND_EDGES_HZ = (0.0, 1000.0, 2000.0, 4000.0, 6000.0, 8000.0)
BAP_FLOOR_DB = -60.0
VOICING_THRESHOLD = 0.45
SILENCE_RMS = 1e-4
# unvoiced frames get their envelope smoothed with this bandwidth
UNVOICED_SMOOTH_HZ = 200.0
ENVELOPE_FLOOR = 1e-12

TRACK_MAGIC = b"PVT1"


class FrameCountError(ValueError):
    """Frame counts of two per-frame inputs disagree."""


class TrackFormatError(ValueError):
    """Acoustic track file is malformed."""


@dataclass
class F0Track:
    """Per-frame F0 in Hz (0 on unvoiced frames) and voicing decisions."""

    f0: np.ndarray
    vuv: np.ndarray
    hop_ms: float = 5.0

    def __len__(self):
        return self.f0.shape[0]


@dataclass
class AcousticTrack:
    """Per-frame vocoder parameters: mcep (T,60), bap (T,5), lf0 (T,), vuv (T,)."""

    mcep: np.ndarray
    bap: np.ndarray
    lf0: np.ndarray
    vuv: np.ndarray
    frame_hop_ms: float = 5.0
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return self.mcep.shape[0]

    def f0_track(self) -> F0Track:
        f0 = np.where(self.vuv, np.exp(self.lf0), 0.0)
        return F0Track(f0, self.vuv.astype(bool), self.frame_hop_ms)


# ---------------------------------------------------------------------------
# F0 estimation


def estimate_f0(
    wave: Waveform,
    hop_ms: float = 5.0,
    f_lo: float = F0_FLOOR,
    f_hi: float = F0_CEIL,
    voicing_threshold: float = VOICING_THRESHOLD,
    silence_rms: float = SILENCE_RMS,
    cfg: FrameConfig | None = None,
) -> F0Track:
    """Normalized-autocorrelation pitch tracking at the analysis frame rate.

    A frame is voiced iff the best autocorrelation peak in the candidate lag
    range exceeds the voicing threshold and the frame is not silent. Among
    peaks close to the best one the shortest lag wins, which suppresses
    octave-down errors on strongly periodic frames. Voiced runs are median
    filtered (length 5).
    """
    cfg = cfg or FrameConfig()
    if abs(cfg.hop / wave.sample_rate * 1000.0 - hop_ms) > 1e-9:
        raise ValueError("hop_ms inconsistent with frame config")
    if f_lo >= f_hi:
        raise ValueError("need f_lo < f_hi")
    if len(wave) == 0:
        raise EmptySignalError("cannot estimate F0 of an empty signal")

    sr = wave.sample_rate
    frames = frame_signal(wave.samples, cfg)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    frames = frames - frames.mean(axis=1, keepdims=True)  # DC defeats lag search
    n_frames, win = frames.shape
    lag_lo = max(2, int(np.floor(sr / f_hi)))
    lag_hi = int(np.ceil(sr / f_lo))
    if lag_hi + 8 >= win:
        raise ValueError("analysis window too short for the requested f_lo")

    base_len = win - lag_hi - 1  # leaves room for the lag_hi + 1 interpolation point
    base = frames[:, :base_len]
    nfft = 1 << int(np.ceil(np.log2(win + lag_hi + 1)))
    spec_full = np.fft.rfft(frames, n=nfft, axis=1)
    spec_base = np.fft.rfft(base, n=nfft, axis=1)
    # corr[t, tau] = sum_n base[t, n] * frames[t, n + tau]
    corr = np.fft.irfft(np.conj(spec_base) * spec_full, n=nfft, axis=1)[:, : lag_hi + 2]

    energy_base = np.sum(base * base, axis=1)
    csum = np.concatenate(
        [np.zeros((n_frames, 1)), np.cumsum(frames * frames, axis=1)], axis=1
    )
    lags_all = np.arange(lag_hi + 2)
    energy_shift = csum[:, lags_all + base_len] - csum[:, lags_all]
    r = corr / np.sqrt(energy_base[:, None] * energy_shift + 1e-20)

    rr = r[:, lag_lo : lag_hi + 1]
    left = np.concatenate([np.full((n_frames, 1), -np.inf), rr[:, :-1]], axis=1)
    right = np.concatenate([rr[:, 1:], np.full((n_frames, 1), -np.inf)], axis=1)
    is_peak = (rr >= left) & (rr > right)
    best = rr.max(axis=1)
    voiced = (best > voicing_threshold) & (rms > silence_rms)

    f0 = np.zeros(n_frames)
    vi = np.flatnonzero(voiced)
    if vi.size:
        # pass 1: shortest strong peak per frame (suppresses octave-down errors)
        strong = is_peak & (rr >= np.maximum(voicing_threshold, 0.87 * best)[:, None])
        voiced &= strong.any(axis=1)
        vi = np.flatnonzero(voiced)
        tau = np.argmax(strong[vi], axis=1) + lag_lo
        f0[vi] = sr / np.maximum(tau, 1)
        f0, voiced = _fix_harmonic_jumps(f0, voiced, f_lo, f_hi)
        reference = _median_smooth_voiced(f0, voiced, size=13)

        # pass 2: among all credible peaks, prefer the one nearest the local
        # reference contour; onset/offset frames with straddling windows
        # otherwise lock onto spurious periods
        vi = np.flatnonzero(voiced)
        candidates = is_peak & (rr >= np.maximum(voicing_threshold, 0.75 * best)[:, None])
        for t in vi:
            lags = np.flatnonzero(candidates[t]) + lag_lo
            cand_f0 = sr / lags
            pick = int(np.argmin(np.abs(np.log(cand_f0 / reference[t]))))
            tau_t = lags[pick]
            rm, r0, rp = r[t, tau_t - 1], r[t, tau_t], r[t, tau_t + 1]
            denom = rm - 2.0 * r0 + rp
            delta = 0.5 * (rm - rp) / denom if abs(denom) > 1e-12 else 0.0
            f0[t] = np.clip(sr / (tau_t + np.clip(delta, -0.5, 0.5)), f_lo, f_hi)

        f0 = _median_smooth_voiced(f0, voiced)
        f0, voiced = _fix_harmonic_jumps(f0, voiced, f_lo, f_hi)
        f0 = _median_smooth_voiced(f0, voiced)

    return F0Track(f0, voiced, hop_ms)


def _fix_harmonic_jumps(f0, vuv, f_lo, f_hi):
    """Snap octave/harmonic errors back toward the utterance's voiced median.

    Low-energy frames (fading vowel tails, padding-dominated edge frames)
    sometimes lock onto a formant at an integer multiple of the true F0.
    Frames off the voiced median by a near exact factor of 2 or 3 are
    rescaled; frames that stay inconsistent by more than 50% are unvoiced.
    Vibrato and drift stay far below these factors.
    """
    f0 = f0.copy()
    vuv = vuv.copy()
    idx = np.flatnonzero(vuv)
    if idx.size == 0:
        return f0, vuv
    center = np.median(f0[idx])
    for t in idx:
        ratio = f0[t] / center
        for factor in (3.0, 2.0, 1.0 / 2.0, 1.0 / 3.0):
            if abs(np.log(ratio / factor)) < np.log(1.15):
                f0[t] = np.clip(f0[t] / factor, f_lo, f_hi)
                break
        if abs(np.log(f0[t] / center)) > np.log(1.5):
            f0[t] = 0.0
            vuv[t] = False
    return f0, vuv


def _median_smooth_voiced(f0: np.ndarray, vuv: np.ndarray, size: int = 5) -> np.ndarray:
    out = f0.copy()
    idx = np.flatnonzero(vuv)
    if idx.size == 0:
        return out
    breaks = np.where(np.diff(idx) > 1)[0] + 1
    for run in np.split(idx, breaks):
        # median_filter misbehaves when the kernel exceeds the array length
        eff = min(size, run.size if run.size % 2 else run.size - 1)
        if eff >= 3:
            out[run] = ndimage.median_filter(f0[run], size=eff, mode="nearest")
    return out


# ---------------------------------------------------------------------------
# Spectral envelope


def _windowed_power(wave: Waveform, cfg: FrameConfig, normalize: bool) -> np.ndarray:
    w = cfg.analysis_window()
    frames = frame_signal(wave.samples, cfg) * w
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    if normalize:
        power /= np.sum(w * w)
    return power


def _box_smooth(row: np.ndarray, half: int) -> np.ndarray:
    n = row.shape[0]
    cs = np.concatenate([[0.0], np.cumsum(row)])
    k = np.arange(n)
    lo = np.maximum(k - half, 0)
    hi = np.minimum(k + half + 1, n)
    return (cs[hi] - cs[lo]) / (hi - lo)


def estimate_envelope(
    wave: Waveform, f0: F0Track, cfg: FrameConfig | None = None
) -> np.ndarray:
    """Smooth per-frame power envelope (T x fft_size/2+1), strictly positive.

    The windowed power spectrum is smoothed across frequency with a boxcar of
    width equal to the frame's F0 (so the harmonic comb averages out), applied
    twice for a triangular response; 200 Hz on unvoiced frames. Power is
    window-compensated, i.e. unit-variance white noise gives an envelope near 1.
    """
    cfg = cfg or FrameConfig()
    power = _windowed_power(wave, cfg, normalize=True)
    if power.shape[0] != len(f0):
        raise FrameCountError(
            f"envelope framing gives {power.shape[0]} frames, F0 track has {len(f0)}"
        )
    width_hz = np.where(f0.vuv, f0.f0, UNVOICED_SMOOTH_HZ)
    halves = np.clip(np.round(width_hz / (2.0 * cfg.bin_hz)), 1, 64).astype(int)
    env = np.empty_like(power)
    for t in range(power.shape[0]):
        env[t] = _box_smooth(_box_smooth(power[t], halves[t]), halves[t])
    return np.maximum(env, ENVELOPE_FLOOR)


# ---------------------------------------------------------------------------
# Mel-cepstrum

def _warp_frequency(omega: np.ndarray, alpha: float) -> np.ndarray:
    # phase response of the first-order all-pass; inverse map is alpha -> -alpha
    return omega + 2.0 * np.arctan2(alpha * np.sin(omega), 1.0 - alpha * np.cos(omega))


@lru_cache(maxsize=8)
def _mcep_synthesis_basis(n_bins: int, order: int, warp: float) -> np.ndarray:
    """Basis B with log_power(bin k) = sum_m B[k, m] * mcep[m]."""
    omega = np.linspace(0.0, np.pi, n_bins)
    warped = _warp_frequency(omega, warp)
    m = np.arange(order)
    basis = np.cos(np.outer(warped, m))
    basis[:, 1:] *= 2.0
    return basis


@lru_cache(maxsize=8)
def _warped_sampling(n_bins: int, warp: float):
    """Indices/fractions that resample a linear-frequency row onto the warped axis."""
    omega_w = np.linspace(0.0, np.pi, n_bins)
    omega = _warp_frequency(omega_w, -warp)
    pos = omega / np.pi * (n_bins - 1)
    idx = np.clip(np.floor(pos).astype(int), 0, n_bins - 2)
    frac = pos - idx
    return idx, frac


def envelope_to_mcep(
    env: np.ndarray, order: int = MCEP_ORDER, warp: float = MCEP_WARP
) -> np.ndarray:
    """Warped cepstrum of the log power envelope, truncated to `order` terms.

    Convention: reconstruction is log P(w) = c0 + 2 sum_m c_m cos(m w~), so a
    flat envelope of power p maps to mcep[0] = ln(p) with all higher terms 0,
    and adding d to mcep[0] scales power by exp(d).
    """
    env = np.atleast_2d(np.asarray(env, dtype=np.float64))
    if np.any(env <= 0) or not np.all(np.isfinite(env)):
        raise ValueError("envelope must be strictly positive and finite")
    n_bins = env.shape[1]
    fft_size = 2 * (n_bins - 1)
    idx, frac = _warped_sampling(n_bins, warp)
    log_env = np.log(env)
    warped = log_env[:, idx] * (1.0 - frac) + log_env[:, idx + 1] * frac
    cep = np.fft.irfft(warped, n=fft_size, axis=1)
    return cep[:, :order].copy()


def mcep_to_envelope(
    mcep: np.ndarray, cfg: FrameConfig | None = None, warp: float = MCEP_WARP
) -> np.ndarray:
    """Reconstruct a smooth power envelope (T x fft_size/2+1) from mel-cepstra."""
    cfg = cfg or FrameConfig()
    mcep = np.atleast_2d(np.asarray(mcep, dtype=np.float64))
    basis = _mcep_synthesis_basis(cfg.n_bins, mcep.shape[1], warp)
    return np.exp(mcep @ basis.T)


def _minimum_phase_spectrum(mcep: np.ndarray, cfg: FrameConfig, warp: float) -> np.ndarray:
    """Minimum-phase frequency response with |H|^2 equal to the mcep envelope."""
    basis = _mcep_synthesis_basis(cfg.n_bins, mcep.shape[1], warp)
    log_amp = 0.5 * (mcep @ basis.T)  # log amplitude on the linear grid
    n = cfg.fft_size
    cep = np.fft.irfft(log_amp, n=n, axis=1)
    folded = np.zeros_like(cep)
    folded[:, 0] = cep[:, 0]
    folded[:, 1 : n // 2] = 2.0 * cep[:, 1 : n // 2]
    folded[:, n // 2] = cep[:, n // 2]
    return np.exp(np.fft.rfft(folded, n=n, axis=1))


# ---------------------------------------------------------------------------
# Band aperiodicity


@lru_cache(maxsize=8)
def _band_slices(fft_size: int, edges_hz: tuple) -> list:
    bin_hz = SAMPLE_RATE / fft_size
    n_bins = fft_size // 2 + 1
    bounds = [int(round(e / bin_hz)) for e in edges_hz]
    bounds[-1] = n_bins
    return [slice(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def estimate_band_aperiodicity(
    wave: Waveform,
    f0: F0Track,
    cfg: FrameConfig | None = None,
    band_edges_hz: tuple = BAP_BAND_EDGES_HZ,
) -> np.ndarray:
    """Aperiodic-to-total power ratio (dB <= 0) in 5 bands per frame.

    On voiced frames, bins near harmonics of F0 are masked out and the noise
    power density is extrapolated from the remaining bins; the ratio of that
    extrapolated noise power to total band power is the aperiodicity.
    Unvoiced frames are fully aperiodic (0 dB) by convention.
    """
    cfg = cfg or FrameConfig()
    power = _windowed_power(wave, cfg, normalize=False)
    if power.shape[0] != len(f0):
        raise FrameCountError(
            f"aperiodicity framing gives {power.shape[0]} frames, F0 track has {len(f0)}"
        )
    slices = _band_slices(cfg.fft_size, tuple(band_edges_hz))
    n_bins = cfg.n_bins
    bap = np.zeros((power.shape[0], len(slices)))
    bins = np.arange(n_bins)

    for t in np.flatnonzero(f0.vuv):
        hz = f0.f0[t]
        spacing = hz / cfg.bin_hz
        half = max(1, min(3, int(0.3 * spacing)))
        n_harm = int((SAMPLE_RATE / 2) / hz)
        centers = np.round(np.arange(1, n_harm + 1) * spacing).astype(int)
        mask = np.zeros(n_bins, dtype=bool)
        for c in centers:
            mask[max(0, c - half) : min(n_bins, c + half + 1)] = True
        unmasked = ~mask
        global_density = (
            power[t, unmasked].mean() if unmasked.any() else power[t].mean()
        )
        for b, sl in enumerate(slices):
            band_power = power[t, sl].sum()
            open_bins = unmasked[sl]
            if open_bins.sum() >= 2:
                density = power[t, sl][open_bins].mean()
            else:
                density = global_density
            n_band = sl.stop - sl.start
            ratio = np.clip(density * n_band / max(band_power, 1e-300), 1e-6, 1.0)
            bap[t, b] = 10.0 * np.log10(ratio)
    return np.clip(bap, BAP_FLOOR_DB, 0.0)


# ---------------------------------------------------------------------------
# Full analysis / synthesis


def _interpolate_lf0(f0: F0Track, f_lo: float, f_hi: float) -> np.ndarray:
    n = len(f0)
    vi = np.flatnonzero(f0.vuv)
    if vi.size == 0:
        return np.full(n, np.log(np.sqrt(f_lo * f_hi)))
    lf0_v = np.log(f0.f0[vi])
    return np.interp(np.arange(n), vi, lf0_v)


def analyze(
    wave: Waveform,
    cfg: FrameConfig | None = None,
    f_lo: float = F0_FLOOR,
    f_hi: float = F0_CEIL,
    order: int = MCEP_ORDER,
    warp: float = MCEP_WARP,
) -> AcousticTrack:
    """Full vocoder analysis; frame count matches the STFT of the same wave."""
    cfg = cfg or FrameConfig()
    f0 = estimate_f0(wave, f_lo=f_lo, f_hi=f_hi, cfg=cfg)
    env = estimate_envelope(wave, f0, cfg)
    mcep = envelope_to_mcep(env, order=order, warp=warp)
    bap = estimate_band_aperiodicity(wave, f0, cfg)
    lf0 = _interpolate_lf0(f0, f_lo, f_hi)
    return AcousticTrack(mcep, bap, lf0, f0.vuv.astype(bool))


def synthesize(
    track: AcousticTrack,
    seed: int = 0,
    cfg: FrameConfig | None = None,
    warp: float = MCEP_WARP,
    band_edges_hz: tuple = BAP_BAND_EDGES_HZ,
) -> Waveform:
    """Resynthesize audio from an acoustic track, deterministic for a seed.

    Per frame, the excitation spectrum is a band-weighted mixture of a glottal
    pulse train at exp(lf0) and white noise, shaped by the minimum-phase filter
    of the mcep envelope, then frames are assembled by overlap-add. The output
    is trimmed so that re-analysis yields the same frame count.
    """
    for name, arr in (("mcep", track.mcep), ("bap", track.bap), ("lf0", track.lf0)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in track.{name}")
    cfg = cfg or FrameConfig()
    n_frames = len(track)
    out_len = cfg.synth_length(n_frames)
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    sr = track.sample_rate

    centers = cfg.pad + np.arange(n_frames) * cfg.hop
    f0_frame = np.exp(np.clip(track.lf0, np.log(F0_FLOOR), np.log(F0_CEIL)))
    f0_sample = np.interp(np.arange(total), centers, f0_frame)

    phase = np.cumsum(2.0 * np.pi * f0_sample / sr)
    wrapped = np.mod(phase, 2.0 * np.pi)
    pulse_at = np.flatnonzero(np.diff(wrapped) < 0) + 1
    pulse = np.zeros(total)
    pulse[pulse_at] = np.sqrt(sr / f0_sample[pulse_at])

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(total)

    w = cfg.analysis_window()
    view = sliding_window_view(np.ascontiguousarray(pulse), cfg.window_len)[:: cfg.hop]
    pulse_frames = view[:n_frames] * w
    view = sliding_window_view(np.ascontiguousarray(noise), cfg.window_len)[:: cfg.hop]
    noise_frames = view[:n_frames] * w
    pulse_spec = np.fft.rfft(pulse_frames, n=cfg.fft_size, axis=1)
    noise_spec = np.fft.rfft(noise_frames, n=cfg.fft_size, axis=1)

    ratio = 10.0 ** (np.clip(track.bap, BAP_FLOOR_DB, 0.0) / 10.0)
    w_noise = np.sqrt(ratio)
    w_pulse = np.sqrt(1.0 - ratio)
    unvoiced = ~track.vuv.astype(bool)
    w_noise[unvoiced] = 1.0
    w_pulse[unvoiced] = 0.0

    slices = _band_slices(cfg.fft_size, tuple(band_edges_hz))
    counts = [sl.stop - sl.start for sl in slices]
    w_noise_bins = np.repeat(w_noise, counts, axis=1)
    w_pulse_bins = np.repeat(w_pulse, counts, axis=1)

    filt = _minimum_phase_spectrum(track.mcep, cfg, warp)
    mixed = (pulse_spec * w_pulse_bins + noise_spec * w_noise_bins) * filt

    wave = istft(Spectrogram(mixed, cfg, out_len))
    peak = np.max(np.abs(wave.samples)) if len(wave) else 0.0
    if peak > 0.99:
        wave.samples = wave.samples * (0.99 / peak)
    return wave


# ---------------------------------------------------------------------------
# Track file format: "PVT1", u32 T, u32 col counts (60, 5, 1, 1), f32 rows


def save_track(track: AcousticTrack, path) -> None:
    n = len(track)
    header = TRACK_MAGIC + struct.pack(
        "<5I", n, track.mcep.shape[1], track.bap.shape[1], 1, 1
    )
    rows = np.concatenate(
        [
            track.mcep,
            track.bap,
            track.lf0[:, None],
            track.vuv.astype(np.float64)[:, None],
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes())


def load_track(path) -> AcousticTrack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != TRACK_MAGIC:
        raise TrackFormatError(f"{path}: not an acoustic track file")
    n, n_mcep, n_bap, n_lf0, n_vuv = struct.unpack("<5I", blob[4:24])
    cols = n_mcep + n_bap + n_lf0 + n_vuv
    expect = 24 + 4 * n * cols
    if len(blob) != expect:
        raise TrackFormatError(f"{path}: truncated or oversized track payload")
    rows = np.frombuffer(blob, dtype="<f4", offset=24).reshape(n, cols).astype(np.float64)
    mcep = rows[:, :n_mcep]
    bap = rows[:, n_mcep : n_mcep + n_bap]
    lf0 = rows[:, n_mcep + n_bap]
    vuv = rows[:, n_mcep + n_bap + n_lf0] > 0.5
    return AcousticTrack(mcep, bap, lf0, vuv)
