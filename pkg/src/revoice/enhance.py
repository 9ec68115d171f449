"""End-to-end enhancement systems producing waveforms from noisy (or clean) audio.

Parametric resynthesis (PR) predicts clean vocoder parameters from noisy
log-mel features and resynthesizes; PR-clean is the same model fed clean
input. VED is the vocoder round trip. The mask baselines (oracle Wiener,
DNN-predicted ratio mask) scale the noisy magnitude and keep the noisy phase.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass

import numpy as np

from . import dsp, features, nnet, vocoder
from .dsp import FrameConfig, MelFilterbank, Spectrogram, Waveform

# predicted-unvoiced frames with log power below this count as silence
SILENCE_MCEP0 = np.log(1e-8)


class SystemKind(enum.Enum):
    PR = "pr"
    PR_CLEAN = "pr_clean"
    VED = "ved"
    OWM = "owm"
    DNN_IRM = "dnn_irm"
    NOISY_PASSTHROUGH = "noisy"


@dataclass
class Mask:
    """Real-valued ratio mask in [0, 1] over STFT bins."""

    values: np.ndarray
    config: FrameConfig

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)
        if self.values.shape[1] != self.config.n_bins:
            raise ValueError("mask bin count does not match frame config")


def oracle_wiener_mask(clean_spec: Spectrogram, noise_spec: Spectrogram) -> Mask:
    """|S|^2 / (|S|^2 + |N|^2) per bin; 0/0 maps to 0."""
    if clean_spec.frames.shape != noise_spec.frames.shape:
        raise ValueError("clean and noise spectrograms must be aligned")
    s2 = clean_spec.power()
    n2 = noise_spec.power()
    den = s2 + n2
    with np.errstate(invalid="ignore"):
        m = np.where(den > 0, s2 / np.maximum(den, 1e-300), 0.0)
    return Mask(m, clean_spec.config)


def apply_mask(noisy_spec: Spectrogram, mask: Mask) -> Waveform:
    """Scale noisy magnitudes by the mask, keep noisy phase, invert."""
    if mask.values.shape != noisy_spec.frames.shape:
        raise ValueError("mask shape does not match spectrogram")
    masked = Spectrogram(
        noisy_spec.frames * mask.values, noisy_spec.config, noisy_spec.origin_len
    )
    return dsp.istft(masked)


def irm_mel_targets(
    clean_spec: Spectrogram, noise_spec: Spectrogram, fb: MelFilterbank
) -> np.ndarray:
    """Ideal ratio mask on mel-band energies, the DNN-IRM training target."""
    if clean_spec.frames.shape != noise_spec.frames.shape:
        raise ValueError("clean and noise spectrograms must be aligned")
    mel_s = clean_spec.power() @ fb.weights.T
    mel_n = noise_spec.power() @ fb.weights.T
    return np.clip(mel_s / (mel_s + mel_n + 1e-12), 0.0, 1.0)


def expand_mel_mask(mel_mask: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Lift a mel-domain mask to linear frequency via the normalized transpose.

    Each linear bin takes the filter-weighted average of the mel values
    covering it; bins outside every filter's support fall back to 1
    (passthrough), which only affects DC and the band above f_max.
    """
    coverage = fb.weights.sum(axis=0)
    weights = fb.weights / np.maximum(coverage, 1e-12)[None, :]
    lifted = np.clip(np.asarray(mel_mask) @ weights, 0.0, 1.0)
    return np.where(coverage > 1e-8, lifted, 1.0)


def project_mask_to_mel(linear_mask: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Filter-weighted average of a linear-frequency mask per mel band."""
    den = fb.weights.sum(axis=1)
    return (np.asarray(linear_mask) @ fb.weights.T) / den[None, :]


def _model_input(wave: Waveform, fb: MelFilterbank, cfg: FrameConfig) -> np.ndarray:
    lm = dsp.log_mel(dsp.stft(wave, cfg), fb)
    return features.stack_context(lm)


def predict_track(
    model: nnet.Model,
    norm_in: features.Normalizer,
    norm_tgt: features.Normalizer,
    wave: Waveform,
    fb: MelFilterbank,
    cfg: FrameConfig,
    mode: str = "mlpg",
) -> vocoder.AcousticTrack:
    """Run the PR prediction stage: wave -> predicted acoustic track."""
    x = norm_in.apply(_model_input(wave, fb, cfg))
    if x.shape[1] != model.config.input_dim:
        raise nnet.CheckpointError(
            f"model expects input dim {model.config.input_dim}, features give {x.shape[1]}"
        )
    pred = forward_utterance(model, x)
    return features.disassemble_targets(pred, norm_tgt, mode)


def forward_utterance(model: nnet.Model, x: np.ndarray) -> np.ndarray:
    return np.asarray(nnet.forward(model, x.astype(np.float32)), dtype=np.float64)


def pr_enhance(
    model: nnet.Model,
    norm_in: features.Normalizer,
    norm_tgt: features.Normalizer,
    wave: Waveform,
    fb: MelFilterbank,
    cfg: FrameConfig | None = None,
    mode: str = "mlpg",
    seed: int = 0,
) -> Waveform:
    """Parametric resynthesis: predict clean vocoder parameters, resynthesize."""
    cfg = cfg or FrameConfig()
    track = predict_track(model, norm_in, norm_tgt, wave, fb, cfg, mode)
    return vocoder.synthesize(track, seed=seed, cfg=cfg)


def ved(wave: Waveform, cfg: FrameConfig | None = None, seed: int = 0) -> Waveform:
    """Vocoder encode-decode: the fidelity ceiling of resynthesis systems."""
    cfg = cfg or FrameConfig()
    return vocoder.synthesize(vocoder.analyze(wave, cfg), seed=seed, cfg=cfg)


def irm_enhance(
    model: nnet.Model,
    norm_in: features.Normalizer,
    wave: Waveform,
    fb: MelFilterbank,
    cfg: FrameConfig | None = None,
) -> Waveform:
    """DNN-IRM baseline: predict a mel mask, expand it, apply to the noisy STFT."""
    cfg = cfg or FrameConfig()
    x = norm_in.apply(_model_input(wave, fb, cfg))
    mel_mask = np.clip(forward_utterance(model, x), 0.0, 1.0)
    linear = expand_mel_mask(mel_mask, fb)
    noisy_spec = dsp.stft(wave, cfg)
    return apply_mask(noisy_spec, Mask(linear, cfg))


def utterance_seed(base_seed: int, utt_id: str) -> int:
    """Stable per-utterance synthesis seed for reproducible parallel runs."""
    return (int(base_seed) * 2654435761 + zlib.crc32(utt_id.encode())) % (2**31)
