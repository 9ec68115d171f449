"""Speech enhancement by parametric resynthesis.

A neural model predicts clean-speech vocoder parameters from noisy log-mel
features; a parametric vocoder then resynthesizes noise-free audio. The
package also ships the classic mask-based baselines (oracle Wiener mask,
DNN-predicted ratio mask) and an objective evaluation suite (MCD, BAPD,
F0 RMSE/CORR, VUV, STOI).
"""

from .dsp import (
    FrameConfig,
    MelFilterbank,
    Spectrogram,
    Waveform,
    build_mel_filterbank,
    istft,
    log_mel,
    stft,
)
from .vocoder import AcousticTrack, F0Track, analyze, synthesize
from .features import (
    Normalizer,
    assemble_targets,
    compute_deltas,
    disassemble_targets,
    fit_normalizer,
    mlpg_smooth,
    stack_context,
)
from .corpus import Manifest, MixtureSpec, build_manifest, load_wav, mix, save_wav
from .nnet import Model, ModelConfig, TrainConfig, train
from .enhance import SystemKind, oracle_wiener_mask, apply_mask, pr_enhance, ved
from .metrics import EvalReport, bapd, evaluate_system, f0_metrics, mcd, stoi

__version__ = "0.1.0"

__all__ = [
    "AcousticTrack",
    "EvalReport",
    "F0Track",
    "FrameConfig",
    "Manifest",
    "MelFilterbank",
    "MixtureSpec",
    "Model",
    "ModelConfig",
    "Normalizer",
    "Spectrogram",
    "SystemKind",
    "TrainConfig",
    "Waveform",
    "analyze",
    "apply_mask",
    "assemble_targets",
    "bapd",
    "build_manifest",
    "build_mel_filterbank",
    "compute_deltas",
    "disassemble_targets",
    "evaluate_system",
    "f0_metrics",
    "fit_normalizer",
    "istft",
    "load_wav",
    "log_mel",
    "mcd",
    "mix",
    "mlpg_smooth",
    "oracle_wiener_mask",
    "pr_enhance",
    "save_wav",
    "stack_context",
    "stft",
    "stoi",
    "synthesize",
    "train",
    "ved",
]
