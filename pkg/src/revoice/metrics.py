"""Objective measures: MCD, BAPD, F0 RMSE/CORR, VUV error, STOI, SNR, reports.

Vocoder-domain metrics compare frame-aligned acoustic parameter sequences
(no time warping; all systems here are frame-synchronous with the
reference). STOI follows the standard short-time objective intelligibility
procedure at 10 kHz with one-third-octave bands and 384 ms segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly

from . import corpus, vocoder
from .dsp import Waveform
from .vocoder import AcousticTrack, F0Track

MCD_SCALE = 10.0 / math.log(10.0)

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_NBANDS = 15
_STOI_MINFREQ = 150.0
_STOI_SEG = 30  # frames per 384 ms temporal envelope segment
_STOI_BETA = -15.0  # lower SDR clipping bound, dB
_STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


class MetricError(ValueError):
    pass


class NoVoicedOverlapError(MetricError):
    """No frames are voiced in both tracks; F0 RMSE/CORR undefined."""


class ZeroVarianceError(MetricError):
    """Pearson correlation undefined for a constant F0 contour."""


class SignalTooShortError(MetricError):
    """Signal shorter than one STOI analysis segment after silence removal."""


def mcd(ref_mcep: np.ndarray, hyp_mcep: np.ndarray) -> float:
    """Mel-cepstral distortion in dB, energy coefficient excluded."""
    ref = np.atleast_2d(np.asarray(ref_mcep, dtype=np.float64))
    hyp = np.atleast_2d(np.asarray(hyp_mcep, dtype=np.float64))
    if ref.shape != hyp.shape:
        raise MetricError(f"frame/shape mismatch {ref.shape} vs {hyp.shape}")
    diff = ref[:, 1:] - hyp[:, 1:]
    per_frame = MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))
    return float(np.mean(per_frame))


def bapd(ref_bap: np.ndarray, hyp_bap: np.ndarray) -> float:
    """Frame-averaged RMS difference over the aperiodicity bands, in dB."""
    ref = np.atleast_2d(np.asarray(ref_bap, dtype=np.float64))
    hyp = np.atleast_2d(np.asarray(hyp_bap, dtype=np.float64))
    if ref.shape != hyp.shape:
        raise MetricError(f"frame/shape mismatch {ref.shape} vs {hyp.shape}")
    diff = ref - hyp
    return float(np.mean(np.sqrt(np.mean(diff * diff, axis=1))))


def f0_metrics(ref: F0Track, hyp: F0Track) -> dict:
    """RMSE (Hz) and Pearson correlation on mutually voiced frames; VUV error %."""
    if len(ref) != len(hyp):
        raise MetricError(f"frame count mismatch {len(ref)} vs {len(hyp)}")
    vuv_pct = 100.0 * float(np.mean(ref.vuv != hyp.vuv))
    both = ref.vuv & hyp.vuv
    if not both.any():
        raise NoVoicedOverlapError("no mutually voiced frames")
    r = ref.f0[both]
    h = hyp.f0[both]
    rmse = float(np.sqrt(np.mean((r - h) ** 2)))
    if r.std() == 0.0 or h.std() == 0.0:
        raise ZeroVarianceError("constant F0 contour; correlation undefined")
    corr = float(np.corrcoef(r, h)[0, 1])
    return {"rmse_hz": rmse, "corr": corr, "vuv_pct": vuv_pct}


# ---------------------------------------------------------------------------
# STOI


def _stoi_resample(x: np.ndarray, sr: int) -> np.ndarray:
    if sr == _STOI_FS:
        return x
    frac = Fraction(_STOI_FS, sr)
    return resample_poly(x, frac.numerator, frac.denominator)


def _stoi_frames(x: np.ndarray) -> np.ndarray:
    n = 1 + (len(x) - _STOI_FRAME) // _STOI_HOP
    idx = np.arange(_STOI_FRAME)[None, :] + _STOI_HOP * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    w = get_window("hann", _STOI_FRAME, fftbins=True)
    xf = _stoi_frames(x) * w
    yf = _stoi_frames(y) * w
    energy_db = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy_db > energy_db.max() - _STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    n_out = (len(xf) - 1) * _STOI_HOP + _STOI_FRAME if len(xf) else 0
    xs = np.zeros(n_out)
    ys = np.zeros(n_out)
    for t in range(len(xf)):
        start = t * _STOI_HOP
        xs[start : start + _STOI_FRAME] += xf[t]
        ys[start : start + _STOI_FRAME] += yf[t]
    return xs, ys


def _third_octave_matrix() -> np.ndarray:
    freqs = np.arange(_STOI_NFFT // 2 + 1) * _STOI_FS / _STOI_NFFT
    obm = np.zeros((_STOI_NBANDS, len(freqs)))
    for band in range(_STOI_NBANDS):
        center = _STOI_MINFREQ * 2.0 ** (band / 3.0)
        lo = center / 2.0 ** (1.0 / 6.0)
        hi = center * 2.0 ** (1.0 / 6.0)
        obm[band] = (freqs >= lo) & (freqs < hi)
    return obm


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = get_window("hann", _STOI_FRAME, fftbins=True)
    spec = np.fft.rfft(_stoi_frames(x) * w, n=_STOI_NFFT, axis=1)
    return np.sqrt(np.abs(spec) ** 2 @ obm.T)


def stoi(clean: Waveform, processed: Waveform) -> float:
    """Short-time objective intelligibility of `processed` given `clean`.

    Both signals are resampled to 10 kHz; frames where the clean signal is
    more than 40 dB below its loudest frame are dropped; one-third-octave
    band envelopes over 30-frame segments are compared by linear correlation
    after per-segment normalization and -15 dB SDR clipping.
    """
    if clean.sample_rate != processed.sample_rate:
        raise MetricError("sample rates differ")
    n = min(len(clean), len(processed))
    if n == 0:
        raise SignalTooShortError("empty signal")
    x = _stoi_resample(clean.samples[:n], clean.sample_rate)
    y = _stoi_resample(processed.samples[:n], processed.sample_rate)
    if len(x) < _STOI_FRAME:
        raise SignalTooShortError("signal shorter than one STOI frame")
    x, y = _remove_silent_frames(x, y)
    if len(x) < _STOI_FRAME + (_STOI_SEG - 1) * _STOI_HOP:
        raise SignalTooShortError("fewer than 30 frames after silence removal")

    obm = _third_octave_matrix()
    xb = _band_envelopes(x, obm)  # (frames, bands)
    yb = _band_envelopes(y, obm)

    clip_gain = 10.0 ** (-_STOI_BETA / 20.0)
    scores = []
    for m in range(_STOI_SEG, xb.shape[0] + 1):
        xs = xb[m - _STOI_SEG : m].T  # (bands, 30)
        ys = yb[m - _STOI_SEG : m].T
        alpha = np.linalg.norm(xs, axis=1) / (np.linalg.norm(ys, axis=1) + _EPS)
        yn = np.minimum(ys * alpha[:, None], xs * (1.0 + clip_gain))
        xm = xs - xs.mean(axis=1, keepdims=True)
        ym = yn - yn.mean(axis=1, keepdims=True)
        num = np.sum(xm * ym, axis=1)
        den = np.linalg.norm(xm, axis=1) * np.linalg.norm(ym, axis=1) + _EPS
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def residual_snr_db(ref: Waveform, hyp: Waveform, cap_db: float = 120.0) -> float:
    """SNR of hyp against ref treating the difference as noise; capped."""
    n = min(len(ref), len(hyp))
    r = ref.samples[:n]
    h = hyp.samples[:n]
    err = float(np.sum((r - h) ** 2))
    sig = float(np.sum(r * r))
    if err <= 0.0:
        return cap_db
    return float(min(10.0 * np.log10(max(sig, 1e-300) / err), cap_db))


# ---------------------------------------------------------------------------
# Corpus evaluation


METRIC_COLUMNS = ("mcd_db", "bapd_db", "f0_rmse_hz", "f0_corr", "vuv_pct", "stoi", "snr_db")


@dataclass
class EvalReport:
    system: str
    per_utt: dict  # utt_id -> {metric: value or None}
    means: dict
    n_expected: int
    missing: list = field(default_factory=list)

    @property
    def n_evaluated(self) -> int:
        return len(self.per_utt)

    def to_json(self) -> str:
        payload = {
            "system": self.system,
            "n_expected": self.n_expected,
            "n_evaluated": self.n_evaluated,
            "missing": self.missing,
            "means": self.means,
            "per_utterance": self.per_utt,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            d["system"], d["per_utterance"], d["means"], d["n_expected"], d["missing"]
        )


def evaluate_utterance(clean: Waveform, output: Waveform, compute_stoi=True) -> dict:
    """All metrics for one (reference, system output) pair."""
    n = min(len(clean), len(output))
    ref_w = Waveform(clean.samples[:n], clean.sample_rate)
    hyp_w = Waveform(output.samples[:n], output.sample_rate)
    ref = vocoder.analyze(ref_w)
    hyp = vocoder.analyze(hyp_w)
    row = {
        "mcd_db": mcd(ref.mcep, hyp.mcep),
        "bapd_db": bapd(ref.bap, hyp.bap),
        "snr_db": residual_snr_db(ref_w, hyp_w),
    }
    try:
        row.update(
            {
                "f0_rmse_hz": None,
                "f0_corr": None,
                "vuv_pct": 100.0 * float(np.mean(ref.vuv != hyp.vuv)),
            }
        )
        f0m = f0_metrics(ref.f0_track(), hyp.f0_track())
        row["f0_rmse_hz"] = f0m["rmse_hz"]
        row["f0_corr"] = f0m["corr"]
        row["vuv_pct"] = f0m["vuv_pct"]
    except MetricError:
        pass
    try:
        row["stoi"] = stoi(ref_w, hyp_w) if compute_stoi else None
    except SignalTooShortError:
        row["stoi"] = None
    return row


def evaluate_system(
    entries,
    outputs_dir,
    system: str,
    jobs: int = 1,
) -> EvalReport:
    """Evaluate `{utt_id}.{system}.wav` files against the manifest's clean audio."""
    outputs_dir = Path(outputs_dir)
    jobs = max(1, jobs)
    work = []
    missing = []
    for entry in entries:
        out_path = outputs_dir / f"{entry.utt_id}.{system}.wav"
        if not out_path.exists():
            missing.append(entry.utt_id)
        else:
            work.append((entry.utt_id, entry.clean_path, str(out_path)))

    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_eval_worker, work))
    else:
        rows = [_eval_worker(item) for item in work]

    per_utt = {utt: row for (utt, _, _), row in zip(work, rows)}
    means = {}
    for col in METRIC_COLUMNS:
        vals = [row[col] for row in per_utt.values() if row.get(col) is not None]
        means[col] = float(np.mean(vals)) if vals else None
    return EvalReport(system, per_utt, means, len(entries), missing)


def _eval_worker(item):
    _, clean_path, out_path = item
    return evaluate_utterance(corpus.load_wav(clean_path), corpus.load_wav(out_path))


def format_report_table(reports) -> str:
    """Aligned systems-by-metrics text table."""
    headers = ["System", "MCD(dB)", "BAPD(dB)", "RMSE(Hz)", "CORR", "VUV(%)", "STOI", "SNR(dB)", "N"]
    rows = []
    for rep in reports:
        m = rep.means
        rows.append(
            [
                rep.system,
                _fmt(m.get("mcd_db"), 2),
                _fmt(m.get("bapd_db"), 2),
                _fmt(m.get("f0_rmse_hz"), 2),
                _fmt(m.get("f0_corr"), 3),
                _fmt(m.get("vuv_pct"), 2),
                _fmt(m.get("stoi"), 3),
                _fmt(m.get("snr_db"), 1),
                f"{rep.n_evaluated}/{rep.n_expected}",
            ]
        )
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)


def _fmt(value, digits: int) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}f}"
