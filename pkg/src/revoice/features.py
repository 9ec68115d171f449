"""Model input/target construction and its inverse.

Targets are 199 columns in fixed blocks: mcep statics + first + second
derivatives (180), lf0 likewise (3), band aperiodicity likewise (15), and a
final voicing flag. Inputs are log-mel frames stacked with +-4 frames of
context. Predictions are mapped back to an acoustic track either by taking
the static blocks directly or by trajectory smoothing that also honors the
predicted derivatives (banded maximum-likelihood parameter generation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded

from .vocoder import AcousticTrack, F0_FLOOR, F0_CEIL

MCEP_DIM = 60
BAP_DIM = 5
LF0_DIM = 1

MCEP_BLOCK = slice(0, 180)
LF0_BLOCK = slice(180, 183)
BAP_BLOCK = slice(183, 198)
VUV_COL = 198
TARGET_DIM = 199

CONTEXT_RADIUS = 4
STD_FLOOR = 1e-8

NORMALIZER_MAGIC = b"PVN1"


class NormalizerFormatError(ValueError):
    pass


def compute_deltas(x: np.ndarray):
    """First and second time derivatives with replicated edge frames.

    delta_t = 0.5 * (x[t+1] - x[t-1]); deltadelta_t = x[t+1] - 2 x[t] + x[t-1].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    up = np.vstack([x[1:], x[-1:]])
    down = np.vstack([x[:1], x[:-1]])
    return 0.5 * (up - down), up - 2.0 * x + down


def assemble_targets(track: AcousticTrack) -> np.ndarray:
    """Stack statics, deltas, and the voicing flag into the 199-column layout."""
    parts = []
    for block in (track.mcep, track.lf0[:, None], track.bap):
        if not np.all(np.isfinite(block)):
            raise ValueError("non-finite values in acoustic track")
        d1, d2 = compute_deltas(block)
        parts.extend([block, d1, d2])
    parts.append(track.vuv.astype(np.float64)[:, None])
    out = np.concatenate(parts, axis=1)
    assert out.shape[1] == TARGET_DIM
    return out


def stack_context(x: np.ndarray, radius: int = CONTEXT_RADIUS) -> np.ndarray:
    """Concatenate rows t-radius .. t+radius per frame, edges replicated."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    idx = np.arange(n)[:, None] + np.arange(-radius, radius + 1)[None, :]
    idx = np.clip(idx, 0, n - 1)
    return x[idx].reshape(n, -1)


@dataclass
class Normalizer:
    """Per-column standardization with explicitly excluded columns."""

    mean: np.ndarray
    std: np.ndarray
    excluded: tuple = ()
    kind: str = "input"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        self.excluded = tuple(int(i) for i in self.excluded)

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = (np.asarray(x, dtype=np.float64) - self.mean) / self.std
        for c in self.excluded:
            out[..., c] = np.asarray(x)[..., c]
        return out

    def invert(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64) * self.std + self.mean
        for c in self.excluded:
            out[..., c] = np.asarray(x)[..., c]
        return out

    def variances(self) -> np.ndarray:
        return self.std**2


def fit_normalizer(matrices, excluded=(), kind="input") -> Normalizer:
    """Column mean/std over all frames of all matrices; std floored at 1e-8."""
    mats = [np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in matrices]
    if not mats or sum(m.shape[0] for m in mats) < 2:
        raise ValueError("need at least 2 frames to fit a normalizer")
    total = sum(m.shape[0] for m in mats)
    mean = sum(m.sum(axis=0) for m in mats) / total
    sq = sum(((m - mean) ** 2).sum(axis=0) for m in mats) / total
    std = np.maximum(np.sqrt(sq), STD_FLOOR)
    return Normalizer(mean, std, excluded, kind)


def save_normalizer(norm: Normalizer, path) -> None:
    d = norm.mean.shape[0]
    with open(path, "wb") as fh:
        fh.write(NORMALIZER_MAGIC)
        fh.write(struct.pack("<I", d))
        fh.write(norm.mean.astype("<f4").tobytes())
        fh.write(norm.std.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(norm.excluded)))
        for c in norm.excluded:
            fh.write(struct.pack("<I", c))


def load_normalizer(path) -> Normalizer:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != NORMALIZER_MAGIC:
        raise NormalizerFormatError(f"{path}: not a normalizer file")
    d = struct.unpack("<I", blob[4:8])[0]
    need = 8 + 8 * d + 4
    if len(blob) < need:
        raise NormalizerFormatError(f"{path}: truncated normalizer")
    mean = np.frombuffer(blob, dtype="<f4", count=d, offset=8).astype(np.float64)
    std = np.frombuffer(blob, dtype="<f4", count=d, offset=8 + 4 * d).astype(np.float64)
    n_ex = struct.unpack("<I", blob[8 + 8 * d : 12 + 8 * d])[0]
    if len(blob) != 12 + 8 * d + 4 * n_ex:
        raise NormalizerFormatError(f"{path}: truncated normalizer")
    excluded = struct.unpack(f"<{n_ex}I", blob[12 + 8 * d :]) if n_ex else ()
    return Normalizer(mean, std, excluded)


# ---------------------------------------------------------------------------
# Trajectory smoothing (banded weighted least squares over delta windows)


def _clamped_shift(n: int, k: int) -> sparse.csr_matrix:
    # row t picks x[t+k] with edge replication, matching compute_deltas
    rows = np.arange(n)
    cols = np.clip(rows + k, 0, n - 1)
    return sparse.csr_matrix((np.ones(n), (rows, cols)), shape=(n, n))


@lru_cache(maxsize=32)
def _window_gram_bands(n: int):
    """Delta window matrices and the upper bands of their Gram matrices."""
    up = _clamped_shift(n, 1)
    down = _clamped_shift(n, -1)
    eye = sparse.identity(n, format="csr")
    w1 = (0.5 * (up - down)).tocsr()
    w2 = (up - 2 * eye + down).tocsr()
    bands = []
    for w in (w1, w2):
        g = (w.T @ w).tocsr()
        ab = np.zeros((3, n))
        ab[2] = g.diagonal(0)
        ab[1, 1:] = g.diagonal(1)
        ab[0, 2:] = g.diagonal(2)
        bands.append(ab)
    return w1, w2, bands[0], bands[1]


def mlpg_smooth(means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Static trajectory most consistent with predicted statics and deltas.

    `means` is T x 3D (statics, deltas, delta-deltas for one stream) and
    `variances` the 3D global variances of those columns. Solves the banded
    normal equations exactly, one dimension at a time.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    n, cols = means.shape
    if cols % 3 != 0:
        raise ValueError("means must have 3*D columns")
    d = cols // 3
    variances = np.asarray(variances, dtype=np.float64)
    if variances.shape != (cols,):
        raise ValueError(f"expected {cols} variances, got {variances.shape}")
    if np.any(variances <= 0):
        raise ValueError("variances must be strictly positive")
    if n < 3:
        raise ValueError("need at least 3 frames for trajectory smoothing")

    w1, w2, g1, g2 = _window_gram_bands(n)
    out = np.empty((n, d))
    for j in range(d):
        p0 = 1.0 / variances[j]
        p1 = 1.0 / variances[d + j]
        p2 = 1.0 / variances[2 * d + j]
        ab = p1 * g1 + p2 * g2
        ab[2] += p0
        rhs = (
            p0 * means[:, j]
            + p1 * (w1.T @ means[:, d + j])
            + p2 * (w2.T @ means[:, 2 * d + j])
        )
        out[:, j] = solveh_banded(ab, rhs, lower=False)
    return out


def disassemble_targets(
    pred: np.ndarray,
    norm: Normalizer | None = None,
    mode: str = "mlpg",
) -> AcousticTrack:
    """Invert a (normalized) prediction matrix back to an acoustic track."""
    if mode not in ("static", "mlpg"):
        raise ValueError(f"unknown mode {mode!r}")
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if pred.shape[1] != TARGET_DIM:
        raise ValueError(f"expected {TARGET_DIM} columns, got {pred.shape[1]}")
    y = norm.invert(pred) if norm is not None else pred
    n = y.shape[0]
    vuv = y[:, VUV_COL] > 0.5

    if mode == "mlpg" and n >= 3:
        var = norm.variances() if norm is not None else np.ones(TARGET_DIM)
        mcep = mlpg_smooth(y[:, MCEP_BLOCK], var[MCEP_BLOCK])
        lf0 = mlpg_smooth(y[:, LF0_BLOCK], var[LF0_BLOCK])[:, 0]
        bap = mlpg_smooth(y[:, BAP_BLOCK], var[BAP_BLOCK])
    else:
        mcep = y[:, 0:MCEP_DIM].copy()
        lf0 = y[:, LF0_BLOCK.start].copy()
        bap = y[:, BAP_BLOCK.start : BAP_BLOCK.start + BAP_DIM].copy()

    lf0 = np.clip(lf0, np.log(F0_FLOOR), np.log(F0_CEIL))
    return AcousticTrack(mcep, bap, lf0, vuv)
