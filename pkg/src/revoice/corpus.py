"""WAV ingestion, noisy-mixture synthesis, manifests, and the feature store.

Mixtures follow a fixed recipe: clean speech plus a noise segment read from a
random offset (wrapping around if needed), both scaled by a constant gain.
The measured SNR is recorded per utterance but never enforced. Everything is
a pure function of (file contents, seed) so a rerun reproduces the corpus
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
import wave as wavlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import dsp, features, vocoder
from .dsp import SAMPLE_RATE, Waveform

DEFAULT_GAIN = 0.95

MATRIX_MAGIC = b"PVM1"


class WavFormatError(ValueError):
    """WAV file violates the pipeline's input contract (property named)."""


class DegenerateMixtureError(ValueError):
    """Mixture has no noise energy; SNR undefined."""


class ManifestError(ValueError):
    pass


def load_wav(path) -> Waveform:
    """Read a 16 kHz mono 16-bit PCM WAV, scaled to [-1, 1] by 1/32768."""
    try:
        with wavlib.open(str(path), "rb") as fh:
            rate = fh.getframerate()
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            raw = fh.readframes(fh.getnframes())
    except wavlib.Error as exc:
        raise WavFormatError(f"{path}: not a readable PCM WAV ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise WavFormatError(f"{path}: sample width {width} bytes, expected 16-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if not np.all(np.isfinite(samples)):
        raise WavFormatError(f"{path}: non-finite samples")
    return Waveform(samples, SAMPLE_RATE)


def save_wav(path, wave: Waveform) -> None:
    """Write 16-bit PCM with saturating rounding; exact inverse of load_wav."""
    ints = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with wavlib.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(ints.tobytes())


def mix(
    clean: Waveform, noise: Waveform, offset: int, gain: float = DEFAULT_GAIN
):
    """gain*(clean + noise segment); returns (noisy, snr_db, clipped).

    The noise segment starts at `offset` and wraps around when the clean
    utterance is longer than the remaining noise. SNR is the clean-to-segment
    energy ratio, independent of the gain. The mixture is never rescaled;
    clipping is only flagged.
    """
    n = len(clean)
    if n == 0:
        raise dsp.EmptySignalError("empty clean signal")
    if len(noise) < 1:
        raise ValueError("noise must be non-empty")
    if offset < 0:
        raise ValueError("offset must be nonnegative")
    idx = (offset + np.arange(n)) % len(noise)
    segment = noise.samples[idx]
    noise_energy = float(np.sum(segment * segment))
    if noise_energy == 0.0:
        raise DegenerateMixtureError("noise segment is all zeros; SNR is infinite")
    clean_energy = float(np.sum(clean.samples * clean.samples))
    snr_db = 10.0 * np.log10(clean_energy / noise_energy)
    noisy = gain * (clean.samples + segment)
    clipped = bool(np.max(np.abs(noisy)) > 1.0)
    return Waveform(noisy, clean.sample_rate), float(snr_db), clipped


@dataclass
class MixtureSpec:
    utt_id: str
    clean_path: str
    noise_path: str
    noise_offset: int
    gain: float
    snr_db: float
    clipped: bool
    split: str


@dataclass
class Manifest:
    entries: list
    seed: int

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def save(self, path) -> None:
        lines = [json.dumps({"seed": self.seed, "kind": "header"}, sort_keys=True)]
        for e in self.entries:
            lines.append(json.dumps(asdict(e), sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise ManifestError(f"{path}: missing manifest header")
        entries = [MixtureSpec(**json.loads(ln)) for ln in lines[1:] if ln.strip()]
        return cls(entries, int(header["seed"]))


def build_manifest(
    clean_dir,
    noise_dir,
    seed: int,
    split_counts,
    gain: float = DEFAULT_GAIN,
) -> Manifest:
    """Deterministic noise assignment and train/dev/test split.

    Clean files are shuffled with the seed and dealt into the requested
    split sizes; each gets a seeded noise file and offset. The recorded
    SNR comes from actually mixing, so the manifest is self-consistent.
    """
    clean_files = sorted(Path(clean_dir).glob("*.wav"))
    noise_files = sorted(Path(noise_dir).glob("*.wav"))
    n_train, n_dev, n_test = split_counts
    total = n_train + n_dev + n_test
    if len(clean_files) < total:
        raise ManifestError(
            f"need {total} clean files for splits {tuple(split_counts)}, "
            f"found {len(clean_files)} in {clean_dir}"
        )
    if not noise_files:
        raise ManifestError(f"no noise files in {noise_dir}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clean_files))[:total]
    split_of = ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test

    noise_cache = {}
    entries = []
    for pos, file_idx in enumerate(order):
        clean_path = clean_files[file_idx]
        noise_path = noise_files[rng.integers(len(noise_files))]
        if noise_path not in noise_cache:
            noise_cache[noise_path] = load_wav(noise_path)
        noise = noise_cache[noise_path]
        offset = int(rng.integers(len(noise)))
        clean = load_wav(clean_path)
        _, snr_db, clipped = mix(clean, noise, offset, gain)
        entries.append(
            MixtureSpec(
                utt_id=clean_path.stem,
                clean_path=str(clean_path),
                noise_path=str(noise_path),
                noise_offset=offset,
                gain=gain,
                snr_db=snr_db,
                clipped=clipped,
                split=split_of[pos],
            )
        )
    entries.sort(key=lambda e: ({"train": 0, "dev": 1, "test": 2}[e.split], e.utt_id))
    ids = [e.utt_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate utterance ids (clean file stems collide)")
    return Manifest(entries, seed)


def mixture_from_spec(spec: MixtureSpec) -> Waveform:
    clean = load_wav(spec.clean_path)
    noise = load_wav(spec.noise_path)
    noisy, _, _ = mix(clean, noise, spec.noise_offset, spec.gain)
    return noisy


# ---------------------------------------------------------------------------
# Matrix files and the feature store


def save_matrix(path, mat: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(mat))
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.astype("<f4").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MATRIX_MAGIC:
        raise WavFormatError(f"{path}: not a PVM matrix file")
    rows, cols = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * rows * cols:
        raise WavFormatError(f"{path}: truncated matrix payload")
    return (
        np.frombuffer(blob, dtype="<f4", offset=12)
        .reshape(rows, cols)
        .astype(np.float64)
    )


class FeatureStore:
    """Directory tree store/{split}/{utt_id}.{in,tgt}.pvm plus normalizers."""

    def __init__(self, root):
        self.root = Path(root)

    def matrix_path(self, split: str, utt_id: str, role: str) -> Path:
        return self.root / split / f"{utt_id}.{role}.pvm"

    def normalizer_path(self, kind: str) -> Path:
        return self.root / f"norm_{kind}.pvn"

    def index_path(self) -> Path:
        return self.root / "index.json"

    def utterances(self, split: str) -> list:
        d = self.root / split
        if not d.is_dir():
            return []
        return sorted(p.name[: -len(".in.pvm")] for p in d.glob("*.in.pvm"))

    def load_pair(self, split: str, utt_id: str):
        x = load_matrix(self.matrix_path(split, utt_id, "in"))
        y = load_matrix(self.matrix_path(split, utt_id, "tgt"))
        return x, y

    def load_normalizers(self):
        return (
            features.load_normalizer(self.normalizer_path("in")),
            features.load_normalizer(self.normalizer_path("tgt")),
        )


def _entry_hash(spec: MixtureSpec, input_role: str) -> str:
    payload = json.dumps([asdict(spec), input_role], sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def extract_pair(
    spec: MixtureSpec,
    cfg: dsp.FrameConfig,
    fb: dsp.MelFilterbank,
    input_role: str = "noisy",
):
    """Context-stacked log-mel input and 199-dim target for one utterance."""
    clean = load_wav(spec.clean_path)
    if input_role == "noisy":
        source = mixture_from_spec(spec)
    elif input_role == "clean":
        source = clean
    else:
        raise ValueError(f"unknown input role {input_role!r}")
    lm = dsp.log_mel(dsp.stft(source, cfg), fb)
    x = features.stack_context(lm)
    track = vocoder.analyze(clean, cfg)
    y = features.assemble_targets(track)
    if x.shape[0] != y.shape[0]:
        raise RuntimeError("input/target frame counts diverged")
    return x, y


@dataclass
class PrepareSummary:
    processed: int
    skipped: int
    failures: list


def prepare_features(
    manifest: Manifest,
    store_root,
    cfg: dsp.FrameConfig | None = None,
    n_mels: int = 80,
    input_role: str = "noisy",
    jobs: int = 1,
) -> PrepareSummary:
    """Extract and persist features for every manifest entry.

    Already-extracted utterances (matching content hash) are skipped, so an
    interrupted run can resume. Normalizers are fitted on the train split
    only, with the voicing column left untouched.
    """
    cfg = cfg or dsp.FrameConfig()
    fb = dsp.build_mel_filterbank(n_mels, cfg)
    store = FeatureStore(store_root)
    store.root.mkdir(parents=True, exist_ok=True)
    index = {}
    if store.index_path().exists():
        index = json.loads(store.index_path().read_text())

    todo = []
    skipped = 0
    for spec in manifest.entries:
        h = _entry_hash(spec, input_role)
        done = (
            index.get(spec.utt_id) == h
            and store.matrix_path(spec.split, spec.utt_id, "in").exists()
            and store.matrix_path(spec.split, spec.utt_id, "tgt").exists()
        )
        if done:
            skipped += 1
        else:
            todo.append((spec, h))

    failures = []

    def _run(item):
        spec, h = item
        x, y = extract_pair(spec, cfg, fb, input_role)
        return spec, h, x, y

    results = []
    if jobs > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_extract_worker, item, cfg, n_mels, input_role): item
                       for item in todo}
            for fut, item in futures.items():
                try:
                    results.append((item[0], item[1]) + fut.result())
                except Exception as exc:  # collected, not fatal
                    failures.append((item[0].utt_id, str(exc)))
    else:
        for item in todo:
            try:
                spec, h, x, y = _run(item)
                results.append((spec, h, x, y))
            except Exception as exc:
                failures.append((item[0].utt_id, str(exc)))

    for spec, h, x, y in results:
        (store.root / spec.split).mkdir(exist_ok=True)
        save_matrix(store.matrix_path(spec.split, spec.utt_id, "in"), x)
        save_matrix(store.matrix_path(spec.split, spec.utt_id, "tgt"), y)
        index[spec.utt_id] = h

    store.index_path().write_text(json.dumps(index, sort_keys=True, indent=0))

    train_ids = store.utterances("train")
    if train_ids:
        xs, ys = [], []
        for utt in train_ids:
            x, y = store.load_pair("train", utt)
            xs.append(x)
            ys.append(y)
        norm_in = features.fit_normalizer(xs, kind="input")
        norm_tgt = features.fit_normalizer(
            ys, excluded=(features.VUV_COL,), kind="target"
        )
        features.save_normalizer(norm_in, store.normalizer_path("in"))
        features.save_normalizer(norm_tgt, store.normalizer_path("tgt"))

    return PrepareSummary(len(results), skipped, failures)


def _extract_worker(item, cfg, n_mels, input_role):
    spec, _ = item
    fb = dsp.build_mel_filterbank(n_mels, cfg)
    return extract_pair(spec, cfg, fb, input_role)
