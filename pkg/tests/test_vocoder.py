import numpy as np
import pytest

from revoice import dsp, vocoder
from revoice.dsp import FrameConfig, Waveform
from revoice.testsignals import resonator_coeffs, pulse_train, sawtooth, vowel_sequence

CFG = FrameConfig()


def interior(track_len, margin=14):
    # frames whose analysis window stays clear of the reflection padding
    sel = np.zeros(track_len, dtype=bool)
    sel[margin : track_len - margin] = True
    return sel


# ---------------------------------------------------------------------------
# estimate_f0


def test_f0_sawtooth():
    f0t = vocoder.estimate_f0(sawtooth(200.0, 1.0, amplitude=0.5))
    assert f0t.vuv.mean() >= 0.95
    assert abs(np.median(f0t.f0[f0t.vuv]) - 200.0) <= 2.0


def test_f0_silence_all_unvoiced():
    f0t = vocoder.estimate_f0(Waveform(np.zeros(8000)))
    assert not f0t.vuv.any()
    assert np.all(f0t.f0 == 0)


def test_f0_white_noise_mostly_unvoiced():
    rng = np.random.default_rng(1)
    f0t = vocoder.estimate_f0(Waveform(0.3 * rng.standard_normal(16000)))
    assert (~f0t.vuv).mean() >= 0.8


def test_f0_rejects_empty():
    with pytest.raises(dsp.EmptySignalError):
        vocoder.estimate_f0(Waveform(np.zeros(0)))


def test_f0_voiced_values_inside_search_range():
    rng = np.random.default_rng(2)
    f0t = vocoder.estimate_f0(vowel_sequence(rng, 1.0))
    assert np.all(f0t.f0[f0t.vuv] >= vocoder.F0_FLOOR)
    assert np.all(f0t.f0[f0t.vuv] <= vocoder.F0_CEIL)
    assert np.all((f0t.f0 > 0) == f0t.vuv)


# ---------------------------------------------------------------------------
# estimate_envelope


def test_envelope_flat_for_white_noise():
    rng = np.random.default_rng(4)
    wave = Waveform(rng.standard_normal(2 * 16000))
    f0t = vocoder.estimate_f0(wave)
    env = vocoder.estimate_envelope(wave, f0t, CFG)
    avg = env[:100].mean(axis=0)
    lo, hi = int(300 / CFG.bin_hz), int(7000 / CFG.bin_hz)
    band_db = 10 * np.log10(avg[lo:hi])
    assert band_db.max() - band_db.min() < 6.0  # within +-3 dB


def test_envelope_peaks_at_formants():
    # vowel with resonances at 700 and 1200 Hz, F0 = 100 Hz
    from scipy.signal import lfilter

    n = 16000
    f0_curve = np.full(n, 100.0)
    pulses = pulse_train(f0_curve)
    sig = np.zeros(n)
    for freq, bw in ((700.0, 90.0), (1200.0, 90.0)):
        b, a = resonator_coeffs(freq, bw)
        sig += lfilter(b, a, pulses)
    wave = Waveform(0.4 * sig / np.max(np.abs(sig)))
    f0t = vocoder.estimate_f0(wave)
    env = vocoder.estimate_envelope(wave, f0t, CFG)
    avg = env[20:-20].mean(axis=0)
    for target in (700.0, 1200.0):
        want = int(round(target / CFG.bin_hz))
        window = avg[want - 6 : want + 7]
        assert abs((np.argmax(window) + want - 6) - want) <= 2


def test_envelope_strictly_positive():
    f0t = vocoder.estimate_f0(Waveform(np.zeros(8000)))
    env = vocoder.estimate_envelope(Waveform(np.zeros(8000)), f0t, CFG)
    assert np.all(env > 0)


def test_envelope_frame_count_check():
    wave = sawtooth(150.0, 0.5)
    f0t = vocoder.estimate_f0(wave)
    bad = vocoder.F0Track(f0t.f0[:-3], f0t.vuv[:-3])
    with pytest.raises(vocoder.FrameCountError):
        vocoder.estimate_envelope(wave, bad, CFG)


# ---------------------------------------------------------------------------
# mel-cepstrum


def test_mcep_flat_envelope_closed_form():
    p = 2.5
    mc = vocoder.envelope_to_mcep(np.full((4, CFG.n_bins), p))
    assert mc.shape == (4, 60)
    # log-power convention: coefficient 0 carries ln(p), the rest vanish
    assert np.allclose(mc[:, 0], np.log(p), atol=1e-9)
    assert np.abs(mc[:, 1:]).max() < 1e-6


def test_mcep_roundtrip_below_1db():
    omega = np.linspace(0, np.pi, CFG.n_bins)
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b, c = rng.uniform(0.3, 1.5, 3)
        env = np.exp(a * np.cos(omega) + b * np.cos(2 * omega) + c * np.sin(3 * omega))
        rec = vocoder.mcep_to_envelope(vocoder.envelope_to_mcep(env), CFG)
        err = 10 * np.log10(rec[0]) - 10 * np.log10(env)
        assert np.sqrt(np.mean(err**2)) < 1.0


def test_mcep_power_doubling_hits_coefficient_zero_only():
    omega = np.linspace(0, np.pi, CFG.n_bins)
    env = np.exp(np.cos(omega))[None]
    a = vocoder.envelope_to_mcep(env)
    b = vocoder.envelope_to_mcep(2.0 * env)
    diff = b - a
    assert abs(diff[0, 0] - np.log(2.0)) < 1e-9
    assert np.abs(diff[:, 1:]).max() < 1e-9


def test_mcep_rejects_nonpositive():
    env = np.ones((2, CFG.n_bins))
    env[1, 5] = 0.0
    with pytest.raises(ValueError):
        vocoder.envelope_to_mcep(env)


# ---------------------------------------------------------------------------
# band aperiodicity


def test_bap_sawtooth_low_in_first_band():
    wave = sawtooth(200.0, 1.0, amplitude=0.5)
    f0t = vocoder.estimate_f0(wave)
    bap = vocoder.estimate_band_aperiodicity(wave, f0t, CFG)
    sel = f0t.vuv & interior(len(f0t))
    assert bap[sel, 0].max() <= -20.0


def test_bap_white_noise_fully_aperiodic():
    rng = np.random.default_rng(6)
    wave = Waveform(0.3 * rng.standard_normal(16000))
    f0t = vocoder.estimate_f0(wave)
    bap = vocoder.estimate_band_aperiodicity(wave, f0t, CFG)
    assert bap.min() >= -3.0


def test_bap_unvoiced_frames_are_zero():
    rng = np.random.default_rng(7)
    wave = Waveform(0.3 * rng.standard_normal(16000))
    f0t = vocoder.estimate_f0(wave)
    bap = vocoder.estimate_band_aperiodicity(wave, f0t, CFG)
    assert np.all(bap[~f0t.vuv] == 0.0)


# ---------------------------------------------------------------------------
# analyze


def test_analyze_frame_count_matches_stft():
    wave = sawtooth(170.0, 0.73)
    track = vocoder.analyze(wave, CFG)
    assert len(track) == dsp.stft(wave, CFG).n_frames
    assert track.mcep.shape == (len(track), 60)
    assert track.bap.shape == (len(track), 5)
    assert track.lf0.shape == (len(track),)
    assert track.vuv.shape == (len(track),)


def test_analyze_sawtooth_lf0():
    track = vocoder.analyze(sawtooth(200.0, 1.0, amplitude=0.5))
    voiced = track.vuv
    assert abs(np.median(track.lf0[voiced]) - np.log(200.0)) <= 0.01


def test_analyze_silence_interpolated_lf0_finite():
    track = vocoder.analyze(Waveform(np.zeros(8000)))
    assert not track.vuv.any()
    assert np.all(np.isfinite(track.lf0))


def test_analyze_lf0_interpolated_through_gaps():
    rng = np.random.default_rng(8)
    wave = vowel_sequence(rng, 1.0)
    track = vocoder.analyze(wave)
    assert np.all(np.isfinite(track.lf0))
    assert np.all(track.lf0 >= np.log(vocoder.F0_FLOOR) - 1e-9)
    assert np.all(track.lf0 <= np.log(vocoder.F0_CEIL) + 1e-9)


# ---------------------------------------------------------------------------
# synthesize


def test_synthesize_periodic_pulse_lag():
    n = 200
    track = vocoder.AcousticTrack(
        mcep=np.zeros((n, 60)),
        bap=np.full((n, 5), -60.0),
        lf0=np.full(n, np.log(200.0)),
        vuv=np.ones(n, dtype=bool),
    )
    wave = vocoder.synthesize(track, seed=1)
    x = wave.samples[2000:12000]
    ac = np.correlate(x, x, "full")[len(x) - 1 :]
    assert np.argmax(ac[40:160]) + 40 == 80  # 16000 / 200


def test_synthesize_unvoiced_flat_noise_spectrum():
    n = 300
    track = vocoder.AcousticTrack(
        mcep=np.zeros((n, 60)),
        bap=np.zeros((n, 5)),
        lf0=np.full(n, np.log(150.0)),
        vuv=np.zeros(n, dtype=bool),
    )
    wave = vocoder.synthesize(track, seed=2)
    spec = dsp.stft(wave, CFG)
    avg = spec.power()[20:-20].mean(axis=0)
    lo, hi = int(300 / CFG.bin_hz), int(7000 / CFG.bin_hz)
    band_db = 10 * np.log10(avg[lo:hi])
    assert band_db.max() - band_db.min() < 6.0


def test_synthesize_unvoiced_output_has_no_pitch():
    n = 250
    track = vocoder.AcousticTrack(
        mcep=np.zeros((n, 60)),
        bap=np.zeros((n, 5)),
        lf0=np.full(n, np.log(200.0)),
        vuv=np.zeros(n, dtype=bool),
    )
    wave = vocoder.synthesize(track, seed=3)
    f0t = vocoder.estimate_f0(wave)
    assert (~f0t.vuv).mean() >= 0.8


def test_synthesize_deterministic_and_peak_limited():
    rng = np.random.default_rng(9)
    track = vocoder.analyze(vowel_sequence(rng, 0.8))
    a = vocoder.synthesize(track, seed=11)
    b = vocoder.synthesize(track, seed=11)
    assert np.array_equal(a.samples, b.samples)
    assert np.max(np.abs(a.samples)) <= 0.99 + 1e-12


def test_synthesize_rejects_nonfinite():
    n = 10
    track = vocoder.AcousticTrack(
        np.zeros((n, 60)), np.zeros((n, 5)), np.full(n, np.nan), np.zeros(n, bool)
    )
    with pytest.raises(ValueError):
        vocoder.synthesize(track)


def test_synthesize_energy_doubles_with_mcep0():
    n = 220
    # gain low enough that the 0.99 peak limiter never engages
    base = vocoder.AcousticTrack(
        mcep=np.concatenate([np.full((n, 1), np.log(1e-4)), np.zeros((n, 59))], axis=1),
        bap=np.full((n, 5), -60.0),
        lf0=np.full(n, np.log(140.0)),
        vuv=np.ones(n, dtype=bool),
    )
    louder = vocoder.AcousticTrack(
        base.mcep + np.concatenate([[np.log(2.0)], np.zeros(59)]),
        base.bap,
        base.lf0,
        base.vuv,
    )
    a = vocoder.synthesize(base, seed=4).samples
    b = vocoder.synthesize(louder, seed=4).samples
    sl = slice(3000, 13000)
    ratio = np.sum(b[sl] ** 2) / np.sum(a[sl] ** 2)
    assert abs(ratio - 2.0) < 0.2


def test_vocoder_roundtrip_f0_fidelity():
    rng = np.random.default_rng(10)
    for seed in range(3):
        wave = vowel_sequence(rng, 1.0)
        rec = vocoder.synthesize(vocoder.analyze(wave), seed=seed)
        assert abs(len(rec) - len(wave)) <= CFG.hop
        f_in = vocoder.estimate_f0(wave)
        f_out = vocoder.estimate_f0(rec)
        n = min(len(f_in.f0), len(f_out.f0))
        both = f_in.vuv[:n] & f_out.vuv[:n]
        rmse = np.sqrt(np.mean((f_in.f0[:n][both] - f_out.f0[:n][both]) ** 2))
        assert rmse < 2.0
        assert np.mean(f_in.vuv[:n] != f_out.vuv[:n]) < 0.05


# ---------------------------------------------------------------------------
# track file format


def test_track_file_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    track = vocoder.analyze(vowel_sequence(rng, 0.6))
    path = tmp_path / "utt.pvt"
    vocoder.save_track(track, path)
    loaded = vocoder.load_track(path)
    assert np.allclose(loaded.mcep, track.mcep, atol=1e-6)
    assert np.allclose(loaded.bap, track.bap, atol=1e-6)
    assert np.allclose(loaded.lf0, track.lf0, atol=1e-6)
    assert np.array_equal(loaded.vuv, track.vuv)


def test_track_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pvt"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(vocoder.TrackFormatError):
        vocoder.load_track(path)
    path.write_bytes(b"PVT1" + b"\x00" * 10)
    with pytest.raises(vocoder.TrackFormatError):
        vocoder.load_track(path)
