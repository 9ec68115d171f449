"""Command-line interface: the whole pipeline as subcommands of one tool.

    revoice mix       build a noisy-mixture manifest from clean + noise dirs
    revoice prepare   extract model inputs/targets into a feature store
    revoice train     train a prediction model (PR or mask) from a store
    revoice enhance   run one enhancement system over a manifest split
    revoice resynth   vocoder encode-decode a single WAV (VED)
    revoice eval      score system outputs against the clean references
    revoice report    print a combined table from eval report JSONs
    revoice selftest  run the quick numerical sanity oracles

Every run writes a `*.runconfig.json` provenance record next to its main
artifact. `--jobs 1` makes runs bit-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus, dsp, enhance, features, metrics, nnet, vocoder

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_FAILURE = 1

_VERSION = "0.1.0"


def _write_provenance(path, command, args_ns):
    record = {
        "tool": "revoice",
        "version": _VERSION,
        "command": command,
        "args": {k: v for k, v in sorted(vars(args_ns).items()) if k != "func"},
    }
    Path(path).write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


def _parse_splits(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or any(p < 0 for p in parts):
        raise argparse.ArgumentTypeError("splits must be train,dev,test counts")
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_mix(args):
    manifest = corpus.build_manifest(
        args.clean_dir, args.noise_dir, args.seed, args.splits, args.gain
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    _write_provenance(str(out) + ".runconfig.json", "mix", args)
    snrs = [e.snr_db for e in manifest.entries]
    print(
        f"wrote {len(manifest.entries)} mixtures to {out} "
        f"(snr {min(snrs):.1f}..{max(snrs):.1f} dB, mean {np.mean(snrs):.1f} dB)"
    )
    return EXIT_OK


def cmd_prepare(args):
    manifest = corpus.Manifest.load(args.manifest)
    cfg = dsp.FrameConfig()
    store = corpus.FeatureStore(args.store)
    if args.target == "vocoder":
        summary = corpus.prepare_features(
            manifest, args.store, cfg, args.n_mels, args.input, jobs=args.jobs
        )
    else:
        summary = _prepare_irm(manifest, store, cfg, args.n_mels, jobs=args.jobs)
    store.root.mkdir(parents=True, exist_ok=True)
    _write_provenance(store.root / f"runconfig.prepare.{args.target}.json", "prepare", args)
    print(
        f"prepared {summary.processed} utterances "
        f"({summary.skipped} already present) in {store.root}"
    )
    if summary.failures:
        for utt, msg in summary.failures:
            print(f"  FAILED {utt}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _prepare_irm(manifest, store, cfg, n_mels, jobs=1):
    """Feature store variant for the mask predictor: targets are mel IRMs."""
    fb = dsp.build_mel_filterbank(n_mels, cfg)
    store.root.mkdir(parents=True, exist_ok=True)
    failures = []
    processed = 0
    for entry in manifest.entries:
        try:
            clean = corpus.load_wav(entry.clean_path)
            noise = corpus.load_wav(entry.noise_path)
            noise_seg = corpus.Waveform(
                noise.samples[(entry.noise_offset + np.arange(len(clean))) % len(noise)]
            )
            noisy, _, _ = corpus.mix(clean, noise, entry.noise_offset, entry.gain)
            x = features.stack_context(dsp.log_mel(dsp.stft(noisy, cfg), fb))
            y = enhance.irm_mel_targets(
                dsp.stft(corpus.Waveform(clean.samples * entry.gain), cfg),
                dsp.stft(corpus.Waveform(noise_seg.samples * entry.gain), cfg),
                fb,
            )
            (store.root / entry.split).mkdir(exist_ok=True)
            corpus.save_matrix(store.matrix_path(entry.split, entry.utt_id, "in"), x)
            corpus.save_matrix(store.matrix_path(entry.split, entry.utt_id, "tgt"), y)
            processed += 1
        except Exception as exc:
            failures.append((entry.utt_id, str(exc)))

    train_ids = store.utterances("train")
    if train_ids:
        xs = [store.load_pair("train", u)[0] for u in train_ids]
        features.save_normalizer(
            features.fit_normalizer(xs, kind="input"), store.normalizer_path("in")
        )
        # mask targets stay in [0, 1]; persist an identity normalizer
        d = store.load_pair("train", train_ids[0])[1].shape[1]
        features.save_normalizer(
            features.Normalizer(np.zeros(d), np.ones(d), (), "target"),
            store.normalizer_path("tgt"),
        )
    return corpus.PrepareSummary(processed, 0, failures)


def _load_split_pairs(store, split, norm_in, norm_tgt):
    pairs = []
    for utt in store.utterances(split):
        x, y = store.load_pair(split, utt)
        pairs.append(
            (
                norm_in.apply(x).astype(np.float32),
                norm_tgt.apply(y).astype(np.float32),
            )
        )
    return pairs


def cmd_train(args):
    store = corpus.FeatureStore(args.store)
    norm_in, norm_tgt = store.load_normalizers()
    train_pairs = _load_split_pairs(store, "train", norm_in, norm_tgt)
    dev_pairs = _load_split_pairs(store, "dev", norm_in, norm_tgt)
    if not train_pairs or not dev_pairs:
        raise corpus.ManifestError(f"store {store.root} lacks train or dev features")

    lr = args.learning_rate
    if lr is None:
        lr = 1e-3 if args.kind == "feedforward" else 5e-4
    model_cfg = nnet.ModelConfig(
        kind=args.kind,
        input_dim=train_pairs[0][0].shape[1],
        output_dim=train_pairs[0][1].shape[1],
        hidden_layers=args.hidden_layers,
        hidden_width=args.hidden_width,
        seed=args.seed,
    )
    train_cfg = nnet.TrainConfig(
        learning_rate=lr,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        batch=args.batch,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
    )
    log = print if not args.quiet else None
    model, history = nnet.train(model_cfg, train_cfg, train_pairs, dev_pairs, log=log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nnet.save_checkpoint(model, out)
    Path(str(out) + ".history.json").write_text(json.dumps(history, indent=2))
    _write_provenance(str(out) + ".runconfig.json", "train", args)
    best = min(h["dev_mse"] for h in history)
    print(f"saved {out} (best dev mse {best:.6f} over {len(history)} epochs)")
    return EXIT_OK


def cmd_enhance(args):
    manifest = corpus.Manifest.load(args.manifest)
    entries = manifest.split(args.split)
    if args.filter_prefix:
        entries = [e for e in entries if e.utt_id.startswith(args.filter_prefix)]
    cfg = dsp.FrameConfig()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    system = enhance.SystemKind(args.system)
    context = {"cfg": cfg, "mode": args.mode, "seed": args.seed, "n_mels": args.n_mels}
    if system in (enhance.SystemKind.PR, enhance.SystemKind.PR_CLEAN,
                  enhance.SystemKind.DNN_IRM):
        if not args.checkpoint or not args.store:
            raise nnet.CheckpointError(
                f"system {args.system} needs --checkpoint and --store"
            )
        context["model"] = nnet.load_checkpoint(args.checkpoint)
        store = corpus.FeatureStore(args.store)
        context["norm_in"], context["norm_tgt"] = store.load_normalizers()

    work = [(asdict(e), args.system, str(out_dir), context) for e in entries]
    if args.jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_enhance_worker, work))
    else:
        for item in work:
            _enhance_worker(item)

    _write_provenance(out_dir / f"runconfig.enhance.{args.system}.json", "enhance", args)
    print(f"wrote {len(work)} {args.system} outputs to {out_dir}")
    return EXIT_OK


def _enhance_worker(item):
    entry_dict, system_name, out_dir, ctx = item
    entry = corpus.MixtureSpec(**entry_dict)
    cfg = ctx["cfg"]
    system = enhance.SystemKind(system_name)
    seed = enhance.utterance_seed(ctx["seed"], entry.utt_id)
    fb = dsp.build_mel_filterbank(ctx["n_mels"], cfg)

    if system is enhance.SystemKind.NOISY_PASSTHROUGH:
        out = corpus.mixture_from_spec(entry)
    elif system is enhance.SystemKind.VED:
        out = enhance.ved(corpus.load_wav(entry.clean_path), cfg, seed=seed)
    elif system is enhance.SystemKind.OWM:
        clean = corpus.load_wav(entry.clean_path)
        noise = corpus.load_wav(entry.noise_path)
        idx = (entry.noise_offset + np.arange(len(clean))) % len(noise)
        noise_seg = corpus.Waveform(noise.samples[idx] * entry.gain)
        clean_scaled = corpus.Waveform(clean.samples * entry.gain)
        noisy, _, _ = corpus.mix(clean, noise, entry.noise_offset, entry.gain)
        mask = enhance.oracle_wiener_mask(
            dsp.stft(clean_scaled, cfg), dsp.stft(noise_seg, cfg)
        )
        out = enhance.apply_mask(dsp.stft(noisy, cfg), mask)
    elif system is enhance.SystemKind.DNN_IRM:
        noisy = corpus.mixture_from_spec(entry)
        out = enhance.irm_enhance(ctx["model"], ctx["norm_in"], noisy, fb, cfg)
    elif system is enhance.SystemKind.PR:
        noisy = corpus.mixture_from_spec(entry)
        out = enhance.pr_enhance(
            ctx["model"], ctx["norm_in"], ctx["norm_tgt"], noisy, fb, cfg,
            mode=ctx["mode"], seed=seed,
        )
    elif system is enhance.SystemKind.PR_CLEAN:
        clean = corpus.load_wav(entry.clean_path)
        out = enhance.pr_enhance(
            ctx["model"], ctx["norm_in"], ctx["norm_tgt"], clean, fb, cfg,
            mode=ctx["mode"], seed=seed,
        )
    else:
        raise ValueError(f"unhandled system {system}")
    corpus.save_wav(Path(out_dir) / f"{entry.utt_id}.{system.value}.wav", out)


def cmd_resynth(args):
    wave = corpus.load_wav(args.input)
    out = enhance.ved(wave, seed=args.seed)
    corpus.save_wav(args.output, out)
    _write_provenance(str(args.output) + ".runconfig.json", "resynth", args)
    print(f"resynthesized {args.input} -> {args.output}")
    return EXIT_OK


def cmd_eval(args):
    manifest = corpus.Manifest.load(args.manifest)
    entries = manifest.split(args.split)
    if args.filter_prefix:
        entries = [e for e in entries if e.utt_id.startswith(args.filter_prefix)]
    report = metrics.evaluate_system(entries, args.outputs, args.system, jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    _write_provenance(str(out) + ".runconfig.json", "eval", args)
    print(metrics.format_report_table([report]))
    if report.missing:
        print(f"missing outputs for {len(report.missing)} utterances", file=sys.stderr)
    return EXIT_OK


def cmd_report(args):
    reports = [metrics.EvalReport.from_json(Path(p).read_text()) for p in args.reports]
    table = metrics.format_report_table(reports)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return EXIT_OK


def cmd_selftest(args):
    failures = 0

    def check(name, fn):
        nonlocal failures
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")

    def stft_roundtrip():
        rng = np.random.default_rng(0)
        cfg = dsp.FrameConfig()
        for _ in range(5):
            n = int(rng.integers(4000, 24000))
            wave = dsp.Waveform(rng.standard_normal(n) * 0.3)
            rec = dsp.istft(dsp.stft(wave, cfg))
            sl = slice(cfg.window_len, n - cfg.window_len)
            err = np.linalg.norm(rec.samples[sl] - wave.samples[sl])
            err /= np.linalg.norm(wave.samples[sl])
            assert err < 1e-6, f"reconstruction error {err:.2e}"

    def gradient_check():
        for kind in ("feedforward", "recurrent"):
            cfg = nnet.ModelConfig(
                kind, input_dim=3, output_dim=2, hidden_layers=2,
                hidden_width=4, seed=1, dtype="float64",
            )
            err = _max_grad_error(cfg, seed=1)
            assert err < 1e-4, f"{kind} gradient error {err:.2e}"

    def vocoder_roundtrip():
        from .testsignals import vowel_sequence

        wave = vowel_sequence(np.random.default_rng(3), duration=1.0)
        track = vocoder.analyze(wave)
        rec = vocoder.synthesize(track, seed=7)
        f_in = vocoder.estimate_f0(wave)
        f_out = vocoder.estimate_f0(rec)
        both = f_in.vuv & f_out.vuv
        rmse = np.sqrt(np.mean((f_in.f0[both] - f_out.f0[both]) ** 2))
        assert rmse < 2.0, f"F0 rmse {rmse:.2f} Hz"

    def metric_oracle():
        rng = np.random.default_rng(5)
        a = rng.standard_normal((40, 60))
        b = rng.standard_normal((40, 60))
        slow = np.mean(
            [
                metrics.MCD_SCALE
                * np.sqrt(2.0 * sum((a[t, d] - b[t, d]) ** 2 for d in range(1, 60)))
                for t in range(40)
            ]
        )
        assert abs(metrics.mcd(a, b) - slow) < 1e-9

    check("stft/istft round trip", stft_roundtrip)
    check("gradient finite differences", gradient_check)
    check("vocoder F0 round trip", vocoder_roundtrip)
    check("mcd brute-force oracle", metric_oracle)
    return EXIT_OK if failures == 0 else EXIT_FAILURE


def _max_grad_error(model_cfg, seed, steps=5):
    rng = np.random.default_rng(seed)
    model = nnet.init_model(model_cfg)
    x = rng.standard_normal((2, steps, model_cfg.input_dim))
    y = rng.standard_normal((2, steps, model_cfg.output_dim))
    mask = np.ones((2, steps), dtype=bool)
    pred, cache = nnet.forward(model, x, return_cache=True)
    _, grad = nnet.mse_loss(pred, y, mask)
    grads = nnet.backward(model, cache, grad)
    eps = 1e-4
    worst = 0.0
    for name, tensor in model.params.items():
        flat = tensor.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = nnet.mse_loss(nnet.forward(model, x), y, mask)
            flat[i] = orig - eps
            lm, _ = nnet.mse_loss(nnet.forward(model, x), y, mask)
            flat[i] = orig
            num[i] = (lp - lm) / (2 * eps)
        ana = grads[name].reshape(-1)
        scale = np.maximum(np.abs(num), 1e-8)
        worst = max(worst, float(np.max(np.abs(ana - num) / scale)))
    return worst


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="revoice", description="parametric resynthesis speech enhancement"
    )
    parser.add_argument("--version", action="version", version=f"revoice {_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    jobs_default = os.cpu_count() or 1

    p = sub.add_parser("mix", help="build a noisy mixture manifest")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", type=_parse_splits, default=(1000, 66, 66))
    p.add_argument("--gain", type=float, default=corpus.DEFAULT_GAIN)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("prepare", help="extract features into a store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--input", choices=("noisy", "clean"), default="noisy")
    p.add_argument("--target", choices=("vocoder", "irm"), default="vocoder")
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a prediction model")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=nnet.KINDS, default="feedforward")
    p.add_argument("--hidden-layers", type=int, default=0)
    p.add_argument("--hidden-width", type=int, default=512)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=25)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="run one enhancement system")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--system", choices=[k.value for k in enhance.SystemKind],
                   required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--store", help="feature store holding the normalizers")
    p.add_argument("--mode", choices=("mlpg", "static"), default="mlpg")
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter-prefix", default="")
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("resynth", help="vocoder encode-decode one WAV (VED)")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_resynth)

    p = sub.add_parser("eval", help="score system outputs against clean audio")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outputs", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--filter-prefix", default="")
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print a combined metrics table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the quick numerical oracles")
    p.set_defaults(func=cmd_selftest)

    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        parser.error("--config needs a path")
    cfg_path = argv[i + 1]
    try:
        overrides = json.loads(Path(cfg_path).read_text())
    except FileNotFoundError:
        raise
    if not isinstance(overrides, dict):
        parser.error(f"{cfg_path}: config must be a JSON object")
    rest = argv[:i] + argv[i + 2 :]
    # config values act as defaults; explicit flags win
    flags = []
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest:
            continue
        if isinstance(value, bool):
            if value:
                flags.append(flag)
        else:
            flags.extend([flag, str(value)])
    if rest and not rest[0].startswith("-"):
        return [rest[0]] + flags + rest[1:]
    return flags + rest


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except nnet.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        corpus.WavFormatError,
        corpus.ManifestError,
        corpus.DegenerateMixtureError,
        vocoder.TrackFormatError,
        features.NormalizerFormatError,
        metrics.MetricError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
